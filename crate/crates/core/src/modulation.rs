//! Textural modulation (TexMod).
//!
//! One of the K encoder features is picked at random as the feature to
//! modulate; the remaining ones are references. Four same-shape convolutions
//! turn the chosen feature into `(alpha1, beta1)` and the summed references
//! into `(alpha2, beta2)`. The first stage fuses them into
//! `alpha_o = (1 + beta1) * alpha2 + alpha1`; the second stage applies
//! `(1 + beta2) * IN(f_mod) + alpha_o` to the instance-normalized chosen
//! feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module};
use crate::tensor::{
    instance_normalize, one_plus_mul_add, ConvSpec, Padding, Param, Tape, Var, INSTANCE_NORM_EPS,
};

/// How reference features are combined before their convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RefReduce {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for RefReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(RefReduce::Sum),
            "mean" => Ok(RefReduce::Mean),
            other => Err(Error::Config(format!(
                "unknown reference reduction `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for RefReduce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RefReduce::Sum => "sum",
            RefReduce::Mean => "mean",
        })
    }
}

/// The modulation maps of one forward pass, all shaped like the chosen feature.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams<'t> {
    pub alpha1: Var<'t>,
    pub beta1: Var<'t>,
    pub alpha2: Var<'t>,
    pub beta2: Var<'t>,
    pub alpha_o: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct TexModBlock {
    pub mod_alpha: Conv2d,
    pub mod_beta: Conv2d,
    pub ref_alpha: Conv2d,
    pub ref_beta: Conv2d,
    pub reduce: RefReduce,
    pub eps: f32,
}

fn same_conv() -> ConvSpec {
    ConvSpec::new(1, Padding::SameZero)
}

impl TexModBlock {
    /// 3x3 same-padded convolutions, zero-initialized so an untrained block
    /// reduces to plain instance normalization of the chosen feature.
    pub fn new(name: &str, channels: usize) -> Self {
        let conv = |suffix: &str| {
            Conv2d::zeros(
                &format!("{name}.{suffix}"),
                channels,
                channels,
                3,
                same_conv(),
            )
        };
        TexModBlock {
            mod_alpha: conv("mod_alpha"),
            mod_beta: conv("mod_beta"),
            ref_alpha: conv("ref_alpha"),
            ref_beta: conv("ref_beta"),
            reduce: RefReduce::Sum,
            eps: INSTANCE_NORM_EPS,
        }
    }

    /// Randomly initialized variant, used where non-trivial maps are needed.
    pub fn random<R: Rng + ?Sized>(name: &str, channels: usize, rng: &mut R) -> Self {
        let mut conv = |suffix: &str| {
            Conv2d::new(
                &format!("{name}.{suffix}"),
                channels,
                channels,
                3,
                same_conv(),
                rng,
            )
        };
        TexModBlock {
            mod_alpha: conv("mod_alpha"),
            mod_beta: conv("mod_beta"),
            ref_alpha: conv("ref_alpha"),
            ref_beta: conv("ref_beta"),
            reduce: RefReduce::Sum,
            eps: INSTANCE_NORM_EPS,
        }
    }
}

impl Module for TexModBlock {
    fn params(&self) -> Vec<&Param> {
        [
            &self.mod_alpha,
            &self.mod_beta,
            &self.ref_alpha,
            &self.ref_beta,
        ]
        .into_iter()
        .flat_map(|c| c.params())
        .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [
            &mut self.mod_alpha,
            &mut self.mod_beta,
            &mut self.ref_alpha,
            &mut self.ref_beta,
        ]
        .into_iter()
        .flat_map(|c| c.params_mut())
        .collect()
    }
}

/// Uniform index of the feature to modulate. `k == 1` returns 0 without
/// drawing from `rng`.
pub fn choose_mod_index<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<usize> {
    match k {
        0 => Err(Error::EmptyEpisode),
        1 => Ok(0),
        _ => Ok(rng.random_range(0..k)),
    }
}

/// First stage: derive `(alpha1, beta1)` from `f_mod`, `(alpha2, beta2)` from
/// the combined references, and fuse them into `alpha_o`.
pub fn compute_params<'t>(
    block: &TexModBlock,
    tape: &'t Tape,
    f_mod: Var<'t>,
    f_refs: &[Var<'t>],
) -> Result<ModulationParams<'t>> {
    let (first, rest) = f_refs.split_first().ok_or(Error::EmptyEpisode)?;
    let shape = f_mod.shape();
    f_mod.value().dims4()?;
    for r in f_refs {
        if r.shape() != shape {
            return Err(Error::shape(format!(
                "reference feature {:?} differs from chosen feature {shape:?}",
                r.shape()
            )));
        }
    }
    let mut combined = *first;
    for r in rest {
        combined = combined.add(*r)?;
    }
    if block.reduce == RefReduce::Mean && !rest.is_empty() {
        combined = combined.scale(1.0 / f_refs.len() as f32)?;
    }

    let alpha1 = block.mod_alpha.forward(tape, f_mod)?;
    let beta1 = block.mod_beta.forward(tape, f_mod)?;
    let alpha2 = block.ref_alpha.forward(tape, combined)?;
    let beta2 = block.ref_beta.forward(tape, combined)?;
    let alpha_o = one_plus_mul_add(alpha2, beta1, alpha1)?;
    Ok(ModulationParams {
        alpha1,
        beta1,
        alpha2,
        beta2,
        alpha_o,
    })
}

/// Second stage: `(1 + beta2) * IN(f_mod) + alpha_o`.
pub fn second_stage_inject<'t>(
    f_mod: Var<'t>,
    params: &ModulationParams<'t>,
    eps: f32,
) -> Result<Var<'t>> {
    let shape = f_mod.shape();
    if params.beta2.shape() != shape || params.alpha_o.shape() != shape {
        return Err(Error::shape(format!(
            "modulation maps {:?}/{:?} do not match feature {shape:?}",
            params.beta2.shape(),
            params.alpha_o.shape()
        )));
    }
    let normalized = instance_normalize(f_mod, eps)?;
    one_plus_mul_add(normalized, params.beta2, params.alpha_o)
}

/// Full TexMod over the K features of one episode (each `[N, C, H, W]`).
/// Returns the modulated feature and the chosen index. With a single
/// feature, modulation is bypassed and the feature is returned unchanged.
pub fn texmod_forward<'t, R: Rng + ?Sized>(
    block: &TexModBlock,
    tape: &'t Tape,
    features: &[Var<'t>],
    rng: &mut R,
) -> Result<(Var<'t>, usize)> {
    let chosen = choose_mod_index(features.len(), rng)?;
    if features.len() == 1 {
        return Ok((features[0], 0));
    }
    let f_mod = features[chosen];
    let refs: Vec<Var<'t>> = features
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != chosen)
        .map(|(_, &f)| f)
        .collect();
    let params = compute_params(block, tape, f_mod, &refs)?;
    let out = second_stage_inject(f_mod, &params, block.eps)?;
    Ok((out, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats<'t>(tape: &'t Tape, k: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<Var<'t>> {
        (0..k)
            .map(|_| tape.variable(Tensor::randn(shape, 1.0, rng)))
            .collect()
    }

    #[test]
    fn choose_index_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(choose_mod_index(1, &mut rng).unwrap(), 0);
        assert!(matches!(
            choose_mod_index(0, &mut rng),
            Err(Error::EmptyEpisode)
        ));
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| choose_mod_index(3, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert!(draw(5).iter().all(|&i| i < 3));
    }

    #[test]
    fn choose_index_is_uniform_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[choose_mod_index(3, &mut rng).unwrap()] += 1;
        }
        // Binomial(n, 1/3): sigma = sqrt(n p (1-p)).
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn zero_block_gives_zero_params_and_normalized_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let block = TexModBlock::new("t", 4);
        let fs = feats(&tape, 3, &[1, 4, 4, 4], &mut rng);
        let p = compute_params(&block, &tape, fs[0], &fs[1..]).unwrap();
        for m in [p.alpha1, p.beta1, p.alpha2, p.beta2, p.alpha_o] {
            assert!(m.value().data().iter().all(|&v| v == 0.0));
        }
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let (out, chosen) = texmod_forward(&block, &tape, &fs, &mut r).unwrap();
        let expected = instance_normalize(fs[chosen], INSTANCE_NORM_EPS).unwrap();
        assert!(out.value().max_abs_diff(&expected.value()) < 1e-6);
    }

    #[test]
    fn scalar_first_stage_example() {
        // alpha1 = 0.5, beta1 = 0.5, alpha2 = 2.0 -> alpha_o = 3.5
        let tape = Tape::new();
        let c = |v: f32| tape.constant(Tensor::full(&[1, 1, 2, 2], v));
        let alpha_o = one_plus_mul_add(c(2.0), c(0.5), c(0.5)).unwrap();
        assert!(alpha_o.value().data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn second_stage_examples() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let params = ModulationParams {
            alpha1: zero,
            beta1: zero,
            alpha2: zero,
            beta2: zero,
            alpha_o: zero,
        };
        let out = second_stage_inject(f, &params, 0.0).unwrap();
        assert_eq!(out.value().data(), &[-1.0, 1.0]);

        let one = tape.constant(Tensor::full(&[1, 1, 1, 2], 1.0));
        let two = tape.constant(Tensor::full(&[1, 1, 1, 2], 2.0));
        let params = ModulationParams {
            beta2: one,
            alpha_o: two,
            ..params
        };
        let out = second_stage_inject(f, &params, 0.0).unwrap();
        // 2v + 2 on v = [-1, 1]
        assert_eq!(out.value().data(), &[0.0, 4.0]);

        let bad = tape.constant(Tensor::zeros(&[1, 1, 2, 1]));
        let params = ModulationParams {
            beta2: bad,
            ..params
        };
        assert!(matches!(
            second_stage_inject(f, &params, 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_feature_bypasses_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let block = TexModBlock::random("t", 4, &mut rng);
        let fs = feats(&tape, 1, &[1, 4, 4, 4], &mut rng);
        let (out, idx) = texmod_forward(&block, &tape, &fs, &mut rng).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(*out.value(), *fs[0].value());
        assert!(matches!(
            texmod_forward(&block, &tape, &[], &mut rng),
            Err(Error::EmptyEpisode)
        ));
    }

    #[test]
    fn mismatched_and_empty_references_are_rejected() {
        let tape = Tape::new();
        let block = TexModBlock::new("t", 4);
        let a = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(matches!(
            compute_params(&block, &tape, a, &[b]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            compute_params(&block, &tape, a, &[]),
            Err(Error::EmptyEpisode)
        ));
    }

    #[test]
    fn every_reference_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let block = TexModBlock::random("t", 4, &mut rng);
        let fs = feats(&tape, 3, &[1, 4, 4, 4], &mut rng);
        let (out, chosen) = texmod_forward(&block, &tape, &fs, &mut rng).unwrap();
        let loss = out.square().unwrap().mean().unwrap();
        tape.backward(loss).unwrap();
        for (i, f) in fs.iter().enumerate() {
            let g = f.grad().unwrap();
            assert!(
                g.sum_squares() > 0.0,
                "feature {i} (chosen {chosen}) got no gradient"
            );
        }
    }

    #[test]
    fn mean_reduction_divides_reference_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let mut block = TexModBlock::random("t", 2, &mut rng);
        let fs = feats(&tape, 3, &[1, 2, 3, 3], &mut rng);
        let summed = compute_params(&block, &tape, fs[0], &fs[1..]).unwrap();
        block.reduce = RefReduce::Mean;
        let halved = tape.constant(fs[1].add(fs[2]).unwrap().value().map(|v| v / 2.0));
        let meaned = compute_params(&block, &tape, fs[0], &fs[1..]).unwrap();
        let direct = compute_params(&block, &tape, fs[0], &[halved]).unwrap();
        assert!(meaned.alpha2.value().max_abs_diff(&direct.alpha2.value()) < 1e-5);
        assert!(meaned.alpha2.value().max_abs_diff(&summed.alpha2.value()) > 1e-3);
    }
}
