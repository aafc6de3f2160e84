//! Fast invariant battery behind the `selftest` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{decode_pnm, encode_pnm};
use crate::error::{Error, Result};
use crate::frequency::{haar_dwt_scaled, haar_idwt_scaled, WaveletBands, HAAR_SCALE};
use crate::gan::{adam_step, lr_schedule, AdamConfig, AdamState};
use crate::losses::{hinge_d, hinge_g};
use crate::modulation::{texmod_forward, TexModBlock};
use crate::nn::{flatten, Conv2d, Linear, LEAKY_SLOPE};
use crate::structural::{laplacian, laplacian_filter, LAPLACIAN_KERNEL};
use crate::tensor::{
    adaptive_avg_pool, concat, conv2d, cross_entropy, gradient_check, instance_normalize, linear,
    narrow, one_plus_mul_add, upsample_nearest, ConvSpec, GradCheck, Padding, Param, Tape, Tensor,
    Var, INSTANCE_NORM_EPS,
};

/// Relative error bound for gradient checks at step [`GRAD_STEP`].
pub const GRAD_TOL: f32 = 1e-3;
pub const GRAD_STEP: f32 = 1e-3;

/// Recognised values of the `fault` argument of [`run_selftest`].
pub const FAULTS: [&str; 1] = ["haar-normalization"];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {}: {}", self.name, self.detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal point with every coordinate at least `margin` away from
/// each of `kinks`, so one-sided differences never straddle one.
fn smooth_point(shape: &[usize], kinks: &[f32], margin: f32, seed: u64) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, &mut rng(seed));
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < margin {
                *v = if *v >= k { k + margin } else { k - margin };
            }
        }
    }
    t
}

/// `sum(w * y)` with fixed weights of scale `1/sqrt(n)`, keeping the scalar
/// near unit size whatever the output shape.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::randn(&shape, 1.0 / (n as f32).sqrt(), &mut rng(seed));
    y.mul(y.tape().constant(w))?.sum()
}

fn grad_check_result(r: Result<GradCheck>) -> Result<(bool, String)> {
    let r = r?;
    Ok((
        r.max_rel_error < GRAD_TOL,
        format!("max_rel_error={:.3e} at {}", r.max_rel_error, r.worst_index),
    ))
}

fn check_grad<F>(name: &str, f: F, point: &Tensor) -> Check
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    Check::from_result(
        format!("gradcheck {name}"),
        grad_check_result(gradient_check(f, point, GRAD_STEP)),
    )
}

fn c<'t>(x: Var<'t>, t: &Tensor) -> Var<'t> {
    x.tape().constant(t.clone())
}

/// Gradient checks for every differentiable operation, one per input slot.
pub fn op_gradient_checks() -> Vec<Check> {
    let s = [2, 3, 4, 4];
    let p = smooth_point(&s, &[], 0.0, 1);
    let q = smooth_point(&s, &[], 0.0, 2);
    let r = smooth_point(&s, &[], 0.0, 3);
    let mut out = vec![
        check_grad("add", |x| project(x.add(c(x, &q))?, 9), &p),
        check_grad("sub lhs", |x| project(x.sub(c(x, &q))?, 9), &p),
        check_grad("sub rhs", |x| project(c(x, &q).sub(x)?, 9), &p),
        check_grad("mul", |x| project(x.mul(c(x, &q))?, 9), &p),
        check_grad("mul self", |x| project(x.mul(x)?, 9), &p),
        check_grad("affine", |x| project(x.affine(1.5, -0.3)?, 9), &p),
        check_grad("scale", |x| project(x.scale(-2.5)?, 9), &p),
        check_grad("neg", |x| project(x.neg()?, 9), &p),
        check_grad(
            "leaky_relu",
            |x| project(x.leaky_relu(LEAKY_SLOPE)?, 9),
            &smooth_point(&s, &[0.0], 0.01, 4),
        ),
        check_grad(
            "relu",
            |x| project(x.relu()?, 9),
            &smooth_point(&s, &[0.0], 0.01, 5),
        ),
        check_grad("tanh", |x| project(x.tanh()?, 9), &p),
        check_grad("square", |x| project(x.square()?, 9), &p),
        check_grad("sum", |x| x.sum()?.scale(0.1), &p),
        check_grad("mean", |x| x.mean(), &p),
        check_grad("reshape", |x| project(x.reshape(&[6, 16])?, 9), &p),
        check_grad(
            "instance_normalize",
            |x| project(instance_normalize(x, INSTANCE_NORM_EPS)?, 9),
            &p,
        ),
        check_grad(
            "adaptive_avg_pool",
            |x| project(adaptive_avg_pool(x, 3, 3)?, 9),
            &smooth_point(&[2, 2, 7, 7], &[], 0.0, 6),
        ),
        check_grad(
            "upsample_nearest",
            |x| project(upsample_nearest(x, 2)?, 9),
            &p,
        ),
        check_grad(
            "concat",
            |x| project(concat(&[c(x, &q), x, c(x, &r)], 1)?, 9),
            &p,
        ),
        check_grad("narrow", |x| project(narrow(x, 1, 1, 2)?, 9), &p),
        check_grad(
            "one_plus_mul_add a",
            |x| project(one_plus_mul_add(x, c(x, &q), c(x, &r))?, 9),
            &p,
        ),
        check_grad(
            "one_plus_mul_add b",
            |x| project(one_plus_mul_add(c(x, &q), x, c(x, &r))?, 9),
            &p,
        ),
        check_grad(
            "one_plus_mul_add c",
            |x| project(one_plus_mul_add(c(x, &q), c(x, &r), x)?, 9),
            &p,
        ),
    ];

    let lin_x = smooth_point(&[4, 6], &[], 0.0, 10);
    let lin_w = smooth_point(&[5, 6], &[], 0.0, 11);
    let lin_b = smooth_point(&[5], &[], 0.0, 12);
    out.push(check_grad(
        "linear input",
        |x| project(linear(x, c(x, &lin_w), Some(c(x, &lin_b)))?, 9),
        &lin_x,
    ));
    out.push(check_grad(
        "linear weight",
        |w| project(linear(c(w, &lin_x), w, Some(c(w, &lin_b)))?, 9),
        &lin_w,
    ));
    out.push(check_grad(
        "linear bias",
        |b| project(linear(c(b, &lin_x), c(b, &lin_w), Some(b))?, 9),
        &lin_b,
    ));

    let logits = smooth_point(&[4, 5], &[], 0.0, 13);
    out.push(check_grad(
        "cross_entropy",
        |x| cross_entropy(x, &[0, 3, 4, 1]),
        &logits,
    ));

    let conv_x = smooth_point(&[2, 4, 6, 6], &[], 0.0, 14);
    let conv_b = smooth_point(&[6], &[], 0.0, 15);
    let cases = [
        ("valid", ConvSpec::new(1, Padding::Valid)),
        ("same-zero", ConvSpec::new(1, Padding::SameZero)),
        ("same-replicate", ConvSpec::new(1, Padding::SameReplicate)),
        ("stride-2", ConvSpec::new(2, Padding::SameZero)),
        (
            "groups-2",
            ConvSpec::new(1, Padding::SameReplicate).groups(2),
        ),
    ];
    for (i, (label, spec)) in cases.into_iter().enumerate() {
        let kernel =
            smooth_point(&[6, 4 / spec.groups, 3, 3], &[], 0.0, 20 + i as u64).map(|v| v * 0.3);
        out.push(check_grad(
            &format!("conv2d {label} input"),
            |x| project(conv2d(x, c(x, &kernel), Some(c(x, &conv_b)), spec)?, 9),
            &conv_x,
        ));
        out.push(check_grad(
            &format!("conv2d {label} kernel"),
            |k| project(conv2d(c(k, &conv_x), k, Some(c(k, &conv_b)), spec)?, 9),
            &kernel,
        ));
        out.push(check_grad(
            &format!("conv2d {label} bias"),
            |b| project(conv2d(c(b, &conv_x), c(b, &kernel), Some(b), spec)?, 9),
            &conv_b,
        ));
    }

    out.push(check_grad(
        "haar_dwt",
        |x| {
            let b = haar_dwt_scaled(x, HAAR_SCALE)?;
            project(concat(&[b.ll, b.lh, b.hl, b.hh], 1)?, 9)
        },
        &p,
    ));
    out.push(check_grad(
        "haar_idwt",
        |x| {
            let bands = WaveletBands {
                ll: narrow(x, 1, 0, 1)?,
                lh: narrow(x, 1, 1, 1)?,
                hl: narrow(x, 1, 2, 1)?,
                hh: narrow(x, 1, 3, 1)?,
            };
            project(haar_idwt_scaled(&bands, HAAR_SCALE)?, 9)
        },
        &smooth_point(&[2, 4, 3, 3], &[], 0.0, 30),
    ));
    out.push(check_grad(
        "laplacian_filter",
        |x| project(laplacian_filter(x)?, 9),
        &p,
    ));

    let scores = smooth_point(&[6], &[-1.0, 1.0], 0.01, 31);
    let other = smooth_point(&[6], &[-1.0, 1.0], 0.01, 32);
    out.push(check_grad(
        "hinge_d real",
        |s| hinge_d(s, c(s, &other)),
        &scores,
    ));
    out.push(check_grad(
        "hinge_d fake",
        |s| hinge_d(c(s, &other), s),
        &scores,
    ));
    out.push(check_grad("hinge_g", hinge_g, &scores));
    out
}

/// TexMod over three `1x4x8x8` features, a one-layer decoder, a linear
/// critic and both hinge terms, differentiated with respect to the features.
pub fn texmod_graph_check() -> Check {
    let mut init = rng(40);
    let mut block = TexModBlock::random("st.texmod", 4, &mut init);
    // Shrink the random maps so modulation stays in a well-conditioned range.
    for conv in [
        &mut block.mod_alpha,
        &mut block.mod_beta,
        &mut block.ref_alpha,
        &mut block.ref_beta,
    ] {
        conv.weight.value = conv.weight.value.map(|v| 0.5 * v);
    }
    let decoder = Conv2d::new(
        "st.dec",
        4,
        3,
        3,
        ConvSpec::new(1, Padding::SameZero),
        &mut init,
    );
    let critic = Linear::new("st.critic", 3 * 16 * 16, 1, &mut init);
    let real_score = Tensor::new(&[1], vec![0.4]).expect("shape");
    let point = smooth_point(&[3, 4, 8, 8], &[], 0.0, 41);
    check_grad(
        "texmod-decoder-hinge",
        |x| {
            let tape = x.tape();
            let feats = (0..3)
                .map(|i| narrow(x, 0, i, 1))
                .collect::<Result<Vec<_>>>()?;
            let (modulated, _) = texmod_forward(&block, tape, &feats, &mut rng(42))?;
            let image = decoder
                .forward(tape, upsample_nearest(modulated, 2)?)?
                .tanh()?;
            let score = critic.forward(tape, flatten(image)?)?.reshape(&[1])?;
            hinge_d(tape.constant(real_score.clone()), score)?.add(hinge_g(score)?)
        },
        &point,
    )
}

fn haar_roundtrip(scale: f32) -> Result<(bool, String)> {
    let x = Tensor::randn(&[4, 3, 16, 16], 1.0, &mut rng(50));
    let tape = Tape::new();
    let bands = haar_dwt_scaled(tape.constant(x.clone()), scale)?;
    let back = haar_idwt_scaled(&bands, HAAR_SCALE)?.value();
    let err = back.max_abs_diff(&x);
    Ok((err <= 1e-5, format!("max_abs_err={err:.3e}")))
}

fn parseval(scale: f32) -> Result<(bool, String)> {
    let x = Tensor::randn(&[4, 3, 16, 16], 1.0, &mut rng(51));
    let tape = Tape::new();
    let b = haar_dwt_scaled(tape.constant(x.clone()), scale)?;
    let bands: f64 = [b.ll, b.lh, b.hl, b.hh]
        .iter()
        .map(|v| v.value().sum_squares())
        .sum();
    let input = x.sum_squares();
    let rel = (bands - input).abs() / input;
    Ok((rel <= 1e-4, format!("relative_energy_err={rel:.3e}")))
}

fn haar_example(scale: f32) -> Result<(bool, String)> {
    let tape = Tape::new();
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    let b = haar_dwt_scaled(tape.constant(x), scale)?;
    let got = [b.ll, b.lh, b.hl, b.hh].map(|v| v.item());
    let want = [5.0, -1.0, -2.0, 0.0];
    let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-6);
    Ok((ok, format!("bands={got:?}")))
}

fn laplacian_identities() -> Result<(bool, String)> {
    let constant = laplacian(&Tensor::full(&[1, 2, 6, 6], 0.7))?;
    let zero = constant.data().iter().all(|&v| v == 0.0);

    let mut impulse = Tensor::zeros(&[1, 1, 5, 5]);
    impulse.data_mut()[12] = 1.0;
    let lap = laplacian(&impulse)?;
    let mut pattern = true;
    for i in 0..5 {
        for j in 0..5 {
            let (di, dj) = (i as isize - 2, j as isize - 2);
            let want = if di.abs() <= 1 && dj.abs() <= 1 {
                // Cross-correlation with the impulse reflects the kernel,
                // which is symmetric.
                LAPLACIAN_KERNEL[((1 - di) * 3 + (1 - dj)) as usize]
            } else {
                0.0
            };
            pattern &= lap.data()[i * 5 + j] == want;
        }
    }

    let ramp = Tensor::from_fn(&[1, 1, 6, 6], |i| 0.25 * (i % 6) as f32 - 0.5);
    let lap = laplacian(&ramp)?;
    let mut ramp_err = 0.0f32;
    for i in 1..5 {
        for j in 1..5 {
            ramp_err = ramp_err.max(lap.data()[i * 6 + j].abs());
        }
    }
    let ok = zero && pattern && ramp_err <= 1e-6;
    Ok((
        ok,
        format!("constant_zero={zero} impulse_pattern={pattern} ramp_interior_err={ramp_err:.1e}"),
    ))
}

fn hinge_table() -> Result<(bool, String)> {
    let tape = Tape::new();
    let v = |x: &[f32]| tape.constant(Tensor::new(&[x.len()], x.to_vec()).expect("shape"));
    let margins = hinge_d(v(&[1.0, 2.0]), v(&[-1.0, -3.0]))?.item();
    let zeros = hinge_d(v(&[0.0, 0.0]), v(&[0.0, 0.0]))?.item();
    let inverted = hinge_d(v(&[-1.0]), v(&[1.0]))?.item();
    let gen = hinge_g(v(&[0.5, -1.5]))?.item();
    let ok = margins == 0.0 && zeros == 2.0 && inverted == 4.0 && gen == 0.5;
    Ok((
        ok,
        format!("margins={margins} zeros={zeros} inverted={inverted} g={gen}"),
    ))
}

fn cross_entropy_uniform() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for classes in [2usize, 3, 10, 100] {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::full(&[4, classes], 0.3));
        let labels: Vec<usize> = (0..4).map(|i| i % classes).collect();
        let loss = cross_entropy(logits, &labels)?.item() as f64;
        worst = worst.max((loss - (classes as f64).ln()).abs());
    }
    Ok((worst <= 1e-5, format!("max_err={worst:.2e}")))
}

fn schedule() -> Result<(bool, String)> {
    let total = 100_000;
    let cases = [
        (0, 1e-4f32),
        (49_999, 1e-4),
        (50_000, 1e-4),
        (75_000, 5e-5),
        (100_000, 0.0),
    ];
    let mut ok = true;
    for (t, want) in cases {
        ok &= lr_schedule(t, total, 1e-4)? == want;
    }
    Ok((ok, "lr(0, T/2, 3T/4, T)".into()))
}

fn adam_first_step() -> Result<(bool, String)> {
    let mut p = Param::new("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5])?);
    p.grad = Tensor::new(&[3], vec![0.5, -0.25, 1e-3])?;
    let mut state = AdamState::new(&[&p]);
    let cfg = AdamConfig::default();
    let lr = 1e-3;
    adam_step(&mut [&mut p], &mut state, lr, &cfg, "selftest")?;
    // After one bias-corrected step, m_hat = g and v_hat = g^2.
    let want = [1.0f64, -2.0, 0.5]
        .iter()
        .zip([0.5f64, -0.25, 1e-3])
        .map(|(w, g)| w - lr as f64 * g / (g.abs() + cfg.eps as f64));
    let err = p
        .value
        .data()
        .iter()
        .zip(want)
        .map(|(&a, b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    Ok((err <= 1e-6 && state.step == 1, format!("max_err={err:.2e}")))
}

fn codec_roundtrip() -> Result<(bool, String)> {
    let mut ok = true;
    for c in [1usize, 3] {
        let img = Tensor::uniform(&[c, 5, 7], -1.0, 1.0, &mut rng(60 + c as u64));
        let once = decode_pnm(&encode_pnm(&img)?)?;
        let twice = decode_pnm(&encode_pnm(&once)?)?;
        ok &= once == twice && img.max_abs_diff(&once) <= 1.0 / 255.0 + 1e-6;
    }
    Ok((ok, "pgm/ppm quantize-decode fixed point".into()))
}

fn modulation_identity() -> Result<(bool, String)> {
    let block = TexModBlock::new("st.zero", 3);
    let tape = Tape::new();
    let mut r = rng(70);
    let feats: Vec<Var<'_>> = (0..3)
        .map(|_| tape.constant(Tensor::randn(&[1, 3, 5, 5], 1.0, &mut r)))
        .collect();
    let (out, chosen) = texmod_forward(&block, &tape, &feats, &mut rng(71))?;
    let want = instance_normalize(feats[chosen], block.eps)?.value();
    let err = out.value().max_abs_diff(&want);
    Ok((err <= 1e-6, format!("max_abs_err={err:.1e}")))
}

/// Runs the battery. `fault` injects a known defect so that the battery can
/// be seen to catch it.
pub fn run_selftest(fault: Option<&str>) -> Result<Vec<Check>> {
    let haar_scale = match fault {
        None => HAAR_SCALE,
        Some("haar-normalization") => 1.0 / std::f32::consts::SQRT_2,
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown fault `{other}`, expected one of {FAULTS:?}"
            )))
        }
    };
    let mut checks = op_gradient_checks();
    checks.push(texmod_graph_check());
    checks.push(Check::from_result(
        "haar roundtrip",
        haar_roundtrip(haar_scale),
    ));
    checks.push(Check::from_result("parseval", parseval(haar_scale)));
    checks.push(Check::from_result(
        "haar 2x2 example",
        haar_example(haar_scale),
    ));
    checks.push(Check::from_result(
        "laplacian identities",
        laplacian_identities(),
    ));
    checks.push(Check::from_result("hinge table", hinge_table()));
    checks.push(Check::from_result(
        "cross-entropy uniform",
        cross_entropy_uniform(),
    ));
    checks.push(Check::from_result("lr schedule", schedule()));
    checks.push(Check::from_result("adam first step", adam_first_step()));
    checks.push(Check::from_result("codec roundtrip", codec_roundtrip()));
    checks.push(Check::from_result(
        "modulation identity",
        modulation_identity(),
    ));
    Ok(checks)
}
