//! Generator (encoder, TexMod, decoder), discriminator with auxiliary
//! classifier and feature tap, the combined objective, Adam with a
//! linear-decay schedule, and one alternating training step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_episode, DatasetIndex, Episode, Split};
use crate::error::{Error, Result};
use crate::frequency::{fred_score, FreDNet};
use crate::losses::{hinge_d, hinge_g};
use crate::modulation::{texmod_forward, RefReduce, TexModBlock};
use crate::nn::{global_pool, squeeze_scores, Conv2d, Linear, Module, LEAKY_SLOPE};
use crate::structural::{laplacian_filter, structd_score, StructDNet};
use crate::tensor::{
    concat, cross_entropy, instance_normalize, narrow, upsample_nearest, ConvSpec, Padding, Param,
    Tape, Tensor, Var, INSTANCE_NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Architecture, objective weights, ablation switches and optimizer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Output channels of the stride-2 encoder convolutions; the decoder
    /// mirrors them.
    pub enc_widths: Vec<usize>,
    pub d_widths: Vec<usize>,
    /// Leading discriminator layers that use stride 2.
    pub d_downsample: usize,
    pub structd_widths: [usize; 2],
    pub fred_width: usize,
    pub fred_pool: usize,
    /// Number of seen categories (classifier outputs).
    pub n_classes: usize,
    /// Backbone layer whose activation feeds the frequency discriminator.
    pub tap_layer: usize,
    pub lambda_str: f32,
    pub lambda_fre: f32,
    pub use_texmod: bool,
    pub use_structd: bool,
    pub use_fred: bool,
    pub ref_reduce: RefReduce,
    pub base_lr: f32,
    pub total_iters: u64,
    pub batch_size: usize,
    pub k: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            image_channels: 3,
            image_size: 32,
            enc_widths: vec![32, 64, 128],
            d_widths: vec![32, 64, 128, 256, 256],
            d_downsample: 3,
            structd_widths: [32, 64],
            fred_width: 16,
            fred_pool: 2,
            n_classes: 3,
            tap_layer: 1,
            lambda_str: 1.0,
            lambda_fre: 1.0,
            use_texmod: true,
            use_structd: true,
            use_fred: true,
            ref_reduce: RefReduce::Sum,
            base_lr: 1e-4,
            total_iters: 100_000,
            batch_size: 8,
            k: 3,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, l) in [
            ("lambda_str", self.lambda_str),
            ("lambda_fre", self.lambda_fre),
        ] {
            if !(l.is_finite() && l >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {l}"));
            }
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.total_iters == 0 {
            return bad("total_iters must be > 0".into());
        }
        if self.batch_size == 0 || self.n_classes == 0 {
            return bad("batch_size and n_classes must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!(
                "base_lr must be finite and >= 0, got {}",
                self.base_lr
            ));
        }
        if self.enc_widths.is_empty() || self.d_widths.is_empty() {
            return bad("encoder and discriminator need at least one layer".into());
        }
        if self.image_size % (1 << self.enc_widths.len()) != 0 {
            return bad(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                self.enc_widths.len()
            ));
        }
        if self.tap_layer >= self.d_widths.len() || self.d_downsample > self.d_widths.len() {
            return bad(format!(
                "tap_layer {} / d_downsample {} out of range for {} layers",
                self.tap_layer,
                self.d_downsample,
                self.d_widths.len()
            ));
        }
        let tap_extent = self.image_size >> self.d_downsample.min(self.tap_layer + 1);
        if tap_extent < 2 || tap_extent % 2 != 0 {
            return bad(format!(
                "tap layer extent {tap_extent} must be even and >= 2"
            ));
        }
        if self.image_size < 3 {
            return bad("image_size must be >= 3".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Networks

#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub encoder: Vec<Conv2d>,
    pub texmod: TexModBlock,
    pub decoder: Vec<Conv2d>,
    pub use_texmod: bool,
}

impl GeneratorNet {
    pub fn new<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Self {
        let down = ConvSpec::new(2, Padding::SameZero);
        let same = ConvSpec::new(1, Padding::SameZero);
        let mut cin = cfg.image_channels;
        let mut encoder = Vec::new();
        for (i, &w) in cfg.enc_widths.iter().enumerate() {
            encoder.push(Conv2d::new(&format!("gen.enc{i}"), cin, w, 3, down, rng));
            cin = w;
        }
        let mut texmod = TexModBlock::new("gen.texmod", cin);
        texmod.reduce = cfg.ref_reduce;
        let outs: Vec<usize> = cfg
            .enc_widths
            .iter()
            .rev()
            .skip(1)
            .copied()
            .chain([cfg.image_channels])
            .collect();
        let mut decoder = Vec::new();
        for (i, &w) in outs.iter().enumerate() {
            decoder.push(Conv2d::new(&format!("gen.dec{i}"), cin, w, 3, same, rng));
            cin = w;
        }
        GeneratorNet {
            encoder,
            texmod,
            decoder,
            use_texmod: cfg.use_texmod,
        }
    }

    pub fn encode<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.encoder
            .iter()
            .try_fold(x, |h, conv| conv.forward(tape, h)?.leaky_relu(LEAKY_SLOPE))
    }

    pub fn decode<'t>(&self, tape: &'t Tape, f: Var<'t>) -> Result<Var<'t>> {
        let last = self.decoder.len() - 1;
        let mut h = f;
        for (i, conv) in self.decoder.iter().enumerate() {
            h = conv.forward(tape, upsample_nearest(h, 2)?)?;
            h = if i == last {
                h.tanh()?
            } else {
                instance_normalize(h, INSTANCE_NORM_EPS)?.leaky_relu(LEAKY_SLOPE)?
            };
        }
        Ok(h)
    }

    /// Fuses the K features `[1, C, h, w]` of one episode. Without TexMod
    /// the features are averaged.
    pub fn fuse<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        feats: &[Var<'t>],
        rng: &mut R,
    ) -> Result<Var<'t>> {
        if self.use_texmod {
            return Ok(texmod_forward(&self.texmod, tape, feats, rng)?.0);
        }
        let (first, rest) = feats.split_first().ok_or(Error::EmptyEpisode)?;
        if rest.is_empty() {
            return Ok(*first);
        }
        rest.iter()
            .try_fold(*first, |acc, f| acc.add(*f))?
            .scale(1.0 / feats.len() as f32)
    }

    /// `images` holds B episodes of K images laid out episode-major
    /// (`[B * K, C, H, W]`); returns one image per episode.
    pub fn forward_batch<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        images: Var<'t>,
        k: usize,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        if k == 0 {
            return Err(Error::EmptyEpisode);
        }
        let n = images.value().dims4()?.0;
        if n == 0 || n % k != 0 {
            return Err(Error::shape(format!(
                "{n} images do not form episodes of {k}"
            )));
        }
        let enc = self.encode(tape, images)?;
        let mut fused = Vec::with_capacity(n / k);
        for e in 0..n / k {
            let feats = (0..k)
                .map(|j| narrow(enc, 0, e * k + j, 1))
                .collect::<Result<Vec<_>>>()?;
            fused.push(self.fuse(tape, &feats, rng)?);
        }
        self.decode(tape, concat(&fused, 0)?)
    }
}

impl Module for GeneratorNet {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.encoder.iter().flat_map(|c| c.params()).collect();
        p.extend(self.texmod.params());
        p.extend(self.decoder.iter().flat_map(|c| c.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self
            .encoder
            .iter_mut()
            .flat_map(|c| c.params_mut())
            .collect();
        p.extend(self.texmod.params_mut());
        p.extend(self.decoder.iter_mut().flat_map(|c| c.params_mut()));
        p
    }
}

fn stack_episode(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyEpisode)?;
    if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape(format!(
            "episode images differ in shape: {:?} vs {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    Tensor::stack(images)
}

/// One generated image `[1, C, H, W]` from the K images `[C, H, W]` of an
/// episode, on `tape`.
pub fn generator_forward<'t, R: Rng + ?Sized>(
    gen: &GeneratorNet,
    tape: &'t Tape,
    episode_images: &[Tensor],
    rng: &mut R,
) -> Result<Var<'t>> {
    let stacked = stack_episode(episode_images)?;
    gen.forward_batch(tape, tape.constant(stacked), episode_images.len(), rng)
}

/// [`generator_forward`] without gradient tracking, returning `[C, H, W]`.
pub fn generate<R: Rng + ?Sized>(
    gen: &GeneratorNet,
    episode_images: &[Tensor],
    rng: &mut R,
) -> Result<Tensor> {
    let tape = Tape::new();
    tape.set_param_tracking(false);
    let out = generator_forward(gen, &tape, episode_images, rng)?;
    Ok(out.value().index0(0))
}

#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub backbone: Vec<Conv2d>,
    pub adv_head: Linear,
    pub cls_head: Linear,
    pub tap_layer: usize,
}

/// Everything one discriminator pass produces.
#[derive(Clone, Copy, Debug)]
pub struct DOutput<'t> {
    /// `[N]` adversarial scores.
    pub adv: Var<'t>,
    /// `[N, n_classes]` category logits.
    pub logits: Var<'t>,
    /// Activation of the tap layer.
    pub tap: Var<'t>,
}

impl DiscriminatorNet {
    pub fn new<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Self {
        let mut cin = cfg.image_channels;
        let mut backbone = Vec::new();
        for (i, &w) in cfg.d_widths.iter().enumerate() {
            let stride = if i < cfg.d_downsample { 2 } else { 1 };
            backbone.push(Conv2d::new(
                &format!("disc.conv{i}"),
                cin,
                w,
                3,
                ConvSpec::new(stride, Padding::SameZero),
                rng,
            ));
            cin = w;
        }
        DiscriminatorNet {
            backbone,
            adv_head: Linear::new("disc.adv_head", cin, 1, rng),
            cls_head: Linear::new("disc.cls_head", cin, cfg.n_classes, rng),
            tap_layer: cfg.tap_layer,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.cls_head.weight.shape()[0]
    }

    pub fn tap_channels(&self) -> usize {
        self.backbone[self.tap_layer].weight.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<DOutput<'t>> {
        let mut h = x;
        let mut tap = None;
        for (i, conv) in self.backbone.iter().enumerate() {
            h = conv.forward(tape, h)?.leaky_relu(LEAKY_SLOPE)?;
            if i == self.tap_layer {
                tap = Some(h);
            }
        }
        let pooled = global_pool(h)?;
        Ok(DOutput {
            adv: squeeze_scores(self.adv_head.forward(tape, pooled)?)?,
            logits: self.cls_head.forward(tape, pooled)?,
            tap: tap.expect("tap layer inside backbone"),
        })
    }

    /// Tap-layer activation only, stopping the backbone there.
    pub fn tap<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.backbone[..=self.tap_layer]
            .iter()
            .try_fold(x, |h, conv| conv.forward(tape, h)?.leaky_relu(LEAKY_SLOPE))
    }

    /// Spatially averaged tap features `[N, C_tap]` of `images`, no gradients.
    pub fn tap_features(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        tape.set_param_tracking(false);
        let f = global_pool(self.tap(&tape, tape.constant(images.clone()))?)?;
        let v = f.value();
        Ok(v.as_ref().clone())
    }
}

impl Module for DiscriminatorNet {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.backbone.iter().flat_map(|c| c.params()).collect();
        p.extend(self.adv_head.params());
        p.extend(self.cls_head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self
            .backbone
            .iter_mut()
            .flat_map(|c| c.params_mut())
            .collect();
        p.extend(self.adv_head.params_mut());
        p.extend(self.cls_head.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// Objective

/// Hinge adversarial losses `(loss_d, loss_g)` of `d` on real and fake images.
pub fn adversarial_losses<'t>(
    d: &DiscriminatorNet,
    tape: &'t Tape,
    x_real: Var<'t>,
    x_fake: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if x_real.shape() != x_fake.shape() {
        return Err(Error::shape(format!(
            "real {:?} vs fake {:?}",
            x_real.shape(),
            x_fake.shape()
        )));
    }
    let s_real = d.forward(tape, x_real)?.adv;
    let s_fake = d.forward(tape, x_fake)?.adv;
    Ok((hinge_d(s_real, s_fake)?, hinge_g(s_fake)?))
}

/// Mean negative log-probability of `labels` under the classifier head.
/// For generated images the label is the conditioning episode's category.
pub fn classification_losses<'t>(
    d: &DiscriminatorNet,
    tape: &'t Tape,
    x: Var<'t>,
    labels: &[usize],
) -> Result<Var<'t>> {
    cross_entropy(d.forward(tape, x)?.logits, labels)
}

/// Components of one side of the objective. Disabled modules are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub adv: Var<'t>,
    pub cls: Var<'t>,
    pub fre: Option<Var<'t>>,
    pub structural: Option<Var<'t>>,
}

/// `adv + cls + lambda_fre * fre + lambda_str * str`, omitting absent terms.
pub fn combine_losses<'t>(
    parts: &LossParts<'t>,
    lambda_fre: f32,
    lambda_str: f32,
) -> Result<Var<'t>> {
    let mut total = parts.adv.add(parts.cls)?;
    if let Some(fre) = parts.fre {
        total = total.add(fre.scale(lambda_fre)?)?;
    }
    if let Some(s) = parts.structural {
        total = total.add(s.scale(lambda_str)?)?;
    }
    Ok(total)
}

/// `(L_D, L_G)` under the weights of `cfg`.
pub fn total_losses<'t>(
    cfg: &GanConfig,
    d_parts: &LossParts<'t>,
    g_parts: &LossParts<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        combine_losses(d_parts, cfg.lambda_fre, cfg.lambda_str)?,
        combine_losses(g_parts, cfg.lambda_fre, cfg.lambda_str)?,
    ))
}

/// Constant `base_lr` for the first half, then linear decay to 0 at `total`.
pub fn lr_schedule(iteration: u64, total: u64, base_lr: f32) -> Result<f32> {
    if iteration > total {
        return Err(Error::Range {
            what: "iteration",
            value: iteration,
            max: total,
        });
    }
    if 2 * iteration < total {
        return Ok(base_lr);
    }
    let half = total as f64 / 2.0;
    let remaining = (total - iteration) as f64;
    Ok((base_lr as f64 * remaining / (total as f64 - half)) as f32)
}

// ---------------------------------------------------------------------------
// Optimizer

/// First and second moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            skipped: 0,
        }
    }
}

/// Bias-corrected Adam update from each parameter's `grad`. Non-finite
/// gradients skip the whole step, bump `skipped` and return a numeric error
/// naming `group`.
pub fn adam_step(
    params: &mut [&mut Param],
    state: &mut AdamState,
    lr: f32,
    cfg: &AdamConfig,
    group: &str,
) -> Result<()> {
    if params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(format!(
            "{} parameters vs {} moment tensors",
            params.len(),
            state.m.len()
        )));
    }
    for ((p, m), v) in params.iter().zip(&state.m).zip(&state.v) {
        if p.shape() != m.shape() || p.shape() != v.shape() || p.grad.shape() != p.shape() {
            return Err(Error::shape(format!(
                "moment shape mismatch for {}",
                p.name()
            )));
        }
    }
    if params.iter().any(|p| !p.grad.is_finite()) {
        state.skipped += 1;
        return Err(Error::numeric(format!("{group} gradient")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = (1.0 - (cfg.beta1 as f64).powi(t)) as f32;
    let bc2 = (1.0 - (cfg.beta2 as f64).powi(t)) as f32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Param { value, grad, .. } = &mut **p;
        let iter = value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((w, &g), (m, v)) in iter {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn grad_norm(params: &[&mut Param]) -> f64 {
    params
        .iter()
        .map(|p| p.grad.sum_squares())
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Training state and step

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: GanConfig,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub structd: StructDNet,
    pub fred: FreDNet,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    pub iteration: u64,
    /// Drives episode sampling and the TexMod feature choice.
    pub rng: ChaCha8Rng,
}

/// Loss values and diagnostics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Iteration index the step ran at (before increment).
    pub iteration: u64,
    pub lr: f32,
    pub d_adv: f32,
    pub d_cls: f32,
    pub d_fre: Option<f32>,
    pub d_str: Option<f32>,
    pub d_total: f32,
    pub g_adv: f32,
    pub g_cls: f32,
    pub g_fre: Option<f32>,
    pub g_str: Option<f32>,
    pub g_total: f32,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    pub skipped: u64,
}

impl StepReport {
    /// `key=value` pairs in log order; disabled terms are absent.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let mut f = vec![
            ("iter", (self.iteration + 1).to_string()),
            ("lr", self.lr.to_string()),
        ];
        let mut side = |prefix: [&'static str; 5],
                        adv: f32,
                        cls: f32,
                        fre: Option<f32>,
                        st: Option<f32>,
                        total: f32| {
            f.push((prefix[0], adv.to_string()));
            f.push((prefix[1], cls.to_string()));
            if let Some(v) = fre {
                f.push((prefix[2], v.to_string()));
            }
            if let Some(v) = st {
                f.push((prefix[3], v.to_string()));
            }
            f.push((prefix[4], total.to_string()));
        };
        side(
            ["d_adv", "d_cls", "d_fre", "d_str", "d_total"],
            self.d_adv,
            self.d_cls,
            self.d_fre,
            self.d_str,
            self.d_total,
        );
        side(
            ["g_adv", "g_cls", "g_fre", "g_str", "g_total"],
            self.g_adv,
            self.g_cls,
            self.g_fre,
            self.g_str,
            self.g_total,
        );
        f.push(("d_grad_norm", format!("{:.6e}", self.d_grad_norm)));
        f.push(("g_grad_norm", format!("{:.6e}", self.g_grad_norm)));
        f.push(("skipped", self.skipped.to_string()));
        f
    }

    pub fn log_line(&self) -> String {
        self.fields()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn checked(v: Var<'_>, term: &str) -> Result<f32> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(term))
    }
}

fn opt_checked(v: Option<Var<'_>>, term: &str) -> Result<Option<f32>> {
    v.map(|v| checked(v, term)).transpose()
}

impl TrainState {
    /// Fresh networks and optimizer state. Weights come from a stream of
    /// `seed` separate from the sampling stream.
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = GeneratorNet::new(&config, &mut init);
        let discriminator = DiscriminatorNet::new(&config, &mut init);
        let structd = StructDNet::new(config.image_channels, config.structd_widths, &mut init);
        let fred = FreDNet::new(
            3 * discriminator.tap_channels(),
            config.fred_width,
            config.fred_pool,
            &mut init,
        );
        let g_opt = AdamState::new(&generator.params());
        let mut state = TrainState {
            config,
            generator,
            discriminator,
            structd,
            fred,
            g_opt,
            d_opt: AdamState {
                m: vec![],
                v: vec![],
                step: 0,
                skipped: 0,
            },
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        state.d_opt = AdamState::new(&state.d_params());
        state.rng = ChaCha8Rng::seed_from_u64(state.config.seed);
        state.rng.set_stream(1);
        Ok(state)
    }

    /// Discriminator group: main discriminator, StructD and FreD.
    pub fn d_params(&self) -> Vec<&Param> {
        let mut p = self.discriminator.params();
        p.extend(self.structd.params());
        p.extend(self.fred.params());
        p
    }

    /// Every parameter in checkpoint order: generator, then the
    /// discriminator group.
    pub fn all_params(&self) -> Vec<&Param> {
        let mut p = self.generator.params();
        p.extend(self.d_params());
        p
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.generator.params_mut();
        p.extend(self.discriminator.params_mut());
        p.extend(self.structd.params_mut());
        p.extend(self.fred.params_mut());
        p
    }

    /// `batch_size` episodes of `k` images from `split`, drawn from the
    /// state's stream.
    pub fn sample_batch(&mut self, index: &DatasetIndex, split: Split) -> Result<Vec<Episode>> {
        (0..self.config.batch_size)
            .map(|_| sample_episode(index, split, self.config.k, &mut self.rng))
            .collect()
    }

    /// One discriminator update on detached fakes, then one generator update
    /// against the just-updated, frozen discriminators. The first image of
    /// each episode is the real sample.
    pub fn train_step(&mut self, batch: &[Episode]) -> Result<StepReport> {
        let first = batch.first().ok_or(Error::EmptyBatch)?;
        let k = first.images.len();
        if k == 0 {
            return Err(Error::EmptyEpisode);
        }
        if let Some(e) = batch.iter().find(|e| e.images.len() != k) {
            return Err(Error::shape(format!(
                "episode of {} images in a batch of {k}-shot episodes",
                e.images.len()
            )));
        }
        let lr = lr_schedule(self.iteration, self.config.total_iters, self.config.base_lr)?;
        let cfg = &self.config;
        let (use_fre, use_str) = (cfg.use_fred, cfg.use_structd);
        let (l_fre, l_str) = (cfg.lambda_fre, cfg.lambda_str);

        let all: Vec<Tensor> = batch
            .iter()
            .flat_map(|e| e.images.iter().cloned())
            .collect();
        let cond = stack_episode(&all)?;
        let reals = Tensor::stack(
            &batch
                .iter()
                .map(|e| e.images[0].clone())
                .collect::<Vec<_>>(),
        )?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();

        let tape = Tape::new();
        let fake = self
            .generator
            .forward_batch(&tape, tape.constant(cond), k, &mut self.rng)?;
        let real = tape.constant(reals);

        // discriminator step
        let fake_d = fake.detach();
        let (d, sd, fd) = (&self.discriminator, &self.structd, &self.fred);
        let out_r = d.forward(&tape, real)?;
        let out_f = d.forward(&tape, fake_d)?;
        let d_parts = LossParts {
            adv: hinge_d(out_r.adv, out_f.adv)?,
            cls: cross_entropy(out_r.logits, &labels)?,
            fre: use_fre
                .then(|| {
                    hinge_d(
                        fred_score(fd, &tape, out_r.tap)?,
                        fred_score(fd, &tape, out_f.tap)?,
                    )
                })
                .transpose()?,
            structural: use_str
                .then(|| {
                    hinge_d(
                        structd_score(sd, &tape, laplacian_filter(real)?)?,
                        structd_score(sd, &tape, laplacian_filter(fake_d)?)?,
                    )
                })
                .transpose()?,
        };
        let d_total = combine_losses(&d_parts, l_fre, l_str)?;
        let d_vals = (
            checked(d_parts.adv, "d_adv")?,
            checked(d_parts.cls, "d_cls")?,
            opt_checked(d_parts.fre, "d_fre")?,
            opt_checked(d_parts.structural, "d_str")?,
            checked(d_total, "d_total")?,
        );
        tape.backward(d_total)?;
        let mut d_group: Vec<&mut Param> = self
            .discriminator
            .params_mut()
            .into_iter()
            .chain(self.structd.params_mut())
            .chain(self.fred.params_mut())
            .collect();
        d_group.iter_mut().for_each(|p| {
            p.zero_grad();
            p.pull_grad(&tape);
        });
        let d_grad_norm = grad_norm(&d_group);
        let adam = self.config.adam;
        let mut skipped = 0;
        match adam_step(&mut d_group, &mut self.d_opt, lr, &adam, "discriminator") {
            Ok(()) => {}
            Err(Error::Numeric { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }

        // generator step against frozen discriminators
        tape.set_param_tracking(false);
        let (d, sd, fd) = (&self.discriminator, &self.structd, &self.fred);
        let out = d.forward(&tape, fake)?;
        let g_parts = LossParts {
            adv: hinge_g(out.adv)?,
            cls: cross_entropy(out.logits, &labels)?,
            fre: use_fre
                .then(|| hinge_g(fred_score(fd, &tape, out.tap)?))
                .transpose()?,
            structural: use_str
                .then(|| hinge_g(structd_score(sd, &tape, laplacian_filter(fake)?)?))
                .transpose()?,
        };
        let g_total = combine_losses(&g_parts, l_fre, l_str)?;
        let g_vals = (
            checked(g_parts.adv, "g_adv")?,
            checked(g_parts.cls, "g_cls")?,
            opt_checked(g_parts.fre, "g_fre")?,
            opt_checked(g_parts.structural, "g_str")?,
            checked(g_total, "g_total")?,
        );
        tape.backward(g_total)?;
        let mut g_group = self.generator.params_mut();
        g_group.iter_mut().for_each(|p| {
            p.zero_grad();
            p.pull_grad(&tape);
        });
        let g_grad_norm = grad_norm(&g_group);
        match adam_step(&mut g_group, &mut self.g_opt, lr, &adam, "generator") {
            Ok(()) => {}
            Err(Error::Numeric { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }

        let report = StepReport {
            iteration: self.iteration,
            lr,
            d_adv: d_vals.0,
            d_cls: d_vals.1,
            d_fre: d_vals.2,
            d_str: d_vals.3,
            d_total: d_vals.4,
            g_adv: g_vals.0,
            g_cls: g_vals.1,
            g_fre: g_vals.2,
            g_str: g_vals.3,
            g_total: g_vals.4,
            d_grad_norm,
            g_grad_norm,
            skipped,
        };
        self.iteration += 1;
        Ok(report)
    }
}

/// Order-sensitive checksum of parameter values.
pub fn params_checksum(params: &[&Param]) -> u64 {
    params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
        p.value.data().iter().fold(h, |h, v| {
            (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> GanConfig {
        GanConfig {
            image_size: 16,
            enc_widths: vec![8, 16],
            d_widths: vec![8, 16, 16],
            d_downsample: 2,
            structd_widths: [4, 4],
            fred_width: 4,
            n_classes: 2,
            batch_size: 2,
            k: 3,
            total_iters: 20,
            base_lr: 1e-3,
            seed: 3,
            ..GanConfig::default()
        }
    }

    fn episodes(cfg: &GanConfig, rng: &mut ChaCha8Rng) -> Vec<Episode> {
        (0..cfg.batch_size)
            .map(|e| Episode {
                images: (0..cfg.k)
                    .map(|_| Tensor::uniform(&[3, cfg.image_size, cfg.image_size], -1.0, 1.0, rng))
                    .collect(),
                category: e % cfg.n_classes,
                label: e % cfg.n_classes,
                split: Split::Seen,
                files: (0..cfg.k).collect(),
            })
            .collect()
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(25_000, 100_000, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_schedule(49_999, 100_000, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_schedule(50_000, 100_000, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_schedule(75_000, 100_000, 1e-4).unwrap(), 5e-5);
        assert_eq!(lr_schedule(100_000, 100_000, 1e-4).unwrap(), 0.0);
        assert!(matches!(
            lr_schedule(7, 6, 1e-4),
            Err(Error::Range {
                value: 7,
                max: 6,
                ..
            })
        ));
        assert_eq!(lr_schedule(2, 5, 1.0).unwrap(), 1.0);
        assert!((lr_schedule(3, 5, 1.0).unwrap() - 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let mut p = Param::new("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &mut st, 0.1, &cfg, "g").unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0, 0.5]);

        p.grad = Tensor::new(&[3], vec![3.0, -0.01, 0.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut st, 0.1, &cfg, "g").unwrap();
        let d: Vec<f32> = p
            .value
            .data()
            .iter()
            .zip([1.0, -2.0, 0.5])
            .map(|(a, b)| a - b)
            .collect();
        assert!(
            (d[0] + 0.1).abs() < 1e-5 && (d[1] - 0.1).abs() < 1e-4 && d[2] == 0.0,
            "{d:?}"
        );

        p.grad.data_mut()[1] = f32::NAN;
        let before = p.value.clone();
        assert!(matches!(
            adam_step(&mut [&mut p], &mut st, 0.1, &cfg, "g"),
            Err(Error::Numeric { .. })
        ));
        assert_eq!((st.skipped, st.step), (1, 1));
        assert_eq!(p.value, before);
    }

    #[test]
    fn combine_is_linear_and_omits_disabled_terms() {
        let tape = Tape::new();
        let c = |v: f32| tape.constant(Tensor::scalar(v));
        let parts = LossParts {
            adv: c(1.0),
            cls: c(2.0),
            fre: Some(c(3.0)),
            structural: Some(c(4.0)),
        };
        assert_eq!(combine_losses(&parts, 1.0, 1.0).unwrap().item(), 10.0);
        let muted = LossParts {
            structural: None,
            ..parts
        };
        assert_eq!(
            combine_losses(&muted, 0.7, 9.0).unwrap().item(),
            (1.0f32 + 2.0) + 0.7 * 3.0
        );
        let extra = |l: f32| combine_losses(&parts, 0.5 * l, 0.25 * l).unwrap().item() - 3.0;
        assert!((extra(4.0) - 4.0 * extra(1.0)).abs() < 1e-5);
    }

    #[test]
    fn generator_shapes_and_one_shot_bypass() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gen = GeneratorNet::new(&cfg, &mut rng);
        gen.texmod = TexModBlock::random("gen.texmod", 16, &mut rng);
        let img = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let out = generator_forward(&gen, &tape, &[img.clone()], &mut rng).unwrap();
        assert_eq!(out.shape(), vec![1, 3, 16, 16]);
        let plain = gen
            .decode(
                &tape,
                gen.encode(
                    &tape,
                    tape.constant(img.clone().reshape(&[1, 3, 16, 16]).unwrap()),
                )
                .unwrap(),
            )
            .unwrap();
        assert_eq!(*out.value(), *plain.value());
        assert!(out.value().data().iter().all(|v| v.abs() <= 1.0));

        let three = vec![img.clone(), img.map(|v| -v), img.map(|v| 0.5 * v)];
        let a = generate(&gen, &three, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = generate(&gen, &three, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.shape(), &[3, 16, 16]);
        assert_eq!(a, b);
        assert!(matches!(
            generate(&gen, &[], &mut rng),
            Err(Error::EmptyEpisode)
        ));
        let odd = vec![img.clone(), Tensor::zeros(&[3, 8, 8])];
        assert!(matches!(
            generate(&gen, &odd, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn discriminator_outputs() {
        let cfg = tiny_config();
        let d = DiscriminatorNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3, 16, 16]));
        let out = d.forward(&tape, x).unwrap();
        assert_eq!(out.adv.shape(), vec![4]);
        assert_eq!(out.logits.shape(), vec![4, cfg.n_classes]);
        assert_eq!(out.tap.shape(), vec![4, 16, 4, 4]);
        assert_eq!(d.tap_features(&x.value()).unwrap().shape(), &[4, 16]);
        let (ld, lg) = adversarial_losses(&d, &tape, x, x).unwrap();
        assert!(ld.item() >= 0.0 && lg.item().is_finite());
        assert!(matches!(
            classification_losses(&d, &tape, x, &[0, 1, 2, 0]),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn alternating_updates_are_isolated_and_deterministic() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = episodes(&cfg, &mut rng);
        let mut a = TrainState::new(cfg.clone()).unwrap();
        let mut b = TrainState::new(cfg).unwrap();
        let g0 = params_checksum(&a.generator.params());
        let d0 = params_checksum(&a.d_params());
        let ra = a.train_step(&batch).unwrap();
        let rb = b.train_step(&batch).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.iteration, 1);
        assert_ne!(params_checksum(&a.generator.params()), g0);
        assert_ne!(params_checksum(&a.d_params()), d0);
        assert_eq!(
            params_checksum(&a.all_params()),
            params_checksum(&b.all_params())
        );
        assert!(ra.d_fre.is_some() && ra.g_str.is_some());
        assert!(matches!(a.train_step(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn muted_modules_leave_no_trace() {
        let cfg = GanConfig {
            use_structd: false,
            use_fred: false,
            use_texmod: false,
            lambda_fre: 0.0,
            lambda_str: 0.0,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = episodes(&cfg, &mut rng);
        let mut st = TrainState::new(cfg).unwrap();
        let sd0 = params_checksum(&st.structd.params());
        let fd0 = params_checksum(&st.fred.params());
        let tm0 = params_checksum(&st.generator.texmod.params());
        let r = st.train_step(&batch).unwrap();
        assert_eq!(r.d_total, r.d_adv + r.d_cls);
        assert_eq!(r.g_total, r.g_adv + r.g_cls);
        assert!(r.d_fre.is_none() && r.d_str.is_none());
        assert!(!r.log_line().contains("str") && !r.log_line().contains("fre"));
        assert_eq!(params_checksum(&st.structd.params()), sd0);
        assert_eq!(params_checksum(&st.fred.params()), fd0);
        assert_eq!(params_checksum(&st.generator.texmod.params()), tm0);
    }

    #[test]
    fn every_generator_parameter_gets_gradient() {
        let cfg = tiny_config();
        let mut state = TrainState::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = state.generator.params().len();
        let mut touched = vec![false; n];
        for _ in 0..10 {
            let batch = episodes(&cfg, &mut rng);
            state.train_step(&batch).unwrap();
            for (t, p) in touched.iter_mut().zip(state.generator.params()) {
                *t |= p.grad.sum_squares() > 0.0;
            }
        }
        let names: Vec<&str> = state.generator.params().iter().map(|p| p.name()).collect();
        let missing: Vec<_> = names.iter().zip(&touched).filter(|(_, &t)| !t).collect();
        assert!(missing.is_empty(), "{missing:?}");
    }

    #[test]
    fn config_validation() {
        assert!(GanConfig::default().validate().is_ok());
        for bad in [
            GanConfig {
                lambda_str: -1.0,
                ..GanConfig::default()
            },
            GanConfig {
                k: 0,
                ..GanConfig::default()
            },
            GanConfig {
                total_iters: 0,
                ..GanConfig::default()
            },
            GanConfig {
                tap_layer: 5,
                ..GanConfig::default()
            },
            GanConfig {
                image_size: 20,
                ..GanConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn structd_is_lightweight() {
        let st = TrainState::new(GanConfig::default()).unwrap();
        let (s, d) = (st.structd.param_count(), st.discriminator.param_count());
        assert!((s as f64) < 0.05 * d as f64, "{s} vs {d}");
    }
}
