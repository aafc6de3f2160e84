//! Single-level orthonormal 2-D Haar transform and the frequency
//! discriminator that scores high-frequency bands of discriminator features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::hinge_losses;
use crate::nn::{flatten, squeeze_scores, Conv2d, Linear, Module, LEAKY_SLOPE};
use crate::tensor::{
    adaptive_avg_pool, concat, narrow, Backward, ConvSpec, Padding, Param, Tape, Tensor, Var,
};

/// Orthonormal Haar normalization: each band coefficient is a 2x2 block
/// combination divided by 2.
pub(crate) const HAAR_SCALE: f32 = 0.5;

/// Approximation and detail bands, each `[N, C, H/2, W/2]`.
#[derive(Clone, Copy, Debug)]
pub struct WaveletBands<'t> {
    pub ll: Var<'t>,
    pub lh: Var<'t>,
    pub hl: Var<'t>,
    pub hh: Var<'t>,
}

/// Packs `[N,C,H,W]` into `[N,4C,H/2,W/2]` with channel blocks ll, lh, hl, hh.
fn dwt_packed(x: &Tensor, scale: f32) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("4-d");
    let (bh, bw) = (h / 2, w / 2);
    let mut out = vec![0.0f32; x.len()];
    let plane = bh * bw;
    for s in 0..n {
        for ch in 0..c {
            let src = &x.data()[(s * c + ch) * h * w..][..h * w];
            let band = |b: usize| ((s * 4 + b) * c + ch) * plane;
            for i in 0..bh {
                for j in 0..bw {
                    let a = src[2 * i * w + 2 * j];
                    let b = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    let k = i * bw + j;
                    out[band(0) + k] = (a + b + cc + d) * scale;
                    out[band(1) + k] = (a - b + cc - d) * scale;
                    out[band(2) + k] = (a + b - cc - d) * scale;
                    out[band(3) + k] = (a - b - cc + d) * scale;
                }
            }
        }
    }
    Tensor::new(&[n, 4 * c, bh, bw], out).expect("shape")
}

/// Inverse of [`dwt_packed`] (also its adjoint, the transform being orthonormal).
fn idwt_packed(bands: &Tensor, scale: f32) -> Tensor {
    let (n, c4, bh, bw) = bands.dims4().expect("4-d");
    let c = c4 / 4;
    let (h, w) = (bh * 2, bw * 2);
    let plane = bh * bw;
    let mut out = vec![0.0f32; bands.len()];
    for s in 0..n {
        for ch in 0..c {
            let dst = &mut out[(s * c + ch) * h * w..][..h * w];
            let band = |b: usize| &bands.data()[((s * 4 + b) * c + ch) * plane..][..plane];
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            for i in 0..bh {
                for j in 0..bw {
                    let k = i * bw + j;
                    dst[2 * i * w + 2 * j] = (ll[k] + lh[k] + hl[k] + hh[k]) * scale;
                    dst[2 * i * w + 2 * j + 1] = (ll[k] - lh[k] + hl[k] - hh[k]) * scale;
                    dst[(2 * i + 1) * w + 2 * j] = (ll[k] + lh[k] - hl[k] - hh[k]) * scale;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (ll[k] - lh[k] - hl[k] + hh[k]) * scale;
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).expect("shape")
}

struct HaarForward {
    scale: f32,
}

impl Backward for HaarForward {
    fn name(&self) -> &'static str {
        "haar_dwt"
    }

    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(idwt_packed(g, self.scale))]
    }
}

struct HaarInverse {
    scale: f32,
}

impl Backward for HaarInverse {
    fn name(&self) -> &'static str {
        "haar_idwt"
    }

    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(dwt_packed(g, self.scale))]
    }
}

pub(crate) fn haar_dwt_scaled(input: Var<'_>, scale: f32) -> Result<WaveletBands<'_>> {
    let x = input.value();
    let (_, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "haar_dwt needs even positive extents, got {h}x{w}"
        )));
    }
    let packed = input
        .tape()
        .record(dwt_packed(&x, scale), &[input], HaarForward { scale })?;
    Ok(WaveletBands {
        ll: narrow(packed, 1, 0, c)?,
        lh: narrow(packed, 1, c, c)?,
        hl: narrow(packed, 1, 2 * c, c)?,
        hh: narrow(packed, 1, 3 * c, c)?,
    })
}

pub(crate) fn haar_idwt_scaled<'t>(bands: &WaveletBands<'t>, scale: f32) -> Result<Var<'t>> {
    let shape = bands.ll.shape();
    for b in [bands.lh, bands.hl, bands.hh] {
        if b.shape() != shape {
            return Err(Error::shape(format!(
                "wavelet bands disagree: {:?} vs {shape:?}",
                b.shape()
            )));
        }
    }
    let packed = concat(&[bands.ll, bands.lh, bands.hl, bands.hh], 1)?;
    let value = idwt_packed(&packed.value(), scale);
    packed
        .tape()
        .record(value, &[packed], HaarInverse { scale })
}

/// Orthonormal single-level Haar decomposition over 2x2 blocks
/// `[[a, b], [c, d]]`: `ll = (a+b+c+d)/2`, `lh = (a-b+c-d)/2`,
/// `hl = (a+b-c-d)/2`, `hh = (a-b-c+d)/2`.
pub fn haar_dwt(input: Var<'_>) -> Result<WaveletBands<'_>> {
    haar_dwt_scaled(input, HAAR_SCALE)
}

/// Exact inverse of [`haar_dwt`].
pub fn haar_idwt<'t>(bands: &WaveletBands<'t>) -> Result<Var<'t>> {
    haar_idwt_scaled(bands, HAAR_SCALE)
}

/// Detail bands concatenated along channels: `[N, 3C, H/2, W/2]`.
pub fn high_freq<'t>(bands: &WaveletBands<'t>) -> Result<Var<'t>> {
    concat(&[bands.lh, bands.hl, bands.hh], 1)
}

/// Mean squared value of the high-frequency bands of `images`.
pub fn high_freq_energy(images: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let hf = high_freq(&haar_dwt(tape.constant(images.clone()))?)?.value();
    Ok(hf.sum_squares() / hf.len() as f64)
}

/// Adaptive average pool, one convolution, and a scalar head.
#[derive(Clone, Debug)]
pub struct FreDNet {
    pub pool: usize,
    pub conv: Conv2d,
    pub head: Linear,
}

impl FreDNet {
    /// `in_channels` is the channel count of the high-frequency tensor
    /// (three times the tapped feature channels).
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        width: usize,
        pool: usize,
        rng: &mut R,
    ) -> Self {
        FreDNet {
            pool,
            conv: Conv2d::new(
                "fred.conv",
                in_channels,
                width,
                3,
                ConvSpec::new(1, Padding::SameZero),
                rng,
            ),
            head: Linear::new("fred.head", width * pool * pool, 1, rng),
        }
    }

    pub fn score<'t>(&self, tape: &'t Tape, high: Var<'t>) -> Result<Var<'t>> {
        let (_, _, h, w) = high.value().dims4()?;
        let p = self.pool.min(h).min(w);
        let pooled = adaptive_avg_pool(high, p, p)?;
        let h = self.conv.forward(tape, pooled)?.leaky_relu(LEAKY_SLOPE)?;
        squeeze_scores(self.head.forward(tape, flatten(h)?)?)
    }
}

impl Module for FreDNet {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Scores of the high-frequency bands of a feature tensor.
pub fn fred_score<'t>(net: &FreDNet, tape: &'t Tape, features: Var<'t>) -> Result<Var<'t>> {
    let bands = haar_dwt(features)?;
    net.score(tape, high_freq(&bands)?)
}

/// `(loss_d, loss_g)` of the frequency discriminator on real and fake
/// feature maps taken from the discriminator's tap layer.
pub fn fred_losses<'t>(
    net: &FreDNet,
    tape: &'t Tape,
    feat_real: Var<'t>,
    feat_fake: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if feat_real.shape() != feat_fake.shape() {
        return Err(Error::shape(format!(
            "real features {:?} vs fake features {:?}",
            feat_real.shape(),
            feat_fake.shape()
        )));
    }
    let s_real = fred_score(net, tape, feat_real)?;
    let s_fake = fred_score(net, tape, feat_fake)?;
    hinge_losses(s_real, s_fake)
}
