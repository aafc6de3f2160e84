//! Laplacian structure extraction and the structural discriminator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::hinge_losses;
use crate::nn::{global_pool, squeeze_scores, Conv2d, Linear, Module, LEAKY_SLOPE};
use crate::tensor::{conv2d, conv2d_forward, ConvSpec, Padding, Param, Tape, Tensor, Var};

pub const LAPLACIAN_KERNEL: [f32; 9] = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];

/// Depthwise kernel `[C, 1, 3, 3]` repeating the Laplacian per channel.
pub fn laplacian_kernel(channels: usize) -> Tensor {
    let data = LAPLACIAN_KERNEL.repeat(channels);
    Tensor::new(&[channels, 1, 3, 3], data).expect("kernel shape")
}

fn spec(channels: usize) -> ConvSpec {
    ConvSpec::new(1, Padding::SameReplicate).groups(channels)
}

fn check_extent(shape: &[usize]) -> Result<usize> {
    match *shape {
        [_, c, h, w] if h >= 3 && w >= 3 => Ok(c),
        [_, _, _, _] => Err(Error::shape(format!(
            "laplacian needs spatial extent >= 3, got {shape:?}"
        ))),
        _ => Err(Error::shape(format!(
            "laplacian needs [N, C, H, W], got {shape:?}"
        ))),
    }
}

/// Per-channel Laplacian with replicate padding; the kernel is frozen but
/// gradients flow to the image.
pub fn laplacian_filter(image: Var<'_>) -> Result<Var<'_>> {
    let c = check_extent(&image.shape())?;
    let kernel = image.tape().constant(laplacian_kernel(c));
    conv2d(image, kernel, None, spec(c))
}

/// [`laplacian_filter`] on a plain tensor.
pub fn laplacian(image: &Tensor) -> Result<Tensor> {
    let c = check_extent(image.shape())?;
    conv2d_forward(image, &laplacian_kernel(c), None, spec(c))
}

/// Mean squared Laplacian response.
pub fn laplacian_energy(images: &Tensor) -> Result<f64> {
    let lap = laplacian(images)?;
    Ok(lap.sum_squares() / lap.len() as f64)
}

/// Two stride-2 convolutions, global average pooling and a scalar head.
#[derive(Clone, Debug)]
pub struct StructDNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Linear,
}

impl StructDNet {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, widths: [usize; 2], rng: &mut R) -> Self {
        let s2 = ConvSpec::new(2, Padding::SameZero);
        StructDNet {
            conv1: Conv2d::new("structd.conv1", in_channels, widths[0], 3, s2, rng),
            conv2: Conv2d::new("structd.conv2", widths[0], widths[1], 3, s2, rng),
            head: Linear::new("structd.head", widths[1], 1, rng),
        }
    }
}

impl Module for StructDNet {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// One score per sample of a Laplacian representation `[N, C, H, W]`.
pub fn structd_score<'t>(net: &StructDNet, tape: &'t Tape, lap: Var<'t>) -> Result<Var<'t>> {
    lap.value().dims4()?;
    let h = net.conv1.forward(tape, lap)?.leaky_relu(LEAKY_SLOPE)?;
    let h = net.conv2.forward(tape, h)?.leaky_relu(LEAKY_SLOPE)?;
    squeeze_scores(net.head.forward(tape, global_pool(h)?)?)
}

/// `(loss_d, loss_g)` of the structural discriminator.
pub fn structd_losses<'t>(score_real: Var<'t>, score_fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    hinge_losses(score_real, score_fake)
}
