//! Learnable layers built from tensor ops.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{adaptive_avg_pool, conv2d, linear, ConvSpec, Param, Tape, Tensor, Var};

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Anything holding parameters. Order of `params` is stable and defines
/// checkpoint and optimizer layout.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn pull_grads(&mut self, tape: &Tape) {
        self.params_mut()
            .into_iter()
            .for_each(|p| p.pull_grad(tape));
    }
}

/// Kaiming-style normal init for leaky-ReLU stacks.
fn init_std(fan_in: usize) -> f32 {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    gain / (fan_in as f32).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin / spec.groups * kernel * kernel;
        let shape = [cout, cin / spec.groups, kernel, kernel];
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&shape, init_std(fan_in), rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            spec,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(name: &str, cin: usize, cout: usize, kernel: usize, spec: ConvSpec) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::zeros(&[cout, cin / spec.groups, kernel, kernel]),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            spec,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        conv2d(
            x,
            tape.param(&self.weight),
            Some(tape.param(&self.bias)),
            self.spec,
        )
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f32).sqrt();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&[out, fan_in], std, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        linear(x, tape.param(&self.weight), Some(tape.param(&self.bias)))
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `[N, C, H, W] -> [N, C]` by global average pooling.
pub fn global_pool(x: Var<'_>) -> Result<Var<'_>> {
    let (n, c, _, _) = x.value().dims4()?;
    adaptive_avg_pool(x, 1, 1)?.reshape(&[n, c])
}

/// `[N, C, H, W] -> [N, C * H * W]`.
pub fn flatten(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let n = shape.first().copied().unwrap_or(1);
    let rest = shape.iter().skip(1).product();
    x.reshape(&[n, rest])
}

/// `[N, 1] -> [N]`.
pub fn squeeze_scores(x: Var<'_>) -> Result<Var<'_>> {
    let n = x.shape()[0];
    x.reshape(&[n])
}
