use super::gemm::{gemm, Mat};
use super::{check_same_shape, Backward, Tensor, Var};
use crate::error::{Error, Result};

/// Epsilon used by instance normalization unless a caller overrides it.
pub const INSTANCE_NORM_EPS: f32 = 1e-5;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Elementwise

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp(Binary);

impl Backward for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(
        &self,
        g: &Tensor,
        x: &[&Tensor],
        _: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        match self.0 {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Binary::Mul => vec![
                needs[0].then(|| zip_map(g, x[1], |g, b| g * b)),
                needs[1].then(|| zip_map(g, x[0], |g, a| g * a)),
            ],
        }
    }
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, kind: Binary) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let op = BinaryOp(kind);
    check_same_shape(&av, &bv, op.name())?;
    let out = match kind {
        Binary::Add => zip_map(&av, &bv, |x, y| x + y),
        Binary::Sub => zip_map(&av, &bv, |x, y| x - y),
        Binary::Mul => zip_map(&av, &bv, |x, y| x * y),
    };
    a.tape().record(out, &[a, b], op)
}

struct OnePlusMulAdd;

impl Backward for OnePlusMulAdd {
    fn name(&self) -> &'static str {
        "one_plus_mul_add"
    }

    fn backward(
        &self,
        g: &Tensor,
        x: &[&Tensor],
        _: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| zip_map(g, x[1], |g, b| g * (1.0 + b))),
            needs[1].then(|| zip_map(g, x[0], |g, a| g * a)),
            Some(g.clone()),
        ]
    }
}

/// `(1 + b) * a + c` elementwise, recorded as a single node.
pub fn one_plus_mul_add<'t>(a: Var<'t>, b: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    let (av, bv, cv) = (a.value(), b.value(), c.value());
    check_same_shape(&av, &bv, "one_plus_mul_add")?;
    check_same_shape(&av, &cv, "one_plus_mul_add")?;
    let data = av
        .data()
        .iter()
        .zip(bv.data())
        .zip(cv.data())
        .map(|((&a, &b), &c)| (1.0 + b) * a + c)
        .collect();
    let out = Tensor::new(av.shape(), data)?;
    a.tape().record(out, &[a, b, c], OnePlusMulAdd)
}

struct Affine {
    scale: f32,
}

impl Backward for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = self.scale;
        vec![Some(g.map(|v| v * s))]
    }
}

struct LeakyRelu {
    slope: f32,
}

impl Backward for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    // Subgradient at exactly 0 takes the negative-side slope (0 for relu).
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = self.slope;
        vec![Some(zip_map(
            g,
            x[0],
            |g, x| if x > 0.0 { g } else { g * s },
        ))]
    }
}

struct Tanh;

impl Backward for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn backward(&self, g: &Tensor, _: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(g, y, |g, y| g * (1.0 - y * y)))]
    }
}

struct Square;

impl Backward for Square {
    fn name(&self) -> &'static str {
        "square"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(g, x[0], |g, x| 2.0 * g * x))]
    }
}

struct SumAll {
    scale: f32,
}

impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(x[0].shape(), g.item() * self.scale))]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone().reshape(x[0].shape()).expect("same size"))]
    }
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(self, other, Binary::Mul)
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f32, shift: f32) -> Result<Var<'t>> {
        let out = self.value().map(|v| scale * v + shift);
        self.tape().record(out, &[self], Affine { scale })
    }

    pub fn scale(self, s: f32) -> Result<Var<'t>> {
        self.affine(s, 0.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.affine(-1.0, 0.0)
    }

    pub fn leaky_relu(self, slope: f32) -> Result<Var<'t>> {
        let out = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        self.tape().record(out, &[self], LeakyRelu { slope })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.leaky_relu(0.0)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let out = self.value().map(f32::tanh);
        self.tape().record(out, &[self], Tanh)
    }

    pub fn square(self) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * v);
        self.tape().record(out, &[self], Square)
    }

    fn reduce(self, mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let total: f64 = v.data().iter().map(|&x| x as f64).sum();
        let n = v.len() as f64;
        let (value, scale) = if mean {
            ((total / n) as f32, (1.0 / n) as f32)
        } else {
            (total as f32, 1.0)
        };
        self.tape()
            .record(Tensor::scalar(value), &[self], SumAll { scale })
    }

    /// Sum of all elements (f64 accumulation) as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(false)
    }

    /// Mean of all elements (f64 accumulation) as a scalar.
    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().as_ref().clone().reshape(shape)?;
        self.tape().record(out, &[self], Reshape)
    }
}

// ---------------------------------------------------------------------------
// Instance normalization

struct InstanceNorm {
    inv_std: Vec<f32>,
    plane: usize,
}

impl Backward for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance_normalize"
    }

    fn backward(&self, g: &Tensor, _: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let p = self.plane;
        let mut dx = vec![0.0f32; g.len()];
        for (i, &inv_std) in self.inv_std.iter().enumerate() {
            let gs = &g.data()[i * p..(i + 1) * p];
            let ys = &y.data()[i * p..(i + 1) * p];
            let mean_g = gs.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
            let mean_gy = gs
                .iter()
                .zip(ys)
                .map(|(&g, &y)| g as f64 * y as f64)
                .sum::<f64>()
                / p as f64;
            for ((d, &g), &y) in dx[i * p..(i + 1) * p].iter_mut().zip(gs).zip(ys) {
                *d = inv_std * (g - mean_g as f32 - y * mean_gy as f32);
            }
        }
        vec![Some(Tensor::new(g.shape(), dx).expect("same shape"))]
    }
}

/// Per-sample, per-channel standardization over spatial positions with
/// population variance: `(x - mean) / sqrt(var + eps)`.
pub fn instance_normalize<'t>(x: Var<'t>, eps: f32) -> Result<Var<'t>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let p = h * w;
    if p == 0 {
        return Err(Error::shape("instance_normalize needs H*W >= 1"));
    }
    let mut out = vec![0.0f32; xv.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for i in 0..n * c {
        let xs = &xv.data()[i * p..(i + 1) * p];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
        let var = xs
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / p as f64;
        let is = (1.0 / (var + eps as f64).sqrt()) as f32;
        for (o, &v) in out[i * p..(i + 1) * p].iter_mut().zip(xs) {
            *o = ((v as f64 - mean) as f32) * is;
        }
        inv_std.push(is);
    }
    let out = Tensor::new(xv.shape(), out)?;
    x.tape()
        .record(out, &[x], InstanceNorm { inv_std, plane: p })
}

// ---------------------------------------------------------------------------
// Pooling and resampling

fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

struct AdaptiveAvgPool {
    in_hw: (usize, usize),
}

impl Backward for AdaptiveAvgPool {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (h, w) = self.in_hw;
        let (_, _, oh, ow) = g.dims4().expect("4-d");
        let planes = g.len() / (oh * ow);
        let mut dx = vec![0.0f32; x[0].len()];
        for pl in 0..planes {
            for oy in 0..oh {
                let (y0, y1) = bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = bin(ox, w, ow);
                    let share = g.data()[(pl * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            dx[(pl * h + yy) * w + xx] += share;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(x[0].shape(), dx).expect("same shape"))]
    }
}

/// Averages each plane over `out_h x out_w` adaptive bins.
pub fn adaptive_avg_pool<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::shape(format!(
            "adaptive_avg_pool: output {out_h}x{out_w} invalid for input {h}x{w}"
        )));
    }
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    for pl in 0..n * c {
        let src = &xv.data()[pl * h * w..(pl + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1) = bin(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = bin(ox, w, out_w);
                let mut acc = 0.0f64;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[yy * w + xx] as f64;
                    }
                }
                out[(pl * out_h + oy) * out_w + ox] = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
            }
        }
    }
    let out = Tensor::new(&[n, c, out_h, out_w], out)?;
    x.tape()
        .record(out, &[x], AdaptiveAvgPool { in_hw: (h, w) })
}

struct UpsampleNearest {
    factor: usize,
}

impl Backward for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (_, _, h, w) = x[0].dims4().expect("4-d");
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let planes = x[0].len() / (h * w);
        let mut dx = vec![0.0f32; x[0].len()];
        for pl in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    dx[(pl * h + oy / f) * w + ox / f] += g.data()[(pl * oh + oy) * ow + ox];
                }
            }
        }
        vec![Some(Tensor::new(x[0].shape(), dx).expect("same shape"))]
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<'t>(x: Var<'t>, factor: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    if factor == 0 {
        return Err(Error::shape("upsample factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for pl in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(pl * oh + oy) * ow + ox] = xv.data()[(pl * h + oy / factor) * w + ox / factor];
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    x.tape().record(out, &[x], UpsampleNearest { factor })
}

// ---------------------------------------------------------------------------
// Dense head

struct Linear;

impl Backward for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        g: &Tensor,
        x: &[&Tensor],
        _: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (input, weight) = (x[0], x[1]);
        let (n, f) = (input.shape()[0], input.shape()[1]);
        let o = weight.shape()[0];
        let dx = needs[0].then(|| {
            let mut d = vec![0.0; n * f];
            gemm(
                Mat::new(g.data(), n, o),
                Mat::new(weight.data(), o, f),
                &mut d,
                false,
            );
            Tensor::new(input.shape(), d).expect("shape")
        });
        let dw = needs[1].then(|| {
            let mut d = vec![0.0; o * f];
            gemm(
                Mat::new(g.data(), n, o).t(),
                Mat::new(input.data(), n, f),
                &mut d,
                false,
            );
            Tensor::new(weight.shape(), d).expect("shape")
        });
        let db = needs.get(2).copied().unwrap_or(false).then(|| {
            let mut d = vec![0.0; o];
            for row in g.data().chunks(o) {
                for (acc, v) in d.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Tensor::new(&[o], d).expect("shape")
        });
        let mut grads = vec![dx, dw];
        if x.len() == 3 {
            grads.push(db);
        }
        grads
    }
}

/// `input [N, F] x weight[O, F]^T + bias[O] -> [N, O]`.
pub fn linear<'t>(input: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let (xv, wv) = (input.value(), weight.value());
    let (&[n, f], &[o, wf]) = (xv.shape(), wv.shape()) else {
        return Err(Error::shape(format!(
            "linear expects [N,F] and [O,F], got {:?} and {:?}",
            xv.shape(),
            wv.shape()
        )));
    };
    if f != wf {
        return Err(Error::shape(format!(
            "linear: feature sizes {f} and {wf} differ"
        )));
    }
    let mut out = vec![0.0f32; n * o];
    gemm(
        Mat::new(xv.data(), n, f),
        Mat::new(wv.data(), o, f).t(),
        &mut out,
        false,
    );
    let mut inputs = vec![input, weight];
    if let Some(b) = bias {
        let bv = b.value();
        if bv.shape() != [o] {
            return Err(Error::shape(format!(
                "linear bias shape {:?}, want [{o}]",
                bv.shape()
            )));
        }
        for row in out.chunks_mut(o) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        inputs.push(b);
    }
    let out = Tensor::new(&[n, o], out)?;
    input.tape().record(out, &inputs, Linear)
}

// ---------------------------------------------------------------------------
// Concatenation and slicing

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

struct Concat {
    axis: usize,
    extents: Vec<usize>,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        g: &Tensor,
        x: &[&Tensor],
        _: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (outer, inner) = outer_inner(g.shape(), self.axis);
        let total: usize = self.extents.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(x.len());
        for (i, &ext) in self.extents.iter().enumerate() {
            if needs[i] {
                let mut d = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    d.extend_from_slice(&g.data()[start..start + ext * inner]);
                }
                grads.push(Some(Tensor::new(x[i].shape(), d).expect("shape")));
            } else {
                grads.push(None);
            }
            offset += ext;
        }
        grads
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(items: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = items.first().ok_or(Error::EmptyBatch)?;
    let values: Vec<_> = items.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape(format!(
            "concat axis {axis} out of range for {base:?}"
        )));
    }
    let mut extents = Vec::with_capacity(items.len());
    for v in &values {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter()
                .enumerate()
                .any(|(d, &e)| d != axis && e != base[d])
        {
            return Err(Error::shape(format!(
                "concat: {s:?} incompatible with {base:?}"
            )));
        }
        extents.push(s[axis]);
    }
    let (outer, inner) = outer_inner(&base, axis);
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &ext) in values.iter().zip(&extents) {
            let start = o * ext * inner;
            data.extend_from_slice(&v.data()[start..start + ext * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let out = Tensor::new(&shape, data)?;
    first.tape().record(out, items, Concat { axis, extents })
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let shape = x[0].shape();
        let (outer, inner) = outer_inner(shape, self.axis);
        let ext = shape[self.axis];
        let len = g.shape()[self.axis];
        let mut d = vec![0.0f32; x[0].len()];
        for o in 0..outer {
            let dst = (o * ext + self.start) * inner;
            let src = o * len * inner;
            d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
        }
        vec![Some(Tensor::new(shape, d).expect("shape"))]
    }
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<'t>(x: Var<'t>, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let shape = xv.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::shape(format!(
            "narrow({axis}, {start}, {len}) out of range for {shape:?}"
        )));
    }
    let (outer, inner) = outer_inner(shape, axis);
    let ext = shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = (o * ext + start) * inner;
        data.extend_from_slice(&xv.data()[src..src + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let out = Tensor::new(&out_shape, data)?;
    x.tape().record(out, &[x], Narrow { axis, start })
}

// ---------------------------------------------------------------------------
// Classification

struct CrossEntropy {
    probs: Vec<f32>,
    labels: Vec<usize>,
}

impl Backward for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let n = self.labels.len();
        let c = x[0].shape()[1];
        let scale = g.item() / n as f32;
        let mut d: Vec<f32> = self.probs.iter().map(|p| p * scale).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * c + l] -= scale;
        }
        vec![Some(Tensor::new(x[0].shape(), d).expect("shape"))]
    }
}

/// Mean negative log-softmax probability of the true label.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let lv = logits.value();
    let &[n, c] = lv.shape() else {
        return Err(Error::shape(format!(
            "logits must be [N, C], got {:?}",
            lv.shape()
        )));
    };
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let mut probs = vec![0.0f32; n * c];
    let mut total = 0.0f64;
    for (i, row) in lv.data().chunks(c).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + z.ln();
        for (j, &v) in row.iter().enumerate() {
            probs[i * c + j] = ((v as f64 - log_z).exp()) as f32;
        }
        total += log_z - row[labels[i]] as f64;
    }
    let out = Tensor::scalar((total / n as f64) as f32);
    logits.tape().record(
        out,
        &[logits],
        CrossEntropy {
            probs,
            labels: labels.to_vec(),
        },
    )
}
