//! 2-D cross-correlation via im2col and a single GEMM per (sample, group).

use super::gemm::{gemm, Mat};
use super::{Backward, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Pad `(k - 1) / 2` on each side with zeros.
    SameZero,
    /// Pad `(k - 1) / 2` on each side by repeating the border value.
    SameReplicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: Padding::SameZero,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: Padding) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    groups: usize,
    replicate: bool,
}

impl Geometry {
    fn new(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, cin_g, kh, kw) = kernel.dims4()?;
        let groups = spec.groups;
        if groups == 0 || spec.stride == 0 {
            return Err(Error::shape("conv2d: groups and stride must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(format!(
                "conv2d: input channels {cin}, kernel {:?}, groups {groups} are incompatible",
                kernel.shape()
            )));
        }
        let (pad_h, pad_w) = match spec.padding {
            Padding::Valid => (0, 0),
            Padding::SameZero | Padding::SameReplicate => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape(
                        "conv2d: same padding needs odd kernel extents",
                    ));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
        };
        if kh > h + 2 * pad_h || kw > w + 2 * pad_w {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad_h,
                w + 2 * pad_w
            )));
        }
        let oh = (h + 2 * pad_h - kh) / spec.stride + 1;
        let ow = (w + 2 * pad_w - kw) / spec.stride + 1;
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad_h,
            pad_w,
            oh,
            ow,
            stride: spec.stride,
            groups,
            replicate: spec.padding == Padding::SameReplicate,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for an output position and kernel offset, or `None`
    /// when it falls in zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else if self.replicate {
            Some(pos.clamp(0, extent as isize - 1) as usize)
        } else {
            None
        }
    }

    /// Fills `col` (`patch x pixels`) from the group's input channels.
    fn im2col(&self, planes: &[f32], col: &mut [f32]) {
        let px = self.pixels();
        for c in 0..self.cin_g() {
            let plane = &planes[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut col[((c * self.kh + ky) * self.kw + kx) * px..][..px];
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        match self.source(oy, ky, self.pad_h, self.h) {
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.source(ox, kx, self.pad_w, self.w) {
                                        Some(ix) => src[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                            None => dst.iter_mut().for_each(|d| *d = 0.0),
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` gradients back onto the group's input planes.
    fn col2im(&self, col: &[f32], planes: &mut [f32]) {
        let px = self.pixels();
        for c in 0..self.cin_g() {
            let plane = &mut planes[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &col[((c * self.kh + ky) * self.kw + kx) * px..][..px];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, self.pad_h, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.source(ox, kx, self.pad_w, self.w) {
                                plane[iy * self.w + ix] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward(g: &Geometry, input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let px = g.pixels();
    let (cin_g, cout_g, patch) = (g.cin_g(), g.cout_g(), g.patch());
    let mut out = vec![0.0f32; g.n * g.cout * px];
    let mut col = vec![0.0f32; patch * px];
    for s in 0..g.n {
        for grp in 0..g.groups {
            let in_off = (s * g.cin + grp * cin_g) * g.h * g.w;
            g.im2col(&input.data()[in_off..in_off + cin_g * g.h * g.w], &mut col);
            let w = &kernel.data()[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            let out_off = (s * g.cout + grp * cout_g) * px;
            gemm(
                Mat::new(w, cout_g, patch),
                Mat::new(&col, patch, px),
                &mut out[out_off..out_off + cout_g * px],
                false,
            );
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                let off = (s * g.cout + co) * px;
                out[off..off + px].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out).expect("conv output shape")
}

/// Cross-correlation on plain tensors, outside any tape.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let g = Geometry::new(input, kernel, spec)?;
    check_bias(bias, g.cout)?;
    Ok(forward(&g, input, kernel, bias))
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [cout] => Err(Error::shape(format!(
            "conv2d bias shape {:?}, want [{cout}]",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

struct Conv2d {
    geometry: Geometry,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad: &Tensor,
        x: &[&Tensor],
        _: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = &self.geometry;
        let (input, kernel) = (x[0], x[1]);
        let px = g.pixels();
        let (cin_g, cout_g, patch) = (g.cin_g(), g.cout_g(), g.patch());
        let need_bias = needs.get(2).copied().unwrap_or(false);

        let mut d_input = needs[0].then(|| vec![0.0f32; input.len()]);
        let mut d_kernel = needs[1].then(|| vec![0.0f32; kernel.len()]);
        let mut col = vec![0.0f32; patch * px];
        let mut d_col = vec![0.0f32; patch * px];

        for s in 0..g.n {
            for grp in 0..g.groups {
                let in_off = (s * g.cin + grp * cin_g) * g.h * g.w;
                let in_len = cin_g * g.h * g.w;
                let out_off = (s * g.cout + grp * cout_g) * px;
                let d_out = Mat::new(&grad.data()[out_off..out_off + cout_g * px], cout_g, px);
                let k_range = grp * cout_g * patch..(grp + 1) * cout_g * patch;
                if let Some(dk) = d_kernel.as_mut() {
                    g.im2col(&input.data()[in_off..in_off + in_len], &mut col);
                    gemm(
                        d_out,
                        Mat::new(&col, patch, px).t(),
                        &mut dk[k_range.clone()],
                        true,
                    );
                }
                if let Some(di) = d_input.as_mut() {
                    let w = Mat::new(&kernel.data()[k_range], cout_g, patch);
                    gemm(w.t(), d_out, &mut d_col, false);
                    g.col2im(&d_col, &mut di[in_off..in_off + in_len]);
                }
            }
        }

        let d_bias = need_bias.then(|| {
            let mut db = vec![0.0f32; g.cout];
            for s in 0..g.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let off = (s * g.cout + co) * px;
                    *acc += grad.data()[off..off + px].iter().sum::<f32>();
                }
            }
            Tensor::new(&[g.cout], db).expect("bias shape")
        });

        let mut grads = vec![
            d_input.map(|d| Tensor::new(input.shape(), d).expect("input shape")),
            d_kernel.map(|d| Tensor::new(kernel.shape(), d).expect("kernel shape")),
        ];
        if x.len() == 3 {
            grads.push(d_bias);
        }
        grads
    }
}

/// Differentiable 2-D cross-correlation (no kernel flip).
///
/// `input [N, Cin, H, W]`, `kernel [Cout, Cin / groups, kh, kw]`,
/// optional `bias [Cout]`.
pub fn conv2d<'t>(
    input: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    spec: ConvSpec,
) -> Result<Var<'t>> {
    let (iv, kv) = (input.value(), kernel.value());
    let g = Geometry::new(&iv, &kv, spec)?;
    let bv = bias.map(|b| b.value());
    check_bias(bv.as_deref(), g.cout)?;
    let out = forward(&g, &iv, &kv, bv.as_deref());
    let mut inputs = vec![input, kernel];
    inputs.extend(bias);
    input.tape().record(out, &inputs, Conv2d { geometry: g })
}
