use serde::{Deserialize, Serialize};

use super::{join, Initializer, Module, ParamKind, PROJECTION_STD};
use crate::error::{Error, Result};
use crate::flops::{self, OpCategory};
use crate::tensor::{linalg, Tensor};

/// Geometry of a square-kernel grouped convolution. Bias is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// "Same"-padded convolution for odd kernels.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            dilation: 1,
            groups,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, groups: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, groups)
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self::new(channels, channels, kernel, stride, channels)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.groups > 0
            && self.in_channels > 0
            && self.out_channels > 0
            && self.kernel > 0
            && self.stride > 0
            && self.dilation > 0
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0;
        if !ok {
            return Err(Error::geometry(format!("invalid conv spec {self:?}")));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// (C_in·k²/G + 1)·C_out
    pub fn param_count(&self) -> usize {
        (self.in_channels * self.kernel * self.kernel / self.groups + 1) * self.out_channels
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::geometry(format!(
                "conv output extent is not positive (input {input}, kernel {}, padding {})",
                self.kernel, self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel]
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    kk: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin_g * self.kk
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

/// Gathers the receptive fields of one (batch, group) slice into a
/// [cin_g·k², Ho·Wo] matrix.
fn im2col(x: &[f64], spec: &ConvSpec, g: &Geometry, cols: &mut [f64]) {
    let k = spec.kernel;
    let ncol = g.cols();
    for c in 0..g.cin_g {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * g.kk + ki * k + kj) * ncol;
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into image layout.
fn col2im(cols: &[f64], spec: &ConvSpec, g: &Geometry, dx: &mut [f64]) {
    let k = spec.kernel;
    let ncol = g.cols();
    for c in 0..g.cin_g {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * g.kk + ki * k + kj) * ncol;
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_inputs(x: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: &Tensor) -> Result<Geometry> {
    spec.validate()?;
    let (n, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: vec![spec.in_channels],
        });
    }
    if weight.shape() != spec.weight_shape() || bias.shape() != [spec.out_channels] {
        return Err(Error::ShapeMismatch {
            op: "conv2d weights",
            lhs: weight.shape().to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    Ok(Geometry {
        n,
        h,
        w,
        ho: spec.output_extent(h)?,
        wo: spec.output_extent(w)?,
        cin_g: spec.in_channels / spec.groups,
        cout_g: spec.out_channels / spec.groups,
        kk: spec.kernel * spec.kernel,
    })
}

/// Grouped 2-D cross-correlation lowered to matrix products.
pub fn conv2d(x: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let geo = check_inputs(x, spec, weight, bias)?;
    let spec = *spec;
    let (rows, ncol) = (geo.rows(), geo.cols());
    let (cin, cout, groups) = (spec.in_channels, spec.out_channels, spec.groups);
    let pointwise = is_plain_pointwise(&spec);

    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0; geo.n * cout * ncol];
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncol] };
    for b in 0..geo.n {
        for g in 0..groups {
            let x_slice = &xd[(b * cin + g * geo.cin_g) * geo.h * geo.w..];
            let mat: &[f64] = if pointwise {
                &x_slice[..rows * ncol]
            } else {
                im2col(x_slice, &spec, &geo, &mut cols);
                &cols
            };
            let o = (b * cout + g * geo.cout_g) * ncol;
            let out_slice = &mut out[o..o + geo.cout_g * ncol];
            for (co, chunk) in out_slice.chunks_mut(ncol).enumerate() {
                chunk.fill(bd[g * geo.cout_g + co]);
            }
            linalg::gemm_nn(geo.cout_g, rows, ncol, &wd[g * geo.cout_g * rows..], mat, out_slice);
        }
    }
    let macs = geo.n * cout * geo.cin_g * geo.kk * ncol;
    flops::record(OpCategory::Conv, 2 * macs as u64, (geo.n * cout * ncol) as u64);

    let (xs, ws, bs) = (x.clone(), weight.clone(), bias.clone());
    let out_shape = vec![geo.n, cout, geo.ho, geo.wo];
    Tensor::from_op("conv2d", out, out_shape, vec![x.clone(), weight.clone(), bias.clone()], move |gy| {
        let xd = xs.data();
        let wd = ws.data();
        let need_x = xs.requires_grad_flag();
        let need_w = ws.requires_grad_flag();
        let mut dx = need_x.then(|| vec![0.0; xd.len()]);
        let mut dw = need_w.then(|| vec![0.0; wd.len()]);
        let db = bs.requires_grad_flag().then(|| {
            let mut db = vec![0.0; cout];
            for b in 0..geo.n {
                for (c, d) in db.iter_mut().enumerate() {
                    *d += gy[(b * cout + c) * ncol..(b * cout + c + 1) * ncol].iter().sum::<f64>();
                }
            }
            db
        });
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncol] };
        let mut dcols = vec![0.0; rows * ncol];
        for b in 0..geo.n {
            for g in 0..groups {
                let x_off = (b * cin + g * geo.cin_g) * geo.h * geo.w;
                let gy_slice = &gy[(b * cout + g * geo.cout_g) * ncol..(b * cout + (g + 1) * geo.cout_g) * ncol];
                let w_slice = &wd[g * geo.cout_g * rows..(g + 1) * geo.cout_g * rows];
                if let Some(dw) = dw.as_mut() {
                    let mat: &[f64] = if pointwise {
                        &xd[x_off..x_off + rows * ncol]
                    } else {
                        im2col(&xd[x_off..], &spec, &geo, &mut cols);
                        &cols
                    };
                    linalg::gemm_nt(
                        geo.cout_g,
                        ncol,
                        rows,
                        gy_slice,
                        mat,
                        &mut dw[g * geo.cout_g * rows..(g + 1) * geo.cout_g * rows],
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    if pointwise {
                        linalg::gemm_tn(rows, geo.cout_g, ncol, w_slice, gy_slice, &mut dx[x_off..x_off + rows * ncol]);
                    } else {
                        dcols.fill(0.0);
                        linalg::gemm_tn(rows, geo.cout_g, ncol, w_slice, gy_slice, &mut dcols);
                        col2im(&dcols, &spec, &geo, &mut dx[x_off..]);
                    }
                }
            }
        }
        vec![dx, dw, db]
    })
}

/// Direct seven-loop convolution. Slow; used as the trusted reference.
pub fn conv2d_direct(x: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let geo = check_inputs(x, spec, weight, bias)?;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let k = spec.kernel;
    let mut out = vec![0.0; geo.n * spec.out_channels * geo.ho * geo.wo];
    for b in 0..geo.n {
        for co in 0..spec.out_channels {
            let g = co / geo.cout_g;
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let mut acc = bd[co];
                    for ci in 0..geo.cin_g {
                        let c = g * geo.cin_g + ci;
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= geo.h as isize || ix >= geo.w as isize {
                                    continue;
                                }
                                let xv = xd[((b * spec.in_channels + c) * geo.h + iy as usize) * geo.w + ix as usize];
                                acc += xv * wd[((co * geo.cin_g + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((b * spec.out_channels + co) * geo.ho + oy) * geo.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(out, &[geo.n, spec.out_channels, geo.ho, geo.wo])
}

/// Convolution layer owning its weight and bias.
#[derive(Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(spec: ConvSpec, init: &mut Initializer) -> Result<Self> {
        spec.validate()?;
        Ok(Conv2d {
            weight: init.trunc_normal(&spec.weight_shape(), PROJECTION_STD),
            bias: init.constant(&[spec.out_channels], 0.0),
            spec,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.spec, &self.weight, &self.bias)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Learnable);
    }
}
