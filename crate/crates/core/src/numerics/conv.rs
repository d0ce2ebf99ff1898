//! 2D convolution over `C×H×W` tensors.

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same(k: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: k / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: k / 2,
            groups: channels,
        }
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_per_group: usize,
    cout_per_group: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Self> {
        let (c_in, h, w) = match input {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::shape("conv2d", format!("input must be C×H×W, got {:?}", input))),
        };
        let (c_out, cin_g, k) = match kernel {
            [o, i, k1, k2] if k1 == k2 => (*o, *i, *k1),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be C_out×C_in×k×k, got {:?}", kernel),
                ))
            }
        };
        let groups = spec.groups.max(1);
        if spec.stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if c_in % groups != 0 || c_out % groups != 0 || cin_g * groups != c_in {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {} channels but kernel {:?} expects {} (groups = {})",
                    input,
                    c_in,
                    kernel,
                    cin_g * groups,
                    groups
                ),
            ));
        }
        if h + 2 * spec.pad < k || w + 2 * spec.pad < k {
            return Err(Error::invalid(
                "conv2d",
                format!("input {:?} with pad {} smaller than kernel {k}", input, spec.pad),
            ));
        }
        Ok(Geometry {
            c_in,
            h,
            w,
            c_out,
            cin_per_group: cin_g,
            cout_per_group: c_out / groups,
            k,
            ho: (h + 2 * spec.pad - k) / spec.stride + 1,
            wo: (w + 2 * spec.pad - k) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    /// Output-column range whose input column `ox*stride + kj - pad` is in bounds.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi_num = self.w + p;
        if hi_num < kj + 1 {
            return (0, 0);
        }
        let hi = ((hi_num - kj - 1) / s + 1).min(self.wo);
        (lo.min(hi), hi)
    }

    /// Visits every (output channel, input channel, tap, output row) with the
    /// matching input row and valid column range.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, (usize, usize))) {
        for oc in 0..self.c_out {
            let g = oc / self.cout_per_group;
            for icl in 0..self.cin_per_group {
                let ic = g * self.cin_per_group + icl;
                for ki in 0..self.k {
                    for kj in 0..self.k {
                        let cols = self.col_range(kj);
                        if cols.0 >= cols.1 {
                            continue;
                        }
                        for oy in 0..self.ho {
                            let iy = oy * self.stride + ki;
                            if iy < self.pad || iy - self.pad >= self.h {
                                continue;
                            }
                            f(oc, icl, ic, ki, kj, oy, iy - self.pad, cols);
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass on raw tensors; shared by the differentiable op and tests.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let geo = Geometry::new(input.shape(), kernel.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), geo.c_out),
            ));
        }
    }
    let mut out = vec![0.0; geo.c_out * geo.ho * geo.wo];
    let x = input.data();
    let wt = kernel.data();
    let k = geo.k;
    geo.for_each_tap(|oc, icl, ic, ki, kj, oy, iy, (lo, hi)| {
        let wv = wt[((oc * geo.cin_per_group + icl) * k + ki) * k + kj];
        if wv == 0.0 {
            return;
        }
        let orow = &mut out[(oc * geo.ho + oy) * geo.wo..(oc * geo.ho + oy + 1) * geo.wo];
        let irow = &x[(ic * geo.h + iy) * geo.w..(ic * geo.h + iy + 1) * geo.w];
        if geo.stride == 1 {
            let off = lo + kj - geo.pad;
            for (o, i) in orow[lo..hi].iter_mut().zip(&irow[off..off + (hi - lo)]) {
                *o += wv * i;
            }
        } else {
            for ox in lo..hi {
                orow[ox] += wv * irow[ox * geo.stride + kj - geo.pad];
            }
        }
    });
    if let Some(b) = bias {
        let plane = geo.ho * geo.wo;
        for (oc, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[oc];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(vec![geo.c_out, geo.ho, geo.wo], out))
}

impl<'t> Var<'t> {
    /// Cross-correlation of a `C_in×H×W` input with a `C_out×(C_in/groups)×k×k` kernel.
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = kernel.value();
        let bv = bias.map(|b| b.value());
        let out = conv2d_forward(&xv, &wv, bv.as_deref(), spec)?;
        let geo = Geometry::new(xv.shape(), wv.shape(), spec)?;
        let mut parents = vec![self, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.tape.record(out, &parents, move |g, wants| {
            let gd = g.data();
            let x = xv.data();
            let wt = wv.data();
            let k = geo.k;
            let mut gx = wants[0].then(|| vec![0.0; x.len()]);
            let mut gw = wants[1].then(|| vec![0.0; wt.len()]);
            geo.for_each_tap(|oc, icl, ic, ki, kj, oy, iy, (lo, hi)| {
                let widx = ((oc * geo.cin_per_group + icl) * k + ki) * k + kj;
                let grow = &gd[(oc * geo.ho + oy) * geo.wo..(oc * geo.ho + oy + 1) * geo.wo];
                let irange = (ic * geo.h + iy) * geo.w..(ic * geo.h + iy + 1) * geo.w;
                if geo.stride == 1 {
                    let off = lo + kj - geo.pad;
                    let n = hi - lo;
                    if let Some(gw) = &mut gw {
                        let irow = &x[irange.clone()];
                        let dot: f64 = grow[lo..hi].iter().zip(&irow[off..off + n]).map(|(a, b)| a * b).sum();
                        gw[widx] += dot;
                    }
                    if let Some(gx) = &mut gx {
                        let w = wt[widx];
                        if w != 0.0 {
                            let grow_in = &mut gx[irange];
                            for (dst, gv) in grow_in[off..off + n].iter_mut().zip(&grow[lo..hi]) {
                                *dst += w * gv;
                            }
                        }
                    }
                } else {
                    #[allow(clippy::needless_range_loop)]
                    for ox in lo..hi {
                        let ix = irange.start + ox * geo.stride + kj - geo.pad;
                        if let Some(gw) = &mut gw {
                            gw[widx] += grow[ox] * x[ix];
                        }
                        if let Some(gx) = &mut gx {
                            gx[ix] += wt[widx] * grow[ox];
                        }
                    }
                }
            });
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
            ];
            if wants.len() == 3 {
                let plane = geo.ho * geo.wo;
                grads.push(wants[2].then(|| {
                    let d = gd.chunks(plane).map(|c| c.iter().sum()).collect();
                    Tensor::from_parts(vec![geo.c_out], d)
                }));
            }
            debug_assert_eq!(geo.c_in, xv.shape()[0]);
            grads
        }))
    }
}
