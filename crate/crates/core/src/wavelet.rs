//! Single-level orthonormal 2D Haar transform.
//!
//! For each 2×2 block `[[a, b], [c, d]]` of every channel:
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! The 4×4 block matrix is symmetric and orthogonal, so synthesis applies the
//! same matrix and each transform is the other's adjoint. Packed subband
//! tensors are `4C×(H/2)×(W/2)` in band order LL, LH, HL, HH.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Subband order used everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    LL = 0,
    LH = 1,
    HL = 2,
    HH = 3,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
}

fn check_even(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match shape {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape(op, format!("expected C×H×W, got {:?}", shape))),
    };
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            op,
            format!("height {h} and width {w} must both be even and non-zero"),
        ));
    }
    Ok((c, h, w))
}

/// Analysis on a raw tensor: `C×H×W -> 4C×(H/2)×(W/2)`.
pub fn haar_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_even("haar_wt2d", x.shape())?;
    let (hh, hw) = (h / 2, w / 2);
    let plane = hh * hw;
    let mut out = vec![0.0; 4 * c * plane];
    let d = x.data();
    for ch in 0..c {
        let src = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..hh {
            for j in 0..hw {
                let a = src[(2 * i) * w + 2 * j];
                let b = src[(2 * i) * w + 2 * j + 1];
                let cc = src[(2 * i + 1) * w + 2 * j];
                let dd = src[(2 * i + 1) * w + 2 * j + 1];
                let at = i * hw + j;
                out[ch * plane + at] = 0.5 * (a + b + cc + dd);
                out[(c + ch) * plane + at] = 0.5 * (a - b + cc - dd);
                out[(2 * c + ch) * plane + at] = 0.5 * (a + b - cc - dd);
                out[(3 * c + ch) * plane + at] = 0.5 * (a - b - cc + dd);
            }
        }
    }
    Ok(Tensor::from_parts(vec![4 * c, hh, hw], out))
}

/// Synthesis on a raw packed tensor: `4C×h×w -> C×2h×2w`.
pub fn haar_inverse(packed: &Tensor) -> Result<Tensor> {
    let (c4, hh, hw) = match packed.shape() {
        [c, h, w] if c % 4 == 0 && *c > 0 => (*c, *h, *w),
        s => {
            return Err(Error::shape(
                "haar_iwt2d",
                format!("packed subbands must be 4C×h×w, got {:?}", s),
            ))
        }
    };
    let c = c4 / 4;
    let (h, w) = (2 * hh, 2 * hw);
    let plane = hh * hw;
    let d = packed.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..hh {
            for j in 0..hw {
                let at = i * hw + j;
                let ll = d[ch * plane + at];
                let lh = d[(c + ch) * plane + at];
                let hl = d[(2 * c + ch) * plane + at];
                let hh_ = d[(3 * c + ch) * plane + at];
                dst[(2 * i) * w + 2 * j] = 0.5 * (ll + lh + hl + hh_);
                dst[(2 * i) * w + 2 * j + 1] = 0.5 * (ll - lh + hl - hh_);
                dst[(2 * i + 1) * w + 2 * j] = 0.5 * (ll + lh - hl - hh_);
                dst[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hh_);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

impl<'t> Var<'t> {
    /// Differentiable Haar analysis producing the packed `4C×(H/2)×(W/2)` layout.
    pub fn haar_analysis(self) -> Result<Var<'t>> {
        let out = haar_forward(&self.value())?;
        Ok(self.tape.record(out, &[self], |g, _| {
            vec![Some(haar_inverse(g).expect("gradient has packed layout"))]
        }))
    }

    /// Differentiable Haar synthesis from the packed layout.
    pub fn haar_synthesis(self) -> Result<Var<'t>> {
        let out = haar_inverse(&self.value())?;
        Ok(self.tape.record(out, &[self], |g, _| {
            vec![Some(haar_forward(g).expect("gradient has even extent"))]
        }))
    }
}

/// The four half-resolution subbands of one decomposition level.
#[derive(Debug, Clone, Copy)]
pub struct SubbandSet<'t> {
    pub ll: Var<'t>,
    pub lh: Var<'t>,
    pub hl: Var<'t>,
    pub hh: Var<'t>,
}

impl<'t> SubbandSet<'t> {
    pub fn new(ll: Var<'t>, lh: Var<'t>, hl: Var<'t>, hh: Var<'t>) -> Result<Self> {
        let s = ll.shape();
        for (name, b) in [("lh", lh), ("hl", hl), ("hh", hh)] {
            if b.shape() != s {
                return Err(Error::shape(
                    "SubbandSet",
                    format!("ll is {:?} but {name} is {:?}", s, b.shape()),
                ));
            }
        }
        if s.len() != 3 {
            return Err(Error::shape(
                "SubbandSet",
                format!("subbands must be C×h×w, got {:?}", s),
            ));
        }
        Ok(SubbandSet { ll, lh, hl, hh })
    }

    pub fn band(&self, b: Band) -> Var<'t> {
        match b {
            Band::LL => self.ll,
            Band::LH => self.lh,
            Band::HL => self.hl,
            Band::HH => self.hh,
        }
    }

    /// `(C, h, w)` of each subband.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.ll.shape();
        (s[0], s[1], s[2])
    }
}

pub fn haar_wt2d(x: Var<'_>) -> Result<SubbandSet<'_>> {
    let packed = x.haar_analysis()?;
    subband_split(packed)
}

pub fn haar_iwt2d<'t>(bands: &SubbandSet<'t>) -> Result<Var<'t>> {
    subband_concat(bands)?.haar_synthesis()
}

/// Channel concatenation in band order LL, LH, HL, HH.
pub fn subband_concat<'t>(bands: &SubbandSet<'t>) -> Result<Var<'t>> {
    Var::concat(&[bands.ll, bands.lh, bands.hl, bands.hh], 0)
}

/// Splits a `4C×h×w` tensor back into its four subbands.
pub fn subband_split(packed: Var<'_>) -> Result<SubbandSet<'_>> {
    let s = packed.shape();
    if s.len() != 3 || !s[0].is_multiple_of(4) || s[0] == 0 {
        return Err(Error::shape("subband_split", format!("expected 4C×h×w, got {:?}", s)));
    }
    let c = s[0] / 4;
    SubbandSet::new(
        packed.narrow(0, 0, c)?,
        packed.narrow(0, c, c)?,
        packed.narrow(0, 2 * c, c)?,
        packed.narrow(0, 3 * c, c)?,
    )
}
