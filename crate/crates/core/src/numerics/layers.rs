//! Parameterized building blocks shared by the fusion modules.

use rand::Rng;

use super::conv::ConvSpec;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Tape plus the parameter values a forward pass reads from.
#[derive(Clone, Copy)]
pub struct Scope<'t, 'p> {
    pub tape: &'t Tape,
    pub params: &'p ParamStore,
}

impl<'t, 'p> Scope<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamStore) -> Self {
        Scope { tape, params }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Gaussian with standard deviation `gain / sqrt(fan_in)`.
    Scaled(f64),
    /// Identity map at the center tap (or the diagonal) times `scale`, plus
    /// Gaussian noise of the given std.
    Identity {
        scale: f64,
        noise: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let groups = spec.groups.max(1);
        let cin_g = c_in / groups;
        let shape = [c_out, cin_g, k, k];
        let fan_in = (cin_g * k * k) as f64;
        let weight = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Scaled(gain) => Tensor::randn(&shape, gain / fan_in.sqrt(), rng),
            Init::Identity { scale, noise } => {
                let mut t = Tensor::randn(&shape, noise, rng);
                let cout_g = c_out / groups;
                for oc in 0..c_out {
                    let g = oc / cout_g;
                    let ic = oc % cout_g;
                    if ic < cin_g && g * cin_g + ic < c_in {
                        let v = t.at(&[oc, ic, k / 2, k / 2]);
                        t.set(&[oc, ic, k / 2, k / 2], v + scale);
                    }
                }
                t
            }
        };
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv2d { weight, bias, spec }
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        x.conv2d(w, b, self.spec)
    }
}

/// Dense map on row vectors: `T×in -> T×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = match init {
            Init::Zeros => Tensor::zeros(&[d_in, d_out]),
            Init::Scaled(gain) => Tensor::randn(&[d_in, d_out], gain / (d_in as f64).sqrt(), rng),
            Init::Identity { scale, noise } => {
                let mut t = Tensor::randn(&[d_in, d_out], noise, rng);
                for i in 0..d_in.min(d_out) {
                    let v = t.at(&[i, i]);
                    t.set(&[i, i], v + scale);
                }
                t
            }
        };
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(s.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(s.param(b)),
            None => Ok(y),
        }
    }
}
