//! Input-conditioned diagonal linear recurrence (selective scan).
//!
//! For tokens `t = 1..L`, channels `c`, and states `n`:
//!
//! ```text
//! h[t,c,n] = exp(step[t,c] * decay[c,n]) * h[t-1,c,n] + step[t,c] * in_gate[t,n] * x[t,c]
//! y[t,c]   = sum_n out_gate[t,n] * h[t,c,n] + skip[c] * x[t,c]
//! ```
//!
//! with `h[0] = 0`. The recurrence is one tape record with a hand-written
//! reverse pass; the projections that produce `step` and the gates are
//! ordinary tape operations.

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Runs the scan on raw tensors. Returns the outputs and all hidden states
/// (`L×C×N`, row-major) for the reverse pass.
#[allow(clippy::too_many_arguments)]
fn scan_forward(
    x: &[f64],
    step: &[f64],
    decay: &[f64],
    in_gate: &[f64],
    out_gate: &[f64],
    skip: &[f64],
    l: usize,
    c: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; l * c];
    let mut hs = vec![0.0; l * c * n];
    let mut h = vec![0.0; c * n];
    for t in 0..l {
        let bt = &in_gate[t * n..(t + 1) * n];
        let ct = &out_gate[t * n..(t + 1) * n];
        for ch in 0..c {
            let dt = step[t * c + ch];
            let xt = x[t * c + ch];
            let hrow = &mut h[ch * n..(ch + 1) * n];
            let arow = &decay[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                hrow[s] = (dt * arow[s]).exp() * hrow[s] + dt * bt[s] * xt;
                acc += ct[s] * hrow[s];
            }
            y[t * c + ch] = acc + skip[ch] * xt;
        }
        hs[t * c * n..(t + 1) * c * n].copy_from_slice(&h);
    }
    (y, hs)
}

impl<'t> Var<'t> {
    /// Selective scan over a `L×C` sequence. Shapes: `step` L×C, `decay` C×N,
    /// `in_gate`/`out_gate` L×N, `skip` C. Returns `L×C`.
    pub fn selective_scan(
        self,
        step: Var<'t>,
        decay: Var<'t>,
        in_gate: Var<'t>,
        out_gate: Var<'t>,
        skip: Var<'t>,
    ) -> Result<Var<'t>> {
        let (xv, sv, av, bv, cv, dv) = (
            self.value(),
            step.value(),
            decay.value(),
            in_gate.value(),
            out_gate.value(),
            skip.value(),
        );
        let (l, c) = match xv.shape() {
            [l, c] => (*l, *c),
            s => {
                return Err(Error::shape(
                    "selective_scan",
                    format!("sequence must be L×C, got {:?}", s),
                ))
            }
        };
        let n = av.shape().get(1).copied().unwrap_or(0);
        let ok = sv.shape() == [l, c]
            && av.shape() == [c, n]
            && bv.shape() == [l, n]
            && cv.shape() == [l, n]
            && dv.shape() == [c];
        if !ok || n == 0 {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "x {:?}, step {:?}, decay {:?}, in_gate {:?}, out_gate {:?}, skip {:?}",
                    xv.shape(),
                    sv.shape(),
                    av.shape(),
                    bv.shape(),
                    cv.shape(),
                    dv.shape()
                ),
            ));
        }
        let (y, hs) = scan_forward(
            xv.data(),
            sv.data(),
            av.data(),
            bv.data(),
            cv.data(),
            dv.data(),
            l,
            c,
            n,
        );
        let out = Tensor::from_parts(vec![l, c], y);
        Ok(self
            .tape
            .record(out, &[self, step, decay, in_gate, out_gate, skip], move |g, _| {
                let (x, dt, a, b, cg, d) = (xv.data(), sv.data(), av.data(), bv.data(), cv.data(), dv.data());
                let gy = g.data();
                let mut gx = vec![0.0; l * c];
                let mut gdt = vec![0.0; l * c];
                let mut ga = vec![0.0; c * n];
                let mut gb = vec![0.0; l * n];
                let mut gc = vec![0.0; l * n];
                let mut gd = vec![0.0; c];
                // dL/dh[t] carried backwards, already including the a[t+1] factor.
                let mut carry = vec![0.0; c * n];
                for t in (0..l).rev() {
                    let ht = &hs[t * c * n..(t + 1) * c * n];
                    for ch in 0..c {
                        let gyt = gy[t * c + ch];
                        let xt = x[t * c + ch];
                        let d_t = dt[t * c + ch];
                        gd[ch] += gyt * xt;
                        gx[t * c + ch] += d[ch] * gyt;
                        let mut g_dt = 0.0;
                        let mut g_x = 0.0;
                        for s in 0..n {
                            let idx = ch * n + s;
                            let h = ht[idx];
                            let h_prev = if t > 0 { hs[(t - 1) * c * n + idx] } else { 0.0 };
                            gc[t * n + s] += gyt * h;
                            let gh = cg[t * n + s] * gyt + carry[idx];
                            let decay = (d_t * a[idx]).exp();
                            // through the decay factor
                            let ga_t = gh * h_prev * decay;
                            g_dt += ga_t * a[idx];
                            ga[idx] += ga_t * d_t;
                            // through the input term
                            g_dt += gh * b[t * n + s] * xt;
                            gb[t * n + s] += gh * d_t * xt;
                            g_x += gh * d_t * b[t * n + s];
                            carry[idx] = gh * decay;
                        }
                        gdt[t * c + ch] += g_dt;
                        gx[t * c + ch] += g_x;
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![l, c], gx)),
                    Some(Tensor::from_parts(vec![l, c], gdt)),
                    Some(Tensor::from_parts(vec![c, n], ga)),
                    Some(Tensor::from_parts(vec![l, n], gb)),
                    Some(Tensor::from_parts(vec![l, n], gc)),
                    Some(Tensor::from_parts(vec![c], gd)),
                ]
            }))
    }
}
