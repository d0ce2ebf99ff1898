//! Registry of every differentiable primitive, each wrapped as a scalar
//! function of one flat input so it can be fed to [`grad_check`].
//!
//! Multi-operand ops slice their operands out of the single input, so one
//! check covers the gradient of every argument.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::numerics::{grad_check, identity_grid, ConvSpec, Tape, Tensor, Var};

/// Builds the function under test from the flat input.
pub type BuildFn = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub input_len: usize,
    pub build: BuildFn,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .field("input_len", &self.input_len)
            .finish()
    }
}

impl GradCase {
    /// Random input for `seed`. Entries are kept at least 0.1 away from zero
    /// so that kinks (relu, max ties at zero) are never straddled, and at
    /// most 2 in magnitude.
    pub fn input(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
        let data = (0..self.input_len)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v.signum() * (0.1 + 0.7 * v.abs()).min(2.0)
            })
            .collect();
        Tensor::new(&[self.input_len], data).expect("flat input")
    }

    /// Largest relative gradient error for `seed` at step `eps`.
    pub fn check(&self, seed: u64, eps: f64) -> Result<f64> {
        let build = self.build;
        grad_check(|tape, x| project(tape, build(tape, x)?), &self.input(seed), eps)
    }
}

/// Reduces any output to a scalar with fixed, non-uniform weights.
fn project<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect())?;
    Ok(y.mul(tape.constant(w))?.sum())
}

/// `len` entries of the flat input starting at `start`, reshaped.
fn part<'t>(x: Var<'t>, start: usize, shape: &[usize]) -> Result<Var<'t>> {
    let len = shape.iter().product();
    x.narrow(0, start, len)?.reshape(shape)
}

fn pair<'t>(x: Var<'t>, shape: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    let n: usize = shape.iter().product();
    Ok((part(x, 0, shape)?, part(x, n, shape)?))
}

fn b_add<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = pair(x, &[3, 4])?;
    a.add(b)
}

fn b_add_broadcast<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let a = part(x, 0, &[3, 4])?;
    let b = part(x, 12, &[1, 4])?;
    let c = part(x, 16, &[3, 1])?;
    a.add(b)?.mul(c)
}

fn b_sub<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = pair(x, &[3, 4])?;
    a.sub(b)
}

fn b_mul<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = pair(x, &[3, 4])?;
    a.mul(b)
}

fn b_div<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = pair(x, &[3, 4])?;
    a.div(b)
}

fn s<'t>(shape: &[usize], x: Var<'t>) -> Result<Var<'t>> {
    part(x, 0, shape)
}

fn u_scale<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.scale(-1.7))
}

fn u_add_scalar<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.add_scalar(0.3).square())
}

fn u_neg<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.neg())
}

fn u_exp<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.exp())
}

fn u_square<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.square())
}

fn u_tanh<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.tanh())
}

fn u_sigmoid<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.sigmoid())
}

fn u_silu<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.silu())
}

fn u_softplus<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.softplus())
}

fn u_elu_plus_one<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.elu_plus_one())
}

fn u_relu<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.relu())
}

fn r_sum<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.square().sum())
}

fn r_mean<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[3, 5], x)?.square().mean())
}

fn r_sum_axis<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    s(&[3, 4, 5], x)?.sum_axis(1, false)
}

fn r_mean_axis<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    s(&[3, 4, 5], x)?.mean_axis(2, true)
}

fn r_max_axis<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    s(&[3, 4, 5], x)?.max_axis(0, false)
}

fn m_reshape<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[2, 3, 4], x)?.reshape(&[6, 4])?.square())
}

fn m_permute<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[2, 3, 4], x)?.permute(&[2, 0, 1])?.square())
}

fn m_narrow<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[2, 3, 4], x)?.narrow(2, 1, 2)?.square())
}

fn m_concat<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let a = part(x, 0, &[2, 3])?;
    let b = part(x, 6, &[2, 2])?;
    Ok(Var::concat(&[b, a.square(), b], 1)?.square())
}

fn m_gather<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let idx: Rc<[usize]> = vec![5, 0, 3, 3, 11, 7, 1, 0].into();
    Ok(s(&[12], x)?.gather(idx, &[2, 4])?.square())
}

fn m_scatter<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let idx: Rc<[usize]> = vec![9, 2, 14, 0, 7, 11].into();
    Ok(s(&[6], x)?.scatter(idx, &[3, 5])?.square())
}

fn l_matmul<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let a = part(x, 0, &[3, 4])?;
    let b = part(x, 12, &[4, 2])?;
    a.matmul(b)
}

fn l_softmax<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    s(&[3, 5], x)?.softmax(1)
}

fn l_bce<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let t = Tensor::new(&[3, 5], (0..15).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
    s(&[3, 5], x)?.bce_with_logits(&t)
}

fn l_mse<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let t = Tensor::new(&[3, 5], (0..15).map(|i| (i as f64 * 0.37).cos()).collect())?;
    s(&[3, 5], x)?.mse_to(&t)
}

fn c_conv<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let input = part(x, 0, &[2, 5, 5])?;
    let kernel = part(x, 50, &[3, 2, 3, 3])?;
    let bias = part(x, 104, &[3])?;
    input.conv2d(kernel, Some(bias), ConvSpec::same(3))
}

fn c_conv_strided<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let input = part(x, 0, &[2, 6, 6])?;
    let kernel = part(x, 72, &[2, 2, 3, 3])?;
    let spec = ConvSpec {
        stride: 2,
        pad: 1,
        groups: 1,
    };
    input.conv2d(kernel, None, spec)
}

fn c_conv_depthwise<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let input = part(x, 0, &[3, 4, 4])?;
    let kernel = part(x, 48, &[3, 1, 3, 3])?;
    input.conv2d(kernel, None, ConvSpec::depthwise(3, 3))
}

fn c_bilinear<'t>(tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let feature = part(x, 0, &[2, 4, 4])?;
    // Offsets squashed into (0.1, 0.9) keep every sample off the integer lattice.
    let offsets = part(x, 32, &[2, 4, 4])?.sigmoid().scale(0.8).add_scalar(0.1);
    let coords = tape.constant(identity_grid(4, 4)).add(offsets)?;
    feature.bilinear_sample(coords)
}

fn c_selective_scan<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (l, c, n) = (4, 3, 2);
    let seq = part(x, 0, &[l, c])?;
    let step = part(x, 12, &[l, c])?.softplus();
    let decay = part(x, 24, &[c, n])?.softplus().neg();
    let in_gate = part(x, 30, &[l, n])?;
    let out_gate = part(x, 38, &[l, n])?;
    let skip = part(x, 46, &[c])?;
    seq.selective_scan(step, decay, in_gate, out_gate, skip)
}

fn w_analysis<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[2, 4, 4], x)?.haar_analysis()?.square())
}

fn w_synthesis<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(s(&[8, 2, 2], x)?.haar_synthesis()?.square())
}

/// Every registered differentiable operation.
pub fn grad_cases() -> Vec<GradCase> {
    let c = |name, input_len, build: BuildFn| GradCase { name, input_len, build };
    vec![
        c("add", 24, b_add),
        c("add_mul_broadcast", 19, b_add_broadcast),
        c("sub", 24, b_sub),
        c("mul", 24, b_mul),
        c("div", 24, b_div),
        c("scale", 15, u_scale),
        c("add_scalar", 15, u_add_scalar),
        c("neg", 15, u_neg),
        c("exp", 15, u_exp),
        c("square", 15, u_square),
        c("tanh", 15, u_tanh),
        c("sigmoid", 15, u_sigmoid),
        c("silu", 15, u_silu),
        c("softplus", 15, u_softplus),
        c("elu_plus_one", 15, u_elu_plus_one),
        c("relu", 15, u_relu),
        c("sum", 15, r_sum),
        c("mean", 15, r_mean),
        c("sum_axis", 60, r_sum_axis),
        c("mean_axis", 60, r_mean_axis),
        c("max_axis", 60, r_max_axis),
        c("reshape", 24, m_reshape),
        c("permute", 24, m_permute),
        c("narrow", 24, m_narrow),
        c("concat", 10, m_concat),
        c("gather", 12, m_gather),
        c("scatter", 6, m_scatter),
        c("matmul", 20, l_matmul),
        c("softmax", 15, l_softmax),
        c("bce_with_logits", 15, l_bce),
        c("mse_to", 15, l_mse),
        c("conv2d", 107, c_conv),
        c("conv2d_strided", 108, c_conv_strided),
        c("conv2d_depthwise", 75, c_conv_depthwise),
        c("bilinear_sample", 64, c_bilinear),
        c("selective_scan", 49, c_selective_scan),
        c("haar_analysis", 32, w_analysis),
        c("haar_synthesis", 32, w_synthesis),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_builds_and_passes_one_seed() {
        for case in grad_cases() {
            let err = case.check(0, 1e-4).unwrap_or_else(|e| panic!("{}: {e}", case.name));
            assert!(err < 1e-4, "{}: {err:e}", case.name);
        }
    }

    #[test]
    fn names_are_unique() {
        let cases = grad_cases();
        let names: std::collections::BTreeSet<_> = cases.iter().map(|c| c.name).collect();
        assert_eq!(names.len(), cases.len());
    }
}
