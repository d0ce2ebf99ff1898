use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, element by element. Returns the largest relative
/// error, using `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = f(&tape, x)?;
    if y.value().len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function output has shape {:?}, expected a scalar", y.shape()),
        ));
    }
    let grads = tape.backward(y);
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let x = tape.leaf(t.clone());
        Ok(f(&tape, x)?.value().item())
    };
    let mut probe = input.clone();
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
