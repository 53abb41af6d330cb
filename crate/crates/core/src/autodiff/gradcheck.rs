//! Central finite-difference checks of tape gradients, run in `f64`.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of scalar `f` at `input`
/// and central differences with step `h`, over every element of `input`.
pub fn gradcheck<F>(f: F, input: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..input.numel()).collect();
    gradcheck_at(f, input, h, &all)
}

/// Like [`gradcheck`] but probes only the listed element indices.
pub fn gradcheck_at<F>(f: F, input: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !input.is_finite() {
        return Err(Error::arg("gradcheck", "input must be finite"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_grad());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("leaf grad populated").to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(input.shape(), data)?.with_grad());
        let out = f(&mut t, x)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = input.data().to_vec();
        plus[i] += h;
        let mut minus = input.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
