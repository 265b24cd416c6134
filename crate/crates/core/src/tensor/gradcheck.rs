//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`,
/// where `numeric` is the central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut params = [x.clone()];
    finite_difference_check_params(&mut params, |tape, vars| f(tape, vars[0]), step)
}

/// Like [`finite_difference_check`] but over several inputs at once. Every
/// coordinate of every tensor in `params` is perturbed in turn; the tensors
/// are restored before returning.
pub fn finite_difference_check_params<T, F>(params: &mut [Tensor<T>], f: F, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |params: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.item(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(true);
            tape.leaf(&p)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.numel()])
        })
        .collect();

    let two_h = step + step;
    let mut worst = T::zero();
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = orig + step;
            let up = eval(params);
            params[pi].data_mut()[j] = orig - step;
            let down = eval(params);
            params[pi].data_mut()[j] = orig;
            let numeric = (up? - down?) / two_h;
            let a = analytic[pi][j];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient {a}")));
            }
            let err = (a - numeric).abs() / numeric.abs().max(T::one());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
