use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the finite-difference checks throughout the crate.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh tape from one var per entry of
/// `params`. Returns `max |analytic - numeric| / max(1, |numeric|)` over every
/// parameter element.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let eval = |ps: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.requires_grad = want_grad;
                t.grad = None;
                tape.leaf(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let mut grads = Vec::new();
        if want_grad {
            tape.backward(loss)?;
            for v in &vars {
                grads.push(tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default());
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (up, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig - eps;
            let (down, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[p][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
