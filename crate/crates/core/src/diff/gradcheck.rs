//! Finite-difference verification of tape gradients.
//!
//! Used by the test suite to cross-check every backward rule against central
//! differences. `f` rebuilds the computation from scratch on a fresh tape so
//! the check exercises the exact code path under test.

use crate::error::Result;
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_entry: usize,
}

/// Compare analytic gradients of `f` against central differences at `inputs`.
///
/// `f` maps the inputs to a scalar loss and its analytic gradients, one per
/// input (None if the input is not differentiable there). Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check_multi<F, Func>(
    inputs: &[Tensor<F>],
    step: F,
    f: Func,
) -> Result<GradCheckReport>
where
    F: Scalar,
    Func: Fn(&[Tensor<F>]) -> Result<(F, Vec<Option<Tensor<F>>>)>,
{
    let (_, analytic) = f(inputs)?;
    let mut max_rel_err = 0.0f64;
    let mut worst_input = 0;
    let mut worst_entry = 0;

    for (ti, input) in inputs.iter().enumerate() {
        let grad = match &analytic[ti] {
            Some(g) => g,
            None => continue,
        };
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ti] = perturb(input, ei, step);
            minus[ti] = perturb(input, ei, -step);
            let (fp, _) = f(&plus)?;
            let (fm, _) = f(&minus)?;
            let numeric = (fp - fm).as_f64() / (2.0 * step.as_f64());
            let a = grad.values()[ei].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_input = ti;
                worst_entry = ei;
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_input, worst_entry })
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F, Func>(input: &Tensor<F>, step: F, f: Func) -> Result<GradCheckReport>
where
    F: Scalar,
    Func: Fn(&Tensor<F>) -> Result<(F, Option<Tensor<F>>)>,
{
    grad_check_multi(std::slice::from_ref(input), step, |xs| {
        let (loss, g) = f(&xs[0])?;
        Ok((loss, vec![g]))
    })
}

fn perturb<F: Scalar>(t: &Tensor<F>, entry: usize, delta: F) -> Tensor<F> {
    let mut v = t.values().to_vec();
    v[entry] += delta;
    let out = Tensor::new(t.shape().to_vec(), v).expect("same shape");
    if t.requires_grad() {
        out.with_grad()
    } else {
        out
    }
}
