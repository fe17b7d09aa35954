//! Central finite-difference oracle for analytic gradients.

use super::tensor::Tensor;
use crate::error::{FlowError, Result};
use crate::par;

/// Compares analytic gradients against central finite differences of a pure
/// scalar function of the parameter list.
///
/// For each parameter entry p the step is `h * max(1, |p|)`; the effective
/// step is recovered from the rounded perturbed values so the quotient is
/// exact. Returns the max over entries of
/// `|analytic - central| / max(1, |central|)`.
pub fn grad_check<F>(params: &[Tensor], grads: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> f64 + Sync,
{
    if params.len() != grads.len() {
        return Err(FlowError::shape("params/grads length mismatch"));
    }
    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
        .collect();

    let errs = par::map(&entries, |&(ti, ei)| {
        let mut local: Vec<Tensor> = params.to_vec();
        let p = local[ti].data()[ei];
        let step = h * p.abs().max(1.0);
        local[ti].data_mut()[ei] = p + step;
        let hi = local[ti].data()[ei];
        let f_hi = f(&local);
        local[ti].data_mut()[ei] = p - step;
        let lo = local[ti].data()[ei];
        let f_lo = f(&local);
        local[ti].data_mut()[ei] = p;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return f64::INFINITY;
        }
        let central = (f_hi - f_lo) / (hi - lo);
        let analytic = grads[ti].data()[ei];
        (analytic - central).abs() / central.abs().max(1.0)
    });

    let max = errs.iter().cloned().fold(0.0, f64::max);
    if max.is_finite() {
        Ok(max)
    } else {
        Err(FlowError::numeric("non-finite value during grad check"))
    }
}
