//! Finite-difference gradient verification.

use super::{Scalar, Tensor};
use crate::Result;

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences, coordinate by coordinate. Returns
/// `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e-8)`.
///
/// `f` must map a tensor to a scalar tensor. The analytic gradient is taken
/// with a tracked copy of `x`; the difference quotients use untracked copies
/// so the numeric path records no graph.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    assert!(eps > S::zero());
    let tracked = x.as_param();
    let loss = f(&tracked)?;
    let store = loss.backward_grads()?;
    let analytic = store
        .get(&tracked)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![S::zero(); x.len()]);

    let floor = S::from_f64(1e-8);
    let two = S::from_f64(2.0);
    let mut worst = S::zero();
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::constant(x.shape(), plus)?)?.value()?;
        let fm = f(&Tensor::constant(x.shape(), minus)?)?.value()?;
        let numeric = (fp - fm) / (two * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + floor);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
