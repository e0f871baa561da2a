//! Central finite differences, for validating analytic gradients.

use crate::tensor::Tensor;

/// Numerical partial derivatives of `f` at `x` for the listed flat indices.
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    indices: &[usize],
    step: f64,
) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between two gradient vectors.
///
/// Each pair is compared relative to `max(|a|, |b|, floor)`; the floor keeps
/// entries that are numerically zero from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
