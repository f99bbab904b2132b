//! Central finite differences, used to audit the analytic gradients.

use crate::tensor::Tensor;

/// Central-difference estimate of `d f / d x[index]`.
pub fn central_difference(
    x: &Tensor,
    index: usize,
    step: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[index] += step;
    let mut minus = x.clone();
    minus.data_mut()[index] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|)`, or the absolute difference when both are below `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}
