//! Central finite differences, used as an oracle for the analytic gradients.

use super::tensor::ParamSet;

/// Numeric gradient of `loss` at `params`, one coordinate at a time:
/// `(L(p + eps) - L(p - eps)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut loss: F, params: &ParamSet<f64>, eps: f64) -> ParamSet<f64>
where
    F: FnMut(&ParamSet<f64>) -> f64,
{
    let mut grads = params.zeros_like();
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, (_, tensor))| (0..tensor.len()).map(move |i| (t, i)))
        .collect();
    let values = finite_diff_at(&mut loss, params, eps, &coords);
    for (&(t, i), v) in coords.iter().zip(values) {
        grads.tensor_mut(t).data_mut()[i] = v;
    }
    grads
}

/// Numeric partial derivatives at selected `(tensor index, element index)` coordinates.
pub fn finite_diff_at<F>(mut loss: F, params: &ParamSet<f64>, eps: f64, coords: &[(usize, usize)]) -> Vec<f64>
where
    F: FnMut(&ParamSet<f64>) -> f64,
{
    let mut probe = params.clone();
    coords
        .iter()
        .map(|&(t, i)| {
            let orig = probe.tensor(t).data()[i];
            probe.tensor_mut(t).data_mut()[i] = orig + eps;
            let plus = loss(&probe);
            probe.tensor_mut(t).data_mut()[i] = orig - eps;
            let minus = loss(&probe);
            probe.tensor_mut(t).data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with an absolute floor so vanishing gradients compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}
