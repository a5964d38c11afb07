//! Central finite differences, used as an independent oracle for the
//! analytic gradients. Only forward evaluations are involved.

use crate::Tensor;

/// Numerical gradient of a scalar function at `x` by central differences.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    numeric_gradient_at(f, x, step, &(0..x.numel()).collect::<Vec<_>>())
}

/// Central differences for the listed flat indices only; other entries are 0.
pub fn numeric_gradient_at(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64, indices: &[usize]) -> Tensor {
    let mut g = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Relative error `|a - n| / max(|a|, |n|)`, with `floor` guarding the
/// denominator for entries that are zero up to round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error over `indices`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, indices: &[usize], floor: f64) -> f64 {
    indices.iter().map(|&i| relative_error(analytic.data()[i], numeric.data()[i], floor)).fold(0.0, f64::max)
}
