//! Finite-difference gradient checking.
//!
//! The training stack is only trustworthy if every backward rule agrees
//! with central differences in double precision, so this module is public
//! and the integration suite leans on it heavily.

use crate::tensor::Tensor;

/// Default perturbation step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function at `x`.
pub fn numerical_grad<F>(mut f: F, x: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(x.raw_dim());
    let mut probe = x.clone();
    let flat_len = x.len();
    for i in 0..flat_len {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Central-difference directional derivative of a scalar function along
/// `dir`. Two evaluations instead of 2·len, so large inputs stay checkable:
/// compare against the dot product of the analytic gradient with `dir`.
pub fn directional_derivative<F>(mut f: F, x: &Tensor, dir: &Tensor, step: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(x.shape(), dir.shape(), "direction shape mismatch");
    let plus = {
        let mut p = x.clone();
        ndarray::Zip::from(&mut p).and(dir).for_each(|v, &d| *v += step * d);
        f(&p)
    };
    let minus = {
        let mut p = x.clone();
        ndarray::Zip::from(&mut p).and(dir).for_each(|v, &d| *v -= step * d);
        f(&p)
    };
    (plus - minus) / (2.0 * step)
}

/// Relative error between two scalars with the same floor rule as
/// [`max_rel_error`].
pub fn scalar_rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Maximum elementwise relative error between two gradients, with a small
/// absolute floor so near-zero entries compare on absolute terms.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1e-3);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
