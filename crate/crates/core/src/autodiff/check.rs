//! Finite-difference gradient checking. Checks run in `f64` regardless of
//! the training element type.

use ndarray::ArrayD;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().expect("contiguous")[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise relative error between two gradients, with an
/// absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1e-6);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
