//! Spectral normalization: divide a weight matrix by its top singular
//! value, estimated by power iteration. Discriminator layers keep a
//! persistent estimate that advances one iteration per training step.

use ndarray::{Array1, Array2, ArrayView2};

use crate::autodiff::{c, Scalar};

/// Normalize `w` so its top singular value is 1, running `iters` power
/// iterations from a fixed deterministic start. A zero matrix is returned
/// unchanged.
pub fn spectral_normalize<T: Scalar>(w: &ArrayView2<T>, iters: usize) -> Array2<T> {
    let sigma = top_singular_value(w, iters);
    if sigma <= c::<T>(1e-12) {
        return w.to_owned();
    }
    w.mapv(|x| x / sigma)
}

/// Top singular value via power iteration on `w wᵀ`.
pub fn top_singular_value<T: Scalar>(w: &ArrayView2<T>, iters: usize) -> T {
    let m = w.nrows();
    let mut u = Array1::<T>::from_elem(m, T::one() / c::<T>((m as f64).sqrt()));
    let mut sigma = T::zero();
    for _ in 0..iters {
        let v = normalize(w.t().dot(&u));
        if v.is_none() {
            return T::zero();
        }
        let v = v.unwrap();
        let wu = w.dot(&v);
        match normalize(wu.clone()) {
            Some(nu) => {
                u = nu;
                sigma = u.dot(&wu.view());
            }
            None => return T::zero(),
        }
    }
    sigma
}

fn normalize<T: Scalar>(x: Array1<T>) -> Option<Array1<T>> {
    let n = x.dot(&x).sqrt();
    if n <= c::<T>(1e-12) {
        None
    } else {
        Some(x.mapv(|v| v / n))
    }
}

/// Persistent power-iteration state for one spectrally normalized layer.
pub struct SpectralState<T: Scalar> {
    pub u: Array1<T>,
    pub sigma: T,
}

impl<T: Scalar> SpectralState<T> {
    pub fn new(rows: usize) -> Self {
        SpectralState {
            u: Array1::from_elem(rows, T::one() / c::<T>((rows as f64).sqrt())),
            sigma: T::one(),
        }
    }

    /// One power iteration; updates `u` and the cached sigma.
    pub fn advance(&mut self, w: &ArrayView2<T>) -> T {
        if let Some(v) = normalize(w.t().dot(&self.u)) {
            let wu = w.dot(&v);
            if let Some(nu) = normalize(wu.clone()) {
                self.sigma = nu.dot(&wu.view());
                self.u = nu;
            } else {
                self.sigma = T::zero();
            }
        } else {
            self.sigma = T::zero();
        }
        self.sigma
    }

    /// Scale factor to apply to the weights (guarded against zero).
    pub fn inv_sigma(&self) -> T {
        if self.sigma <= c::<T>(1e-12) {
            T::one()
        } else {
            T::one() / self.sigma
        }
    }
}
