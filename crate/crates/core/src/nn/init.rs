//! Weight initialization. Values are drawn in `f64` and converted, so the
//! same seed yields the same parameters for both element types.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{c, Scalar};

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        c::<T>(z * std)
    })
}

/// He (Kaiming) normal for ReLU-family layers.
pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Xavier/Glorot normal for linear projections.
pub fn xavier_normal<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ArrayD<T> {
    normal(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
