//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{ParamId, ParamStore};
use crate::autodiff::{c, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-8,
        }
    }
}

pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    t: u64,
    m: HashMap<usize, ArrayD<T>>,
    v: HashMap<usize, ArrayD<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Decay is decoupled: `p <- p * (1 - lr*wd)` before the
    /// Adam step. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, ArrayD<T>)]) {
        self.t += 1;
        let lr = c::<T>(self.cfg.lr);
        let b1 = c::<T>(self.cfg.beta1);
        let b2 = c::<T>(self.cfg.beta2);
        let eps = c::<T>(self.cfg.eps);
        let one = T::one();
        let bc1 = one - c::<T>(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - c::<T>(self.cfg.beta2.powi(self.t as i32));
        let decay = one - lr * c::<T>(self.cfg.weight_decay);
        for (id, g) in grads {
            if !store.trainable(*id) {
                continue;
            }
            let m = self
                .m
                .entry(id.0)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id.0)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (one - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            });
            let mut p = store.value(*id).clone();
            ndarray::Zip::from(&mut p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi = *pi * decay - lr * mhat / (vhat.sqrt() + eps);
                });
            store.set_value(*id, p);
        }
    }
}
