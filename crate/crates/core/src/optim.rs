//! Adam.

use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    /// Keyed by parameter name so the state survives a checkpoint.
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, step: 0, moments: BTreeMap::new() }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: Vec<(ParamId, Tensor<T>)>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::c(BETA1), T::c(BETA2));
        let step_size = T::c(self.lr / c1);
        let c2_sqrt = T::c(c2.sqrt());
        let eps = T::c(EPS);
        for (id, g) in grads {
            let name = store.name(id).to_string();
            let mom = self.moments.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let p = store.get_mut(id);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                *w -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        }
    }
}
