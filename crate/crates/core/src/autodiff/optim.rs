use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update. Parameters without a gradient entry are left
/// untouched, moments included.
pub fn adam_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &BTreeMap<ParamId, Tensor<F>>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let one = F::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = F::of(cfg.lr);
    let eps = F::of(cfg.eps);
    for (&id, g) in grads {
        let i = id.index();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.tensor_mut(id).data_mut();
        for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *pj -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
