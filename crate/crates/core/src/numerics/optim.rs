//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| p.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Self { m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One AdamW update: `p <- p - lr*wd*p`, then `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) {
    assert_eq!(grads.len(), params.len(), "one gradient buffer per parameter");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let p = params.get_mut(id).data_mut();
        let g = &grads[id.0];
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay;
            p[i] = p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
