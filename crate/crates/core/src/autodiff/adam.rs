//! Adam with bias-corrected first and second moments.

use crate::autodiff::tape::ParamStore;
use crate::autodiff::tensor::Tensor;

/// Per-parameter moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: usize,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| {
                let (n, c, h, w) = p.value.shape();
                Tensor::zeros(n, c, h, w)
            })
            .collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One Adam update from the gradients currently held in `store`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (pid, p) in store.iter_mut().enumerate() {
        let m = state.m[pid].data_mut();
        let v = state.v[pid].data_mut();
        let g = p.grad.data();
        let theta = p.value.data_mut();
        for k in 0..g.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            theta[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// The conventional defaults.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
