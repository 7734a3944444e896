//! Adam and the warmup + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, idx: usize) -> &Tensor {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &Tensor {
        &self.v[idx]
    }
}

/// One bias-corrected Adam update. Frozen parameters are left alone; a
/// parameter without a gradient is treated as having a zero gradient.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("optimizer tracks {} parameters, store has {}", state.m.len(), store.len()),
        ));
    }
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape("adam_step", store.get(id).shape(), g.shape()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let i = id.index();
        let g = grads.get(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = store.get_mut(id).data_mut();
        for k in 0..theta.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate for a 0-based global step: linear warmup from 0 to `peak`
/// over `warmup_epochs` epochs, then cosine decay that lands on `floor` at
/// the last step of training.
pub fn lr_at(step: usize, steps_per_epoch: usize, epochs: usize, warmup_epochs: usize, peak: f64, floor: f64) -> f64 {
    let spe = steps_per_epoch.max(1);
    let warm = warmup_epochs * spe;
    let total = epochs * spe;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return peak;
    }
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    floor + (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}
