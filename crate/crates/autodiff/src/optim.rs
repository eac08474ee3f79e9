//! AdamW with decoupled weight decay, and the cosine schedule.

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update. Frozen parameters are skipped; gradients are checked
/// for finiteness before anything is modified.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Invalid(format!("learning rate {lr}")));
    }
    if grads.per_param.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("optimizer buffers do not match the parameter store".into()));
    }
    for (id, p) in params.iter() {
        if p.trainable && grads.get(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads.get(id);
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let w = p.tensor.values_mut();
        let decay = 1.0 - lr * cfg.weight_decay;
        for j in 0..w.len() {
            w[j] *= decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            w[j] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `floor + (peak - floor) (1 + cos(pi t / T)) / 2`; `T = 0` gives `peak`.
pub fn cosine_lr(t: u64, total: u64, peak: f64, floor: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = t.min(total) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}
