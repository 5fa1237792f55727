use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.get(id).shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer state for {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads.params() {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                params.name(id),
                params.get(id).shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.param(id);
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
