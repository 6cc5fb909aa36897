use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: AsRef<Tensor>>(params: &[P]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.as_ref().rows(), p.as_ref().cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<P: AsMut<Tensor>>(
    params: &mut [P],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            (params.len(), state.m.len()),
            (grads.len(), 1),
        ));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let p = p.as_mut();
        if p.shape() != g.shape() {
            return Err(shape_err("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.as_mut().data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            if cfg.lr != 0.0 {
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= cfg.lr * mhat / (libm::sqrt(vhat) + cfg.eps);
            }
        }
    }
    Ok(())
}
