use serde::{Deserialize, Serialize};

use super::exec::GradientSet;
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::freezing::FreezePlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need lr >= 0, momentum in [0, 1), weight decay >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(state: &ModelState) -> Self {
        Self {
            velocity: state.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// `v <- momentum * v + g + wd * w; w <- w - lr * v` on trainable entries of
/// the tensors the reverse pass reached. Frozen entries are never written.
pub fn sgd_step_masked(
    state: &mut ModelState,
    grads: &GradientSet,
    plan: &FreezePlan,
    cfg: &OptimizerConfig,
    opt: &mut OptimizerState,
) -> Result<()> {
    cfg.validate()?;
    let n = state.params.len();
    if grads.grads.len() != n || plan.masks.len() != n || opt.velocity.len() != n {
        return Err(Error::ShapeMismatch("optimizer inputs are not congruent".into()));
    }
    for t in 0..n {
        if !grads.touched[t] {
            continue;
        }
        let w = &mut state.params[t].data;
        let (g, m, v) = (&grads.grads[t], &plan.masks[t], &mut opt.velocity[t]);
        if g.len() != w.len() || m.len() != w.len() || v.len() != w.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has mismatched gradient or mask",
                state.params[t].id
            )));
        }
        for i in 0..w.len() {
            if m[i] {
                continue;
            }
            v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * w[i];
            w[i] -= cfg.lr * v[i];
        }
    }
    Ok(())
}
