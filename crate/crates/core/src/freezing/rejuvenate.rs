//! End-of-epoch revival of nearly dead channels, detected from batch norm
//! moving variance.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::FreezePlan;
use crate::engine::optim::OptimizerState;
use crate::engine::state::{init_scalar, ModelState};
use crate::error::{Error, Result};
use crate::topology::ExecGraph;

pub const DEFAULT_EPS_REL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejuvenationPolicy {
    /// Threshold relative to the layer's median moving variance.
    pub eps_rel: f64,
    pub enabled: bool,
}

impl Default for RejuvenationPolicy {
    fn default() -> Self {
        Self {
            eps_rel: DEFAULT_EPS_REL,
            enabled: true,
        }
    }
}

impl RejuvenationPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevivedChannel {
    pub layer: String,
    pub channel: usize,
    pub variance: f32,
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejuvenationReport {
    pub channels: Vec<RevivedChannel>,
    pub count: usize,
    /// Trainable weights redrawn across all revived channels.
    pub weights_reinitialized: usize,
}

fn median(values: &[f32]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// For each batch norm layer (except those `skip` rejects), channels whose
/// moving variance is below `eps_rel * median` get their producing conv
/// weights redrawn from the init law (frozen entries untouched), moving stats
/// reset to (0, 1), gamma = 1, beta = 0 and momentum cleared.
pub fn rejuvenate(
    graph: &ExecGraph,
    state: &mut ModelState,
    plan: &FreezePlan,
    policy: &RejuvenationPolicy,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    skip: impl Fn(usize) -> bool,
) -> Result<RejuvenationReport> {
    let mut report = RejuvenationReport::default();
    if !policy.enabled {
        return Ok(report);
    }
    if !(policy.eps_rel > 0.0) {
        return Err(Error::InvalidArgument("eps_rel must be positive".into()));
    }
    state.check(graph)?;
    plan.check(graph)?;
    for (b, decl) in graph.batch_norms.iter().enumerate() {
        if skip(b) {
            continue;
        }
        let threshold = policy.eps_rel * median(&state.bn_stats[b].var);
        let dead: Vec<usize> = (0..decl.channels)
            .filter(|&c| (state.bn_stats[b].var[c] as f64) < threshold)
            .collect();
        for c in dead {
            let variance = state.bn_stats[b].var[c];
            let pdecl = &graph.params[decl.producer];
            let per = pdecl.per_channel();
            for i in c * per..(c + 1) * per {
                if plan.masks[decl.producer][i] {
                    continue;
                }
                state.params[decl.producer].data[i] = init_scalar(pdecl, rng);
                opt.velocity[decl.producer][i] = 0.0;
                report.weights_reinitialized += 1;
            }
            state.bn_stats[b].mean[c] = 0.0;
            state.bn_stats[b].var[c] = 1.0;
            state.params[decl.gamma].data[c] = 1.0;
            state.params[decl.beta].data[c] = 0.0;
            opt.velocity[decl.gamma][c] = 0.0;
            opt.velocity[decl.beta][c] = 0.0;
            report.channels.push(RevivedChannel {
                layer: decl.id.clone(),
                channel: c,
                variance,
                threshold,
            });
        }
    }
    report.count = report.channels.len();
    Ok(report)
}
