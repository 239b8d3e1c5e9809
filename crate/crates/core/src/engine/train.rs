use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::{backward_pass, forward_pass, Binding, BnPolicy, ExecOptions};
use super::ops::softmax_cross_entropy;
use super::optim::{sgd_step_masked, OptimizerConfig, OptimizerState};
use super::state::{ModelState, BN_MOMENTUM};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::freezing::{mask_gradients, rejuvenate, FreezePlan, RejuvenationPolicy, RejuvenationReport};
use crate::io::Dataset;
use crate::topology::{Core, ExecGraph, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub binding: Binding,
    pub bn_policy: BnPolicy,
    pub rejuvenation: RejuvenationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            binding: Binding::FROZEN,
            bn_policy: BnPolicy::BatchStats,
            rejuvenation: RejuvenationPolicy::default(),
        }
    }
}

/// Per-epoch metrics, streamed as one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
    pub rejuvenation: RejuvenationReport,
}

impl EpochReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Class scores are the output flattened per item.
pub fn predictions(out: &Tensor) -> Vec<usize> {
    let k = out.c * out.h * out.w;
    (0..out.n).map(|i| argmax(&out.data[i * k..(i + 1) * k])).collect()
}

/// One pass over `data` in a seeded order, then one rejuvenation sweep.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    graph: &ExecGraph,
    state: &mut ModelState,
    plan: &FreezePlan,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<EpochReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    cfg.optimizer.validate()?;
    plan.check(graph)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(state.seed, 2 * epoch as u64 + 1)));

    let options = ExecOptions::train(cfg.binding, cfg.bn_policy);
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = data.batch(chunk);
        let fwd = forward_pass(graph, state, &x, options)?;
        let out = fwd.output(graph);
        let (loss, dout) = softmax_cross_entropy(out, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += predictions(out).iter().zip(&labels).filter(|(p, l)| p == l).count();

        let mut grads = backward_pass(graph, state, &fwd, &dout)?;
        mask_gradients(&mut grads, plan)?;
        sgd_step_masked(state, &grads, plan, &cfg.optimizer, opt)?;
        for b in 0..graph.batch_norms.len() {
            if let Some((mean, var)) = fwd.batch_stats(b) {
                state.bn_stats[b].update(mean, var, BN_MOMENTUM);
            }
        }
    }

    let fixed_frozen = cfg.bn_policy == BnPolicy::FrozenCoreFixed;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(state.seed, 2 * epoch as u64 + 2));
    let report = rejuvenate(graph, state, plan, &cfg.rejuvenation, opt, &mut rng, |b| {
        fixed_frozen && graph.batch_norms[b].role == Role::Core(Core::Frozen)
    })?;
    Ok(EpochReport {
        epoch,
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        samples: data.len(),
        rejuvenation: report,
    })
}

/// Inference-mode loss and accuracy.
pub fn evaluate(
    graph: &ExecGraph,
    state: &ModelState,
    data: &Dataset,
    binding: Binding,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let fwd = forward_pass(graph, state, &x, ExecOptions::eval(binding))?;
        let out = fwd.output(graph);
        let (loss, _) = softmax_cross_entropy(out, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += predictions(out).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(EvalReport {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        samples: data.len(),
    })
}
