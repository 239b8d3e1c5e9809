use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::GradientSet;
use crate::error::{Error, Result};
use crate::topology::{Core, CoreSet, ExecGraph, Op, Role};

/// How frozen weights are distributed over the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum FreezeScheme {
    /// The same ratio in every conv tensor.
    Uniform { rho: f64 },
    /// Ratio falls linearly with depth from the larger to the smaller value.
    RampDown { first: f64, last: f64 },
    /// Ratio rises linearly with depth from the smaller to the larger value.
    RampUp { first: f64, last: f64 },
    /// Frozen core fully frozen, trainable cores fully trainable.
    CorePartition,
}

impl FreezeScheme {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        let valid = match *self {
            FreezeScheme::Uniform { rho } => ok(rho),
            FreezeScheme::RampDown { first, last } | FreezeScheme::RampUp { first, last } => {
                ok(first) && ok(last)
            }
            FreezeScheme::CorePartition => true,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("freeze ratios must lie in [0, 1]: {self:?}")))
        }
    }

    /// Ratio for a conv at `depth` out of `max_depth` in its core. `None`
    /// means the partition rule applies instead.
    pub fn layer_ratio(&self, depth: usize, max_depth: usize) -> Option<f64> {
        let t = if max_depth == 0 {
            0.0
        } else {
            depth as f64 / max_depth as f64
        };
        match *self {
            FreezeScheme::Uniform { rho } => Some(rho),
            FreezeScheme::RampDown { first, last } => {
                let (hi, lo) = (first.max(last), first.min(last));
                Some(hi + (lo - hi) * t)
            }
            FreezeScheme::RampUp { first, last } => {
                let (lo, hi) = (first.min(last), first.max(last));
                Some(lo + (hi - lo) * t)
            }
            FreezeScheme::CorePartition => None,
        }
    }
}

/// Per-tensor freeze masks, `true` = frozen. Only backbone conv kernels can
/// ever be frozen; BN affine, alpha logits and the head always train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub scheme: FreezeScheme,
    pub seed: u64,
    pub masks: Vec<Vec<bool>>,
    /// Conv-weights-only ratio over all three cores.
    pub effective_ratio: f64,
}

impl FreezePlan {
    /// Nothing frozen.
    pub fn none(graph: &ExecGraph) -> Self {
        make_freeze_plan(graph, FreezeScheme::Uniform { rho: 0.0 }, 0)
            .expect("zero ratio is always valid")
    }

    pub fn frozen_count(&self, tensor: usize) -> usize {
        self.masks[tensor].iter().filter(|&&m| m).count()
    }

    pub fn total_frozen(&self) -> usize {
        (0..self.masks.len()).map(|t| self.frozen_count(t)).sum()
    }

    pub fn check(&self, graph: &ExecGraph) -> Result<()> {
        let congruent = self.masks.len() == graph.params.len()
            && self
                .masks
                .iter()
                .zip(&graph.params)
                .all(|(m, d)| m.len() == d.numel());
        if congruent {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("freeze plan does not match the graph".into()))
        }
    }

    /// Per-tensor ratios of the backbone conv kernels, for summaries.
    pub fn layer_ratios(&self, graph: &ExecGraph) -> Vec<(String, f64)> {
        graph
            .params
            .iter()
            .enumerate()
            .filter(|(_, d)| d.kind.is_backbone_conv())
            .map(|(i, d)| (d.id.clone(), self.frozen_count(i) as f64 / d.numel() as f64))
            .collect()
    }
}

pub fn make_freeze_plan(graph: &ExecGraph, scheme: FreezeScheme, seed: u64) -> Result<FreezePlan> {
    scheme.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_depth = Core::ALL.map(|c| graph.max_depth(c));
    let masks = graph
        .params
        .iter()
        .map(|d| {
            let n = d.numel();
            let Role::Core(core) = d.role else {
                return vec![false; n];
            };
            if !d.kind.is_backbone_conv() {
                return vec![false; n];
            }
            match scheme.layer_ratio(d.depth, max_depth[core.index()]) {
                None => vec![core == Core::Frozen; n],
                Some(rho) => {
                    let k = ((rho * n as f64).ceil() as usize).min(n);
                    let mut m = vec![false; n];
                    for i in sample(&mut rng, n, k) {
                        m[i] = true;
                    }
                    m
                }
            }
        })
        .collect();
    let mut plan = FreezePlan {
        scheme,
        seed,
        masks,
        effective_ratio: 0.0,
    };
    plan.effective_ratio = effective_ratio(&plan, graph, CoreSet::ALL);
    Ok(plan)
}

/// Frozen conv weights over all conv weights reachable by `cores`, counting a
/// tensor once per use in the unrolled graph. BN, alpha and head excluded.
pub fn effective_ratio(plan: &FreezePlan, graph: &ExecGraph, cores: CoreSet) -> f64 {
    let (mut frozen, mut total) = (0usize, 0usize);
    for node in &graph.nodes {
        let Role::Core(core) = node.role else { continue };
        if !cores.contains(core) {
            continue;
        }
        let weight = match node.op {
            Op::StemConv { weight, .. } | Op::Depthwise { weight, .. } | Op::Pointwise { weight, .. } => weight,
            _ => continue,
        };
        frozen += plan.frozen_count(weight);
        total += graph.params[weight].numel();
    }
    if total == 0 {
        0.0
    } else {
        frozen as f64 / total as f64
    }
}

/// Zero every gradient entry at a frozen position.
pub fn mask_gradients(grads: &mut GradientSet, plan: &FreezePlan) -> Result<()> {
    let congruent = grads.grads.len() == plan.masks.len()
        && grads.grads.iter().zip(&plan.masks).all(|(g, m)| g.len() == m.len());
    if !congruent {
        return Err(Error::ShapeMismatch("gradients do not match the freeze plan".into()));
    }
    for (g, m) in grads.grads.iter_mut().zip(&plan.masks) {
        for (v, &frozen) in g.iter_mut().zip(m) {
            if frozen {
                *v = 0.0;
            }
        }
    }
    Ok(())
}
