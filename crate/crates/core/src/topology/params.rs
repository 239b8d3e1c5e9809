use serde::{Deserialize, Serialize};

use super::graph::{build_graph, ExecGraph, Node, Op, ParamKind, Role};
use super::spec::{Core, NetworkSpec, TensorShape};
use crate::error::Result;

/// Parameter counts per category over the logical (unrolled) graph. A tensor
/// read by several repetitions is counted once per use. BN moving statistics
/// are not parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamPartition {
    pub frozen_conv: usize,
    pub trainable_conv_per_core: usize,
    pub alpha: usize,
    pub frozen_core_bn_affine: usize,
    pub trainable_bn: usize,
    pub head: usize,
}

impl ParamPartition {
    pub fn total(&self) -> usize {
        self.frozen_conv
            + 2 * self.trainable_conv_per_core
            + self.alpha
            + self.frozen_core_bn_affine
            + self.trainable_bn
            + self.head
    }

    /// Conv-weights-only freezing ratio with one trainable core active.
    pub fn single_core_ratio(&self) -> f64 {
        ratio(self.frozen_conv, self.trainable_conv_per_core)
    }

    /// Conv-weights-only freezing ratio with both trainable cores active.
    pub fn two_core_ratio(&self) -> f64 {
        ratio(self.frozen_conv, 2 * self.trainable_conv_per_core)
    }
}

fn ratio(frozen: usize, trainable: usize) -> f64 {
    if frozen + trainable == 0 {
        return 0.0;
    }
    frozen as f64 / (frozen + trainable) as f64
}

/// Weights and biases of a pointwise convolution.
pub fn pointwise_param_count(cin: usize, cout: usize, groups: usize, bias: bool) -> (usize, usize) {
    (cin / groups * cout, if bias { cout } else { 0 })
}

pub fn depthwise_param_count(channels: usize) -> usize {
    channels * 9
}

pub fn count_params(spec: &NetworkSpec) -> Result<ParamPartition> {
    Ok(count_graph(&build_graph(spec)?, |_| true))
}

/// Partition restricted to the nodes accepted by `keep`.
pub fn count_graph(graph: &ExecGraph, keep: impl Fn(&Node) -> bool) -> ParamPartition {
    let mut p = ParamPartition::default();
    for node in graph.nodes.iter().filter(|n| keep(n)) {
        let mut tensors = Vec::new();
        match &node.op {
            Op::StemConv { weight, .. } | Op::Depthwise { weight, .. } => tensors.push(*weight),
            Op::Pointwise { weight, bias, .. } => {
                tensors.push(*weight);
                tensors.extend(bias);
            }
            Op::BatchNorm { bn, .. } => {
                let bn = &graph.batch_norms[*bn];
                tensors.extend([bn.gamma, bn.beta]);
            }
            Op::Blend { logits, .. } => tensors.push(*logits),
            _ => {}
        }
        for t in tensors {
            let decl = &graph.params[t];
            let n = decl.numel();
            match (decl.kind, decl.role) {
                (k, Role::Core(Core::Frozen)) if k.is_backbone_conv() => p.frozen_conv += n,
                (k, Role::Core(Core::Trainable1)) if k.is_backbone_conv() => {
                    p.trainable_conv_per_core += n
                }
                (k, Role::Core(Core::Trainable2)) if k.is_backbone_conv() => {}
                (ParamKind::AlphaLogit, _) => p.alpha += n,
                (ParamKind::BnGamma | ParamKind::BnBeta, Role::Core(Core::Frozen)) => {
                    p.frozen_core_bn_affine += n
                }
                (ParamKind::BnGamma | ParamKind::BnBeta, _) => p.trainable_bn += n,
                (ParamKind::HeadWeight | ParamKind::HeadBias, _) => p.head += n,
                _ => {}
            }
        }
    }
    p
}

/// Multiply count of one node at the graph's nominal resolution.
pub fn node_macs(graph: &ExecGraph, node: &Node) -> u64 {
    let shape = |s: usize| -> TensorShape { graph.slot_shapes[s] };
    let n = match &node.op {
        Op::StemConv { input, output, .. } => shape(*output).numel() * shape(*input).channels * 9,
        Op::Depthwise { output, .. } => shape(*output).numel() * 9,
        Op::Pointwise {
            input,
            output,
            groups,
            ..
        } => shape(*output).numel() * (shape(*input).channels / groups),
        Op::BatchNorm { output, .. } => shape(*output).numel(),
        Op::Blend { output, .. } => 2 * shape(*output).numel(),
        _ => 0,
    };
    n as u64
}

pub fn graph_macs(graph: &ExecGraph, keep: impl Fn(&Node) -> bool) -> u64 {
    graph
        .nodes
        .iter()
        .filter(|n| keep(n))
        .map(|n| node_macs(graph, n))
        .sum()
}
