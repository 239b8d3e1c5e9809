//! Conversion of a trained float model into the int8 fixed-scaler network.

use serde::{Deserialize, Serialize};

use super::csd::{encode_csd, CsdCode};
use super::fixed::{exponent_for, quantize, QuantParams};
use crate::engine::ops::sigmoid;
use crate::engine::state::BN_EPS;
use crate::engine::{forward_pass, Binding, BnPolicy, ExecOptions, Mode, ModelState, Tensor};
use crate::error::{Error, Result};
use crate::freezing::FreezePlan;
use crate::quant::pwl::eval_pwl;
use crate::topology::{ExecGraph, Op, Role, TensorShape, TopologyHash};

/// Exponent of the two blend coefficients `alpha` and `1 - alpha`.
pub const BLEND_EXPONENT: i32 = -7;

/// Int8 feature map of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QTensor {
    pub shape: TensorShape,
    pub data: Vec<i8>,
    pub params: QuantParams,
}

impl QTensor {
    /// Quantize item `index` of a float batch.
    pub fn from_tensor(t: &Tensor, index: usize, params: QuantParams) -> Self {
        let per = t.c * t.plane_len();
        let data = t.data[index * per..(index + 1) * per]
            .iter()
            .map(|&v| quantize(v as f64, params))
            .collect();
        Self {
            shape: TensorShape::new(t.c, t.h, t.w),
            data,
            params,
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let step = self.params.step();
        self.data.iter().map(|&q| (q as f64 * step) as f32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Full { stride: usize },
    Depthwise { stride: usize },
    Pointwise { groups: usize },
}

/// Quantized kernel of one conv: frozen entries are CSD scalers (zeros
/// pruned, so absent), trainable entries stay int8 multiplier operands.
/// Both lists are `(flat index, value)` in index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QConvWeights {
    pub shape: Vec<usize>,
    pub exponent: i32,
    pub frozen: Vec<(u32, CsdCode)>,
    pub trainable: Vec<(u32, i8)>,
    /// Frozen entries that quantized to zero and were dropped.
    pub pruned: usize,
}

impl QConvWeights {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn adder_count(&self) -> usize {
        self.frozen.iter().map(|(_, c)| c.adder_cost()).sum()
    }

    /// Integer weight at every position (frozen ones decoded).
    pub fn dense(&self) -> Vec<i32> {
        let mut w = vec![0i32; self.numel()];
        for (i, c) in &self.frozen {
            w[*i as usize] = c.decode();
        }
        for (i, q) in &self.trainable {
            w[*i as usize] = *q as i32;
        }
        w
    }
}

/// Batch norm folded to a per-channel int8 scale (own exponent each) and an
/// integer shift at the scaled accumulator's exponent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldedBn {
    pub scale: Vec<i8>,
    pub scale_exponent: Vec<i32>,
    pub shift: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum QOp {
    Conv {
        kind: ConvKind,
        input: usize,
        output: usize,
        weights: QConvWeights,
        bn: Option<FoldedBn>,
        /// Head bias at the accumulator exponent.
        bias: Option<Vec<i32>>,
    },
    Relu {
        input: usize,
        output: usize,
    },
    Split {
        input: usize,
        first: usize,
        second: usize,
    },
    Concat {
        first: usize,
        second: usize,
        output: usize,
    },
    Shuffle {
        input: usize,
        output: usize,
        groups: usize,
    },
    Blend {
        frozen: usize,
        trainable: usize,
        output: usize,
        alpha: Vec<i8>,
        complement: Vec<i8>,
    },
    CrossShuffle {
        a: usize,
        b: usize,
        out_a: usize,
        out_b: usize,
    },
    Select {
        sources: [usize; 3],
        output: usize,
    },
    GlobalAvgPool {
        input: usize,
        output: usize,
    },
    /// Head activation as a table over every int8 input value.
    Lookup {
        input: usize,
        output: usize,
        table: Vec<i8>,
    },
}

impl QOp {
    pub fn inputs(&self) -> Vec<usize> {
        match self {
            QOp::Conv { input, .. }
            | QOp::Relu { input, .. }
            | QOp::Split { input, .. }
            | QOp::Shuffle { input, .. }
            | QOp::GlobalAvgPool { input, .. }
            | QOp::Lookup { input, .. } => vec![*input],
            QOp::Concat { first, second, .. } => vec![*first, *second],
            QOp::Blend {
                frozen, trainable, ..
            } => vec![*frozen, *trainable],
            QOp::CrossShuffle { a, b, .. } => vec![*a, *b],
            QOp::Select { sources, .. } => sources.to_vec(),
        }
    }

    pub fn outputs(&self) -> Vec<usize> {
        match self {
            QOp::Conv { output, .. }
            | QOp::Relu { output, .. }
            | QOp::Concat { output, .. }
            | QOp::Shuffle { output, .. }
            | QOp::Blend { output, .. }
            | QOp::Select { output, .. }
            | QOp::GlobalAvgPool { output, .. }
            | QOp::Lookup { output, .. } => vec![*output],
            QOp::Split { first, second, .. } => vec![*first, *second],
            QOp::CrossShuffle { out_a, out_b, .. } => vec![*out_a, *out_b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QLayer {
    pub name: String,
    pub role: Role,
    pub rep: usize,
    pub op: QOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QGraph {
    pub topology: TopologyHash,
    pub binding: Binding,
    pub input: usize,
    pub output: usize,
    /// Exponent of every slot that carries an int8 feature map.
    pub exponents: Vec<Option<i32>>,
    pub layers: Vec<QLayer>,
}

/// Scaler and multiplier census of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCensus {
    pub name: String,
    pub role: Role,
    pub rep: usize,
    pub scalers: usize,
    pub adders: usize,
    pub pruned: usize,
    pub multipliers: usize,
}

impl QGraph {
    pub fn input_params(&self) -> QuantParams {
        QuantParams::new(self.exponents[self.input].expect("input exponent is calibrated"))
    }

    pub fn census(&self) -> Vec<LayerCensus> {
        self.layers
            .iter()
            .filter_map(|l| match &l.op {
                QOp::Conv { weights, .. } => Some(LayerCensus {
                    name: l.name.clone(),
                    role: l.role,
                    rep: l.rep,
                    scalers: weights.frozen.len(),
                    adders: weights.adder_count(),
                    pruned: weights.pruned,
                    multipliers: weights.trainable.len(),
                }),
                _ => None,
            })
            .collect()
    }
}

fn unquantizable(what: impl Into<String>) -> Error {
    Error::Unquantizable(what.into())
}

fn quantize_weights(values: &[f32], shape: &[usize], mask: &[bool]) -> QConvWeights {
    let max_abs = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let params = QuantParams::new(exponent_for(max_abs));
    let (mut frozen, mut trainable, mut pruned) = (Vec::new(), Vec::new(), 0);
    for (i, (&v, &f)) in values.iter().zip(mask).enumerate() {
        let q = quantize(v as f64, params);
        if f {
            if q == 0 {
                pruned += 1;
            } else {
                frozen.push((i as u32, encode_csd(q)));
            }
        } else {
            trainable.push((i as u32, q));
        }
    }
    QConvWeights {
        shape: shape.to_vec(),
        exponent: params.exponent,
        frozen,
        trainable,
        pruned,
    }
}

fn to_i32(v: f64, layer: &str) -> Result<i32> {
    let r = v.round_ties_even();
    if r.abs() > i32::MAX as f64 {
        return Err(Error::AccumulatorOverflow {
            layer: layer.to_string(),
        });
    }
    Ok(r as i32)
}

/// Quantize a trained model. Every node is converted (all three cores), so
/// the result also describes the full hardware; `binding` fixes which core
/// the head reads and whether the cross-core shuffle runs. Activation
/// exponents come from max-abs over the calibration batches.
pub fn build_qgraph(
    graph: &ExecGraph,
    state: &ModelState,
    plan: &FreezePlan,
    binding: Binding,
    calibration: &[Tensor],
) -> Result<QGraph> {
    state.check(graph)?;
    plan.check(graph)?;
    if let Some(p) = state.params.iter().find(|p| p.data.iter().any(|v| !v.is_finite())) {
        return Err(unquantizable(format!("non-finite value in {}", p.id)));
    }
    if state.bn_stats.iter().any(|s| s.mean.iter().chain(&s.var).any(|v| !v.is_finite())) {
        return Err(unquantizable("non-finite batch norm statistics"));
    }
    if calibration.is_empty() {
        return Err(Error::InvalidArgument("at least one calibration batch is needed".into()));
    }

    let mut max_abs = vec![None::<f64>; graph.slot_shapes.len()];
    let options = ExecOptions {
        mode: Mode::Eval,
        binding,
        bn_policy: BnPolicy::BatchStats,
        compute_all: true,
    };
    for batch in calibration {
        let fwd = forward_pass(graph, state, batch, options)?;
        for (s, t) in fwd.slots.iter().enumerate() {
            if let Some(t) = t {
                if !t.all_finite() {
                    return Err(unquantizable(format!("non-finite activation at slot {s}")));
                }
                let m = t.data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
                max_abs[s] = Some(max_abs[s].map_or(m, |old: f64| old.max(m)));
            }
        }
    }
    let exponents: Vec<Option<i32>> = max_abs.iter().map(|m| m.map(exponent_for)).collect();
    let exp = |s: usize| exponents[s].ok_or_else(|| unquantizable(format!("slot {s} never computed")));

    let mut layers = Vec::new();
    let mut fused_bn = vec![false; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        if fused_bn[i] || matches!(node.op, Op::ReloadBoundary) {
            continue;
        }
        let name = format!("n{i}.{}", node.op.name());
        let op = match &node.op {
            Op::StemConv {
                input,
                output,
                weight,
                stride,
            }
            | Op::Depthwise {
                input,
                output,
                weight,
                stride,
            } => {
                let kind = if matches!(node.op, Op::StemConv { .. }) {
                    ConvKind::Full { stride: *stride }
                } else {
                    ConvKind::Depthwise { stride: *stride }
                };
                conv_layer(graph, state, plan, i, kind, *input, *output, *weight, None, &exp, &mut fused_bn, &name)?
            }
            Op::Pointwise {
                input,
                output,
                weight,
                bias,
                groups,
            } => conv_layer(
                graph,
                state,
                plan,
                i,
                ConvKind::Pointwise { groups: *groups },
                *input,
                *output,
                *weight,
                *bias,
                &exp,
                &mut fused_bn,
                &name,
            )?,
            Op::BatchNorm { .. } => {
                return Err(unquantizable(format!("{name} does not follow a convolution")));
            }
            Op::Relu { input, output } => QOp::Relu {
                input: *input,
                output: *output,
            },
            Op::Split {
                input,
                first,
                second,
            } => QOp::Split {
                input: *input,
                first: *first,
                second: *second,
            },
            Op::Concat {
                first,
                second,
                output,
            } => QOp::Concat {
                first: *first,
                second: *second,
                output: *output,
            },
            Op::Shuffle {
                input,
                output,
                groups,
            } => QOp::Shuffle {
                input: *input,
                output: *output,
                groups: *groups,
            },
            Op::Blend {
                frozen,
                trainable,
                output,
                logits,
            } => {
                let p = QuantParams::new(BLEND_EXPONENT);
                let alphas: Vec<f64> = state.params[*logits].data.iter().map(|&w| sigmoid(w as f64)).collect();
                QOp::Blend {
                    frozen: *frozen,
                    trainable: *trainable,
                    output: *output,
                    alpha: alphas.iter().map(|&a| quantize(a, p)).collect(),
                    complement: alphas.iter().map(|&a| quantize(1.0 - a, p)).collect(),
                }
            }
            Op::CrossShuffle { a, b, out_a, out_b } => QOp::CrossShuffle {
                a: *a,
                b: *b,
                out_a: *out_a,
                out_b: *out_b,
            },
            Op::SelectHead { sources, output } => QOp::Select {
                sources: *sources,
                output: *output,
            },
            Op::GlobalAvgPool { input, output } => QOp::GlobalAvgPool {
                input: *input,
                output: *output,
            },
            Op::Activation { input, output, pwl } => {
                let (ein, eout) = (QuantParams::new(exp(*input)?), QuantParams::new(exp(*output)?));
                let table = (-127i32..=127)
                    .map(|q| quantize(eval_pwl(pwl, q as f64 * ein.step()), eout))
                    .collect();
                QOp::Lookup {
                    input: *input,
                    output: *output,
                    table,
                }
            }
            Op::ReloadBoundary => unreachable!("skipped above"),
        };
        layers.push(QLayer {
            name,
            role: node.role,
            rep: node.rep,
            op,
        });
    }

    Ok(QGraph {
        topology: graph.topology,
        binding,
        input: graph.input,
        output: graph.output,
        exponents,
        layers,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_layer(
    graph: &ExecGraph,
    state: &ModelState,
    plan: &FreezePlan,
    i: usize,
    kind: ConvKind,
    input: usize,
    output: usize,
    weight: usize,
    bias: Option<usize>,
    exp: &dyn Fn(usize) -> Result<i32>,
    fused_bn: &mut [bool],
    name: &str,
) -> Result<QOp> {
    let decl = &graph.params[weight];
    let weights = quantize_weights(&state.params[weight].data, &decl.shape, &plan.masks[weight]);
    let acc_exp = weights.exponent + exp(input)?;
    let follower = graph.nodes.get(i + 1).and_then(|n| match n.op {
        Op::BatchNorm { input: bin, output: bout, bn } if bin == output => Some((bout, bn)),
        _ => None,
    });
    let (out_slot, bn) = match follower {
        Some((bout, b)) => {
            fused_bn[i + 1] = true;
            let bdecl = &graph.batch_norms[b];
            let st = &state.bn_stats[b];
            let gamma = &state.params[bdecl.gamma].data;
            let beta = &state.params[bdecl.beta].data;
            let mut folded = FoldedBn {
                scale: Vec::with_capacity(bdecl.channels),
                scale_exponent: Vec::with_capacity(bdecl.channels),
                shift: Vec::with_capacity(bdecl.channels),
            };
            for c in 0..bdecl.channels {
                let s = gamma[c] as f64 / (st.var[c] as f64 + BN_EPS as f64).sqrt();
                let t = beta[c] as f64 - s * st.mean[c] as f64;
                let es = exponent_for(s.abs());
                folded.scale.push(quantize(s, QuantParams::new(es)));
                folded.scale_exponent.push(es);
                folded.shift.push(to_i32(t * 2f64.powi(-(acc_exp + es)), name)?);
            }
            (bout, Some(folded))
        }
        None => (output, None),
    };
    let bias = match bias {
        Some(b) => Some(
            state.params[b]
                .data
                .iter()
                .map(|&v| to_i32(v as f64 * 2f64.powi(-acc_exp), name))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(QOp::Conv {
        kind,
        input,
        output: out_slot,
        weights,
        bn,
        bias,
    })
}
