//! Graph interpreter: forward pass over the nodes needed by the current head
//! binding, and the matching reverse pass.

use serde::{Deserialize, Serialize};

use super::ops::{self, BnCache};
use super::state::{ModelState, BN_EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::quant::pwl::eval_pwl;
use crate::topology::{Core, ExecGraph, Op, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Which core output feeds the head, and whether both trainable cores work
/// for it together (which is what enables the cross-core shuffle).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub head: Core,
    pub joint: bool,
}

impl Binding {
    pub const FROZEN: Binding = Binding {
        head: Core::Frozen,
        joint: false,
    };

    pub fn single(core: Core) -> Self {
        Self {
            head: core,
            joint: false,
        }
    }

    pub fn joint(core: Core) -> Self {
        Self {
            head: core,
            joint: true,
        }
    }
}

/// Batch norm statistics used in training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Every layer normalizes with batch statistics.
    BatchStats,
    /// Frozen-core layers keep their pretrained moving statistics.
    FrozenCoreFixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub mode: Mode,
    pub binding: Binding,
    pub bn_policy: BnPolicy,
    /// Run every node, not only those feeding the bound head.
    pub compute_all: bool,
}

impl ExecOptions {
    pub fn eval(binding: Binding) -> Self {
        Self {
            mode: Mode::Eval,
            binding,
            bn_policy: BnPolicy::BatchStats,
            compute_all: false,
        }
    }

    pub fn train(binding: Binding, bn_policy: BnPolicy) -> Self {
        Self {
            mode: Mode::Train,
            binding,
            bn_policy,
            compute_all: false,
        }
    }

    fn batch_stats_for(&self, role: Role) -> bool {
        self.mode == Mode::Train
            && !(self.bn_policy == BnPolicy::FrozenCoreFixed && role == Role::Core(Core::Frozen))
    }
}

/// Retained activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub options: ExecOptions,
    pub slots: Vec<Option<Tensor>>,
    pub executed: Vec<bool>,
    bn_caches: Vec<Option<BnCache<f32>>>,
}

impl Forward {
    pub fn output(&self, graph: &ExecGraph) -> &Tensor {
        self.slots[graph.output].as_ref().expect("output slot is always computed")
    }

    pub fn slot(&self, id: usize) -> Option<&Tensor> {
        self.slots[id].as_ref()
    }

    /// Batch statistics `(mean, var)` of each layer that normalized with them.
    pub fn batch_stats(&self, bn: usize) -> Option<(&[f32], &[f32])> {
        self.bn_caches[bn]
            .as_ref()
            .map(|c| (c.mean.as_slice(), c.var.as_slice()))
    }
}

/// One gradient per parameter tensor. `touched` marks tensors reached by the
/// reverse pass; untouched tensors are left alone by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<Vec<f32>>,
    pub touched: Vec<bool>,
}

impl GradientSet {
    pub fn zeros(state: &ModelState) -> Self {
        Self {
            grads: state.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            touched: vec![false; state.params.len()],
        }
    }

    fn add(&mut self, id: usize, g: &[f32]) {
        for (a, &b) in self.grads[id].iter_mut().zip(g) {
            *a += b;
        }
        self.touched[id] = true;
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|&v| v == 0.0))
    }

    pub fn l1(&self, id: usize) -> f64 {
        self.grads[id].iter().map(|v| v.abs() as f64).sum()
    }
}

/// Nodes that contribute to the output under `options`.
pub fn live_nodes(graph: &ExecGraph, options: &ExecOptions) -> Vec<bool> {
    let mut need = vec![false; graph.slot_shapes.len()];
    let mut live = vec![false; graph.nodes.len()];
    if options.compute_all {
        for (i, node) in graph.nodes.iter().enumerate() {
            live[i] = !node.op.outputs().is_empty();
        }
        return live;
    }
    need[graph.output] = true;
    for (i, node) in graph.nodes.iter().enumerate().rev() {
        let outs = node.op.outputs();
        if !outs.iter().any(|&s| need[s]) {
            continue;
        }
        live[i] = true;
        match &node.op {
            Op::SelectHead { sources, .. } => need[sources[options.binding.head.index()]] = true,
            Op::CrossShuffle {
                a, b, out_a, out_b, ..
            } if !options.binding.joint => {
                need[*a] |= need[*out_a];
                need[*b] |= need[*out_b];
            }
            op => {
                for s in op.inputs() {
                    need[s] = true;
                }
            }
        }
    }
    live
}

fn take<'a>(slots: &'a [Option<Tensor>], id: usize) -> Result<&'a Tensor> {
    slots[id]
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch(format!("slot {id} read before it was written")))
}

pub fn forward_pass(
    graph: &ExecGraph,
    state: &ModelState,
    input: &Tensor,
    options: ExecOptions,
) -> Result<Forward> {
    state.check(graph)?;
    let in_shape = graph.slot_shapes[graph.input];
    if input.c != in_shape.channels || input.n == 0 || input.h == 0 || input.w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not fit {in_shape}",
            input.dims()
        )));
    }
    let live = live_nodes(graph, &options);
    let mut slots: Vec<Option<Tensor>> = vec![None; graph.slot_shapes.len()];
    let mut bn_caches = vec![None; graph.batch_norms.len()];
    slots[graph.input] = Some(input.clone());
    let p = |id: usize| state.params[id].data.as_slice();

    for (i, node) in graph.nodes.iter().enumerate() {
        if !live[i] {
            continue;
        }
        match &node.op {
            Op::StemConv {
                input,
                output,
                weight,
                stride,
            } => {
                let x = take(&slots, *input)?;
                let cout = graph.params[*weight].shape[0];
                slots[*output] = Some(ops::conv3x3(x, p(*weight), cout, *stride)?);
            }
            Op::Depthwise {
                input,
                output,
                weight,
                stride,
            } => {
                let y = ops::depthwise3x3(take(&slots, *input)?, p(*weight), *stride)?;
                slots[*output] = Some(y);
            }
            Op::Pointwise {
                input,
                output,
                weight,
                bias,
                groups,
            } => {
                let cout = graph.params[*weight].shape[0];
                let y = ops::pointwise(take(&slots, *input)?, p(*weight), bias.map(p), cout, *groups)?;
                slots[*output] = Some(y);
            }
            Op::BatchNorm { input, output, bn } => {
                let decl = &graph.batch_norms[*bn];
                let x = take(&slots, *input)?;
                let (gamma, beta) = (p(decl.gamma), p(decl.beta));
                let y = if options.batch_stats_for(decl.role) {
                    let (y, cache) = ops::batch_norm_train(x, gamma, beta, BN_EPS);
                    bn_caches[*bn] = Some(cache);
                    y
                } else {
                    let st = &state.bn_stats[*bn];
                    ops::batch_norm_eval(x, gamma, beta, &st.mean, &st.var, BN_EPS)
                };
                slots[*output] = Some(y);
            }
            Op::Relu { input, output } => {
                slots[*output] = Some(ops::relu(take(&slots, *input)?));
            }
            Op::Split {
                input,
                first,
                second,
            } => {
                let x = take(&slots, *input)?;
                let (a, b) = ops::split_channels(x, x.c / 2);
                slots[*first] = Some(a);
                slots[*second] = Some(b);
            }
            Op::Concat {
                first,
                second,
                output,
            } => {
                let y = ops::concat_channels(take(&slots, *first)?, take(&slots, *second)?)?;
                slots[*output] = Some(y);
            }
            Op::Shuffle {
                input,
                output,
                groups,
            } => {
                slots[*output] = Some(ops::channel_shuffle(take(&slots, *input)?, *groups)?);
            }
            Op::Blend {
                frozen,
                trainable,
                output,
                logits,
            } => {
                let y = ops::alpha_blend(take(&slots, *frozen)?, take(&slots, *trainable)?, p(*logits))?;
                slots[*output] = Some(y);
            }
            Op::CrossShuffle { a, b, out_a, out_b } => {
                if options.binding.joint {
                    let (ya, yb) = ops::cross_core_shuffle(take(&slots, *a)?, take(&slots, *b)?)?;
                    slots[*out_a] = Some(ya);
                    slots[*out_b] = Some(yb);
                } else {
                    slots[*out_a] = slots[*a].clone();
                    slots[*out_b] = slots[*b].clone();
                }
            }
            Op::SelectHead { sources, output } => {
                let src = sources[options.binding.head.index()];
                slots[*output] = Some(take(&slots, src)?.clone());
            }
            Op::GlobalAvgPool { input, output } => {
                slots[*output] = Some(ops::global_avg_pool(take(&slots, *input)?));
            }
            Op::Activation { input, output, pwl } => {
                let mut y = take(&slots, *input)?.clone();
                for v in &mut y.data {
                    *v = eval_pwl(pwl, *v as f64) as f32;
                }
                slots[*output] = Some(y);
            }
            Op::ReloadBoundary => {}
        }
    }
    Ok(Forward {
        options,
        slots,
        executed: live,
        bn_caches,
    })
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Reverse pass from `d_output` (gradient of the loss at the graph output).
/// Every tensor on the executed path receives a gradient, frozen or not.
pub fn backward_pass(
    graph: &ExecGraph,
    state: &ModelState,
    fwd: &Forward,
    d_output: &Tensor,
) -> Result<GradientSet> {
    let out = fwd.output(graph);
    if !out.same_dims(d_output) {
        return Err(Error::ShapeMismatch(format!(
            "output gradient {:?} vs output {:?}",
            d_output.dims(),
            out.dims()
        )));
    }
    let mut gs = GradientSet::zeros(state);
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.slot_shapes.len()];
    grads[graph.output] = Some(d_output.clone());
    let p = |id: usize| state.params[id].data.as_slice();
    let x = |id: usize| take(&fwd.slots, id);

    for (i, node) in graph.nodes.iter().enumerate().rev() {
        if !fwd.executed[i] {
            continue;
        }
        match &node.op {
            Op::StemConv {
                input,
                output,
                weight,
                stride,
            } => {
                let Some(dy) = grads[*output].take() else { continue };
                let (dx, dw) = ops::conv3x3_backward(x(*input)?, p(*weight), *stride, &dy);
                gs.add(*weight, &dw);
                accumulate(&mut grads, *input, dx);
            }
            Op::Depthwise {
                input,
                output,
                weight,
                stride,
            } => {
                let Some(dy) = grads[*output].take() else { continue };
                let (dx, dw) = ops::depthwise3x3_backward(x(*input)?, p(*weight), *stride, &dy);
                gs.add(*weight, &dw);
                accumulate(&mut grads, *input, dx);
            }
            Op::Pointwise {
                input,
                output,
                weight,
                bias,
                groups,
            } => {
                let Some(dy) = grads[*output].take() else { continue };
                let (dx, dw, db) = ops::pointwise_backward(x(*input)?, p(*weight), *groups, &dy);
                gs.add(*weight, &dw);
                if let Some(b) = bias {
                    gs.add(*b, &db);
                }
                accumulate(&mut grads, *input, dx);
            }
            Op::BatchNorm { input, output, bn } => {
                let Some(dy) = grads[*output].take() else { continue };
                let decl = &graph.batch_norms[*bn];
                let gamma = p(decl.gamma);
                let (dx, dg, db) = match &fwd.bn_caches[*bn] {
                    Some(cache) => ops::batch_norm_train_backward(&dy, gamma, cache),
                    None => {
                        let st = &state.bn_stats[*bn];
                        ops::batch_norm_eval_backward(x(*input)?, &dy, gamma, &st.mean, &st.var, BN_EPS)
                    }
                };
                gs.add(decl.gamma, &dg);
                gs.add(decl.beta, &db);
                accumulate(&mut grads, *input, dx);
            }
            Op::Relu { input, output } => {
                let Some(dy) = grads[*output].take() else { continue };
                accumulate(&mut grads, *input, ops::relu_backward(x(*input)?, &dy));
            }
            Op::Split {
                input,
                first,
                second,
            } => {
                let (ga, gb) = (grads[*first].take(), grads[*second].take());
                if ga.is_none() && gb.is_none() {
                    continue;
                }
                let (a, b) = (x(*first)?, x(*second)?);
                let ga = ga.unwrap_or_else(|| Tensor::zeros_like(a));
                let gb = gb.unwrap_or_else(|| Tensor::zeros_like(b));
                accumulate(&mut grads, *input, ops::concat_channels(&ga, &gb)?);
            }
            Op::Concat {
                first,
                second,
                output,
            } => {
                let Some(dy) = grads[*output].take() else { continue };
                let (ga, gb) = ops::split_channels(&dy, x(*first)?.c);
                accumulate(&mut grads, *first, ga);
                accumulate(&mut grads, *second, gb);
            }
            Op::Shuffle {
                input,
                output,
                groups,
            } => {
                let Some(dy) = grads[*output].take() else { continue };
                accumulate(&mut grads, *input, ops::channel_unshuffle(&dy, *groups)?);
            }
            Op::Blend {
                frozen,
                trainable,
                output,
                logits,
            } => {
                let Some(dy) = grads[*output].take() else { continue };
                let (dxf, dxt, dw) = ops::alpha_blend_backward(x(*frozen)?, x(*trainable)?, p(*logits), &dy);
                gs.add(*logits, &dw);
                accumulate(&mut grads, *frozen, dxf);
                accumulate(&mut grads, *trainable, dxt);
            }
            Op::CrossShuffle { a, b, out_a, out_b } => {
                let (ga, gb) = (grads[*out_a].take(), grads[*out_b].take());
                if fwd.options.binding.joint {
                    if ga.is_none() && gb.is_none() {
                        continue;
                    }
                    let shape = x(*a)?;
                    let ga = ga.unwrap_or_else(|| Tensor::zeros_like(shape));
                    let gb = gb.unwrap_or_else(|| Tensor::zeros_like(shape));
                    let (da, db) = ops::cross_core_shuffle(&ga, &gb)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                } else {
                    if let Some(g) = ga {
                        accumulate(&mut grads, *a, g);
                    }
                    if let Some(g) = gb {
                        accumulate(&mut grads, *b, g);
                    }
                }
            }
            Op::SelectHead { sources, output } => {
                let Some(dy) = grads[*output].take() else { continue };
                accumulate(&mut grads, sources[fwd.options.binding.head.index()], dy);
            }
            Op::GlobalAvgPool { input, output } => {
                let Some(dy) = grads[*output].take() else { continue };
                accumulate(&mut grads, *input, ops::global_avg_pool_backward(x(*input)?, &dy));
            }
            Op::Activation { input, output, pwl } => {
                let Some(mut dy) = grads[*output].take() else { continue };
                for (d, &v) in dy.data.iter_mut().zip(&x(*input)?.data) {
                    *d *= pwl.derivative(v as f64) as f32;
                }
                accumulate(&mut grads, *input, dy);
            }
            Op::ReloadBoundary => {}
        }
    }
    Ok(gs)
}
