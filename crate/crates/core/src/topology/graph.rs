//! Logical execution graph: the network description with every core instantiated and the
//! repeatable tail unrolled.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::shapes::ensure_valid;
use super::spec::{BlockSpec, Core, NetworkSpec, TensorShape, TopologyHash};
use crate::error::{Error, Result};
use crate::quant::pwl::{fit_pwl, sample_uniform, PwlFunction};

pub type SlotId = usize;
pub type ParamId = usize;
pub type BnId = usize;

/// Grid size used when fitting the head activation.
pub const HEAD_PWL_GRID: usize = 4097;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Core(Core),
    Head,
}

impl Role {
    pub fn core(self) -> Option<Core> {
        match self {
            Role::Core(c) => Some(c),
            Role::Head => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    StemConv,
    DepthwiseConv,
    PointwiseConv,
    HeadWeight,
    HeadBias,
    BnGamma,
    BnBeta,
    AlphaLogit,
}

impl ParamKind {
    /// Backbone convolution kernels: the only tensors a freeze plan may freeze.
    pub fn is_backbone_conv(self) -> bool {
        matches!(
            self,
            ParamKind::StemConv | ParamKind::DepthwiseConv | ParamKind::PointwiseConv
        )
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        use ParamKind::*;
        [
            StemConv,
            DepthwiseConv,
            PointwiseConv,
            HeadWeight,
            HeadBias,
            BnGamma,
            BnBeta,
            AlphaLogit,
        ]
        .get(tag as usize)
        .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub id: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub role: Role,
    pub fan_in: usize,
    /// Convolution depth index within the owning core (0 = closest to input).
    pub depth: usize,
    pub tail: bool,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of weights feeding one output channel of a convolution.
    pub fn per_channel(&self) -> usize {
        self.numel() / self.shape[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnDecl {
    pub id: String,
    pub channels: usize,
    pub role: Role,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Convolution whose output this layer normalizes.
    pub producer: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    StemConv {
        input: SlotId,
        output: SlotId,
        weight: ParamId,
        stride: usize,
    },
    Depthwise {
        input: SlotId,
        output: SlotId,
        weight: ParamId,
        stride: usize,
    },
    Pointwise {
        input: SlotId,
        output: SlotId,
        weight: ParamId,
        bias: Option<ParamId>,
        groups: usize,
    },
    BatchNorm {
        input: SlotId,
        output: SlotId,
        bn: BnId,
    },
    Relu {
        input: SlotId,
        output: SlotId,
    },
    Split {
        input: SlotId,
        first: SlotId,
        second: SlotId,
    },
    Concat {
        first: SlotId,
        second: SlotId,
        output: SlotId,
    },
    Shuffle {
        input: SlotId,
        output: SlotId,
        groups: usize,
    },
    Blend {
        frozen: SlotId,
        trainable: SlotId,
        output: SlotId,
        logits: ParamId,
    },
    /// Executed as a swap only when both trainable cores serve one task,
    /// otherwise it passes both inputs through.
    CrossShuffle {
        a: SlotId,
        b: SlotId,
        out_a: SlotId,
        out_b: SlotId,
    },
    SelectHead {
        sources: [SlotId; 3],
        output: SlotId,
    },
    GlobalAvgPool {
        input: SlotId,
        output: SlotId,
    },
    Activation {
        input: SlotId,
        output: SlotId,
        pwl: PwlFunction,
    },
    ReloadBoundary,
}

impl Op {
    pub fn inputs(&self) -> Vec<SlotId> {
        match self {
            Op::StemConv { input, .. }
            | Op::Depthwise { input, .. }
            | Op::Pointwise { input, .. }
            | Op::BatchNorm { input, .. }
            | Op::Relu { input, .. }
            | Op::Split { input, .. }
            | Op::Shuffle { input, .. }
            | Op::GlobalAvgPool { input, .. }
            | Op::Activation { input, .. } => vec![*input],
            Op::Concat { first, second, .. } => vec![*first, *second],
            Op::Blend {
                frozen, trainable, ..
            } => vec![*frozen, *trainable],
            Op::CrossShuffle { a, b, .. } => vec![*a, *b],
            Op::SelectHead { sources, .. } => sources.to_vec(),
            Op::ReloadBoundary => vec![],
        }
    }

    pub fn outputs(&self) -> Vec<SlotId> {
        match self {
            Op::StemConv { output, .. }
            | Op::Depthwise { output, .. }
            | Op::Pointwise { output, .. }
            | Op::BatchNorm { output, .. }
            | Op::Relu { output, .. }
            | Op::Concat { output, .. }
            | Op::Shuffle { output, .. }
            | Op::Blend { output, .. }
            | Op::SelectHead { output, .. }
            | Op::GlobalAvgPool { output, .. }
            | Op::Activation { output, .. } => vec![*output],
            Op::Split { first, second, .. } => vec![*first, *second],
            Op::CrossShuffle { out_a, out_b, .. } => vec![*out_a, *out_b],
            Op::ReloadBoundary => vec![],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::StemConv { .. } => "stem_conv",
            Op::Depthwise { .. } => "depthwise",
            Op::Pointwise { .. } => "pointwise",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Split { .. } => "split",
            Op::Concat { .. } => "concat",
            Op::Shuffle { .. } => "shuffle",
            Op::Blend { .. } => "alpha_blend",
            Op::CrossShuffle { .. } => "cross_core_shuffle",
            Op::SelectHead { .. } => "select_head",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Activation { .. } => "pwl_activation",
            Op::ReloadBoundary => "reload_boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub role: Role,
    pub module: Option<usize>,
    pub rep: usize,
    pub tail: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecGraph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamDecl>,
    pub batch_norms: Vec<BnDecl>,
    /// Shapes at the network's input resolution.
    pub slot_shapes: Vec<TensorShape>,
    pub input: SlotId,
    pub backbone: [SlotId; 3],
    pub head_input: SlotId,
    pub output: SlotId,
    pub repeats: usize,
    pub topology: TopologyHash,
}

impl ExecGraph {
    pub fn reload_boundaries(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::ReloadBoundary))
            .count()
    }

    pub fn param_index(&self, id: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.id == id)
    }

    /// Maximum conv depth index per core, for ramp interpolation.
    pub fn max_depth(&self, core: Core) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_backbone_conv() && p.role == Role::Core(core))
            .map(|p| p.depth)
            .max()
            .unwrap_or(0)
    }

    /// For each slot, the node that writes it.
    pub fn producers(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.slot_shapes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for s in node.op.outputs() {
                out[s] = Some(i);
            }
        }
        out
    }
}

/// The network with its tail modules executed `r` times. Repetition `i > 0`
/// gets its own trainable tensors, BN layers and alpha logits; frozen-core
/// convolution kernels are shared (they are hard-wired and cannot be
/// reloaded). Each extra repetition begins with a reload boundary.
pub fn unroll_repeats(spec: &NetworkSpec, r: usize) -> Result<ExecGraph> {
    if r == 0 {
        return Err(Error::ZeroRepeat);
    }
    let spec = spec.with_repeats(r);
    ensure_valid(&spec)?;
    let mut b = Builder::default();
    let input = b.slot(spec.input);

    let mut current = [input; 3];
    for core in Core::ALL {
        let ctx = Ctx {
            role: Role::Core(core),
            module: None,
            rep: 0,
            tail: false,
            prefix: format!("stem.{}", core.tag()),
        };
        current[core.index()] = b.stem(&ctx, input, spec.stem.out_channels, spec.stem.stride);
    }

    let tail_start = spec.tail_start();
    for m in 0..tail_start {
        current = b.module(&spec, m, 0, false, current);
    }
    for rep in 0..r {
        if rep > 0 {
            b.nodes.push(Node {
                op: Op::ReloadBoundary,
                role: Role::Core(Core::Trainable1),
                module: Some(tail_start),
                rep,
                tail: true,
            });
        }
        for m in tail_start..spec.modules.len() {
            current = b.module(&spec, m, rep, true, current);
        }
    }

    let backbone = current;
    let backbone_shape = b.slots[backbone[0]];
    let head_input = b.slot(backbone_shape);
    let head_ctx = Ctx {
        role: Role::Head,
        module: None,
        rep: 0,
        tail: false,
        prefix: "head".into(),
    };
    b.push(
        &head_ctx,
        Op::SelectHead {
            sources: backbone,
            output: head_input,
        },
    );
    let head = spec.head;
    let cin = backbone_shape.channels;
    let weight = b.param(
        &head_ctx,
        "head.weight",
        ParamKind::HeadWeight,
        vec![head.out_channels, cin / head.groups],
        cin / head.groups,
    );
    let bias = head.bias.then(|| {
        b.param(
            &head_ctx,
            "head.bias",
            ParamKind::HeadBias,
            vec![head.out_channels],
            1,
        )
    });
    let mut out = b.slot(TensorShape::new(
        head.out_channels,
        backbone_shape.height,
        backbone_shape.width,
    ));
    b.push(
        &head_ctx,
        Op::Pointwise {
            input: head_input,
            output: out,
            weight,
            bias,
            groups: head.groups,
        },
    );
    if head.global_pool {
        let pooled = b.slot(TensorShape::new(head.out_channels, 1, 1));
        b.push(
            &head_ctx,
            Op::GlobalAvgPool {
                input: out,
                output: pooled,
            },
        );
        out = pooled;
    }
    if let Some(act) = head.activation {
        let samples = sample_uniform(|x| act.function.eval(x), act.lo, act.hi, HEAD_PWL_GRID);
        let pwl = fit_pwl(&samples, act.segments)?;
        let shaped = b.slot(b.slots[out]);
        b.push(
            &head_ctx,
            Op::Activation {
                input: out,
                output: shaped,
                pwl,
            },
        );
        out = shaped;
    }

    Ok(ExecGraph {
        nodes: b.nodes,
        params: b.params,
        batch_norms: b.bns,
        slot_shapes: b.slots,
        input,
        backbone,
        head_input,
        output: out,
        repeats: r,
        topology: spec.topology_hash(),
    })
}

/// The graph at the network's own repeat count.
pub fn build_graph(spec: &NetworkSpec) -> Result<ExecGraph> {
    unroll_repeats(spec, spec.tail_repeat_count)
}

struct Ctx {
    role: Role,
    module: Option<usize>,
    rep: usize,
    tail: bool,
    prefix: String,
}

#[derive(Default)]
struct Builder {
    nodes: Vec<Node>,
    params: Vec<ParamDecl>,
    bns: Vec<BnDecl>,
    slots: Vec<TensorShape>,
    shared: HashMap<String, ParamId>,
    depth: [usize; 3],
}

impl Builder {
    fn slot(&mut self, shape: TensorShape) -> SlotId {
        self.slots.push(shape);
        self.slots.len() - 1
    }

    fn push(&mut self, ctx: &Ctx, op: Op) {
        self.nodes.push(Node {
            op,
            role: ctx.role,
            module: ctx.module,
            rep: ctx.rep,
            tail: ctx.tail,
        });
    }

    fn rep_suffix(ctx: &Ctx) -> String {
        if ctx.rep > 0 {
            format!("@{}", ctx.rep)
        } else {
            String::new()
        }
    }

    fn param(
        &mut self,
        ctx: &Ctx,
        name: &str,
        kind: ParamKind,
        shape: Vec<usize>,
        fan_in: usize,
    ) -> ParamId {
        let base = format!("{}.{}", ctx.prefix, name);
        let shared = kind.is_backbone_conv() && ctx.role == Role::Core(Core::Frozen) && ctx.tail;
        if shared {
            if let Some(&id) = self.shared.get(&base) {
                return id;
            }
        }
        let id = if shared {
            base.clone()
        } else {
            format!("{base}{}", Self::rep_suffix(ctx))
        };
        let depth = match (kind.is_backbone_conv(), ctx.role) {
            (true, Role::Core(core)) => {
                let d = self.depth[core.index()];
                self.depth[core.index()] += 1;
                d
            }
            _ => 0,
        };
        self.params.push(ParamDecl {
            id,
            kind,
            shape,
            role: ctx.role,
            fan_in,
            depth,
            tail: ctx.tail,
        });
        let pid = self.params.len() - 1;
        if shared {
            self.shared.insert(base, pid);
        }
        pid
    }

    fn batch_norm(&mut self, ctx: &Ctx, name: &str, input: SlotId, producer: ParamId) -> SlotId {
        let shape = self.slots[input];
        let c = shape.channels;
        let gamma = self.param(ctx, &format!("{name}.gamma"), ParamKind::BnGamma, vec![c], 1);
        let beta = self.param(ctx, &format!("{name}.beta"), ParamKind::BnBeta, vec![c], 1);
        self.bns.push(BnDecl {
            id: format!("{}.{}{}", ctx.prefix, name, Self::rep_suffix(ctx)),
            channels: c,
            role: ctx.role,
            gamma,
            beta,
            producer,
        });
        let bn = self.bns.len() - 1;
        let output = self.slot(shape);
        self.push(ctx, Op::BatchNorm { input, output, bn });
        output
    }

    fn relu(&mut self, ctx: &Ctx, input: SlotId) -> SlotId {
        let output = self.slot(self.slots[input]);
        self.push(ctx, Op::Relu { input, output });
        output
    }

    fn stem(&mut self, ctx: &Ctx, input: SlotId, out_c: usize, stride: usize) -> SlotId {
        let in_shape = self.slots[input];
        let weight = self.param(
            ctx,
            "conv",
            ParamKind::StemConv,
            vec![out_c, in_shape.channels, 3, 3],
            in_shape.channels * 9,
        );
        let conv = self.slot(in_shape.strided(out_c, stride));
        self.push(
            ctx,
            Op::StemConv {
                input,
                output: conv,
                weight,
                stride,
            },
        );
        let bn = self.batch_norm(ctx, "bn", conv, weight);
        self.relu(ctx, bn)
    }

    /// DW3x3 -> BN -> PW -> BN -> ReLU
    fn branch(&mut self, ctx: &Ctx, name: &str, input: SlotId, stride: usize) -> SlotId {
        let shape = self.slots[input];
        let c = shape.channels;
        let dw = self.param(
            ctx,
            &format!("{name}.dw"),
            ParamKind::DepthwiseConv,
            vec![c, 1, 3, 3],
            9,
        );
        let dw_out = self.slot(shape.strided(c, stride));
        self.push(
            ctx,
            Op::Depthwise {
                input,
                output: dw_out,
                weight: dw,
                stride,
            },
        );
        let bn1 = self.batch_norm(ctx, &format!("{name}.dw_bn"), dw_out, dw);
        let pw = self.param(
            ctx,
            &format!("{name}.pw"),
            ParamKind::PointwiseConv,
            vec![c, c],
            c,
        );
        let pw_out = self.slot(self.slots[bn1]);
        self.push(
            ctx,
            Op::Pointwise {
                input: bn1,
                output: pw_out,
                weight: pw,
                bias: None,
                groups: 1,
            },
        );
        let bn2 = self.batch_norm(ctx, &format!("{name}.pw_bn"), pw_out, pw);
        self.relu(ctx, bn2)
    }

    fn concat_shuffle(&mut self, ctx: &Ctx, first: SlotId, second: SlotId) -> SlotId {
        let a = self.slots[first];
        let joined = TensorShape::new(a.channels + self.slots[second].channels, a.height, a.width);
        let cat = self.slot(joined);
        self.push(
            ctx,
            Op::Concat {
                first,
                second,
                output: cat,
            },
        );
        let out = self.slot(joined);
        self.push(
            ctx,
            Op::Shuffle {
                input: cat,
                output: out,
                groups: 2,
            },
        );
        out
    }

    fn block(&mut self, ctx: &Ctx, kind: BlockSpec, input: SlotId) -> SlotId {
        match kind {
            BlockSpec::ShuffleRegular => {
                let s = self.slots[input];
                let half = TensorShape::new(s.channels / 2, s.height, s.width);
                let first = self.slot(half);
                let second = self.slot(half);
                self.push(
                    ctx,
                    Op::Split {
                        input,
                        first,
                        second,
                    },
                );
                let branch = self.branch(ctx, "branch", second, 1);
                self.concat_shuffle(ctx, first, branch)
            }
            BlockSpec::ShuffleDownscale => {
                let left = self.branch(ctx, "left", input, 2);
                let right = self.branch(ctx, "right", input, 2);
                self.concat_shuffle(ctx, left, right)
            }
        }
    }

    fn module(
        &mut self,
        spec: &NetworkSpec,
        m: usize,
        rep: usize,
        tail: bool,
        inputs: [SlotId; 3],
    ) -> [SlotId; 3] {
        let module = &spec.modules[m];
        let mut outs = inputs;
        for core in Core::ALL {
            let mut x = inputs[core.index()];
            for (bi, block) in module.segment(core).iter().enumerate() {
                let ctx = Ctx {
                    role: Role::Core(core),
                    module: Some(m),
                    rep,
                    tail,
                    prefix: format!("m{m}.{}.b{bi}", core.tag()),
                };
                x = self.block(&ctx, *block, x);
            }
            outs[core.index()] = x;
        }
        let frozen = outs[0];
        let mut blended = [frozen; 3];
        for core in [Core::Trainable1, Core::Trainable2] {
            let ctx = Ctx {
                role: Role::Core(core),
                module: Some(m),
                rep,
                tail,
                prefix: format!("m{m}.{}", core.tag()),
            };
            let shape = self.slots[frozen];
            let logits = self.param(
                &ctx,
                "alpha",
                ParamKind::AlphaLogit,
                vec![shape.channels],
                1,
            );
            let output = self.slot(shape);
            self.push(
                &ctx,
                Op::Blend {
                    frozen,
                    trainable: outs[core.index()],
                    output,
                    logits,
                },
            );
            blended[core.index()] = output;
        }
        if module.cross_shuffle {
            let shape = self.slots[frozen];
            let out_a = self.slot(shape);
            let out_b = self.slot(shape);
            let ctx = Ctx {
                role: Role::Core(Core::Trainable1),
                module: Some(m),
                rep,
                tail,
                prefix: format!("m{m}.cross"),
            };
            self.push(
                &ctx,
                Op::CrossShuffle {
                    a: blended[1],
                    b: blended[2],
                    out_a,
                    out_b,
                },
            );
            blended[1] = out_a;
            blended[2] = out_b;
        }
        blended
    }
}
