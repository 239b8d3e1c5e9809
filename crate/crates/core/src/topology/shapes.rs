use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::spec::{
    BlockSpec, Core, NetworkSpec, TensorShape, BACKBONE_DOWNSCALE, HEAD_WEIGHT_BUDGET,
};
use crate::error::{Error, Result};

/// A single broken invariant found by [`validate_spec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyDimension { what: String },
    NoModules,
    OddChannels { at: String, channels: usize },
    BlendShapeMismatch {
        module: usize,
        core: Core,
        frozen: String,
        trainable: String,
    },
    Downscale { core: Core, factor: usize },
    HeadBudget { weights: usize, budget: usize },
    HeadGroups { in_channels: usize, out_channels: usize, groups: usize },
    TailCount { tail_modules: usize, modules: usize },
    TailNotRepeatable { module: usize, core: Core },
    ZeroRepeat,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyDimension { what } => write!(f, "zero-sized dimension in {what}"),
            Violation::NoModules => f.write_str("no semifreddo modules"),
            Violation::OddChannels { at, channels } => {
                write!(f, "odd channel count {channels} at {at}")
            }
            Violation::BlendShapeMismatch {
                module,
                core,
                frozen,
                trainable,
            } => write!(
                f,
                "blend shape mismatch in module {module}: frozen {frozen} vs {core} {trainable}"
            ),
            Violation::Downscale { core, factor } => write!(
                f,
                "{core} core downscales by {factor}, expected {BACKBONE_DOWNSCALE}"
            ),
            Violation::HeadBudget { weights, budget } => {
                write!(f, "head budget exceeded: {weights} weights > {budget}")
            }
            Violation::HeadGroups {
                in_channels,
                out_channels,
                groups,
            } => write!(
                f,
                "head groups {groups} do not divide {in_channels} inputs and {out_channels} outputs"
            ),
            Violation::TailCount {
                tail_modules,
                modules,
            } => write!(f, "tail of {tail_modules} modules but only {modules} modules"),
            Violation::TailNotRepeatable { module, core } => write!(
                f,
                "tail module {module} changes the {core} feature shape and cannot be repeated"
            ),
            Violation::ZeroRepeat => f.write_str("tail repeat count must be at least 1"),
        }
    }
}

/// Edge label -> shape for the non-unrolled graph.
pub type ShapeMap = BTreeMap<String, TensorShape>;

struct Walk {
    shapes: ShapeMap,
    violations: Vec<Violation>,
    strides: [usize; 3],
    backbone: Option<TensorShape>,
}

fn walk(spec: &NetworkSpec) -> Walk {
    let mut w = Walk {
        shapes: ShapeMap::new(),
        violations: Vec::new(),
        strides: [spec.stem.stride; 3],
        backbone: None,
    };
    if !spec.input.is_valid() {
        w.violations.push(Violation::EmptyDimension {
            what: "input".into(),
        });
        return w;
    }
    if spec.stem.out_channels == 0 || spec.stem.stride == 0 {
        w.violations.push(Violation::EmptyDimension {
            what: "stem".into(),
        });
        return w;
    }
    if spec.modules.is_empty() {
        w.violations.push(Violation::NoModules);
    }
    if spec.tail_repeat_count == 0 {
        w.violations.push(Violation::ZeroRepeat);
    }
    if spec.tail_modules == 0 || spec.tail_modules > spec.modules.len() {
        w.violations.push(Violation::TailCount {
            tail_modules: spec.tail_modules,
            modules: spec.modules.len(),
        });
    }
    w.shapes.insert("input".into(), spec.input);
    let stem = spec.input.strided(spec.stem.out_channels, spec.stem.stride);
    w.shapes.insert("stem".into(), stem);

    // Per-core running shape; trainable cores continue from their blend output.
    let mut current = [stem; 3];
    let tail_start = spec.tail_start();
    for (m, module) in spec.modules.iter().enumerate() {
        let mut outs = [stem; 3];
        for core in Core::ALL {
            let mut shape = current[core.index()];
            for (b, block) in module.segment(core).iter().enumerate() {
                let at = format!("m{m}.{}.b{b}", core.tag());
                if *block == BlockSpec::ShuffleRegular && shape.channels % 2 != 0 {
                    w.violations.push(Violation::OddChannels {
                        at: at.clone(),
                        channels: shape.channels,
                    });
                }
                w.strides[core.index()] *= block.stride();
                shape = block.output_shape(shape);
                w.shapes.insert(at, shape);
            }
            outs[core.index()] = shape;
        }
        let frozen = outs[0];
        for core in [Core::Trainable1, Core::Trainable2] {
            let t = outs[core.index()];
            if t != frozen {
                w.violations.push(Violation::BlendShapeMismatch {
                    module: m,
                    core,
                    frozen: frozen.to_string(),
                    trainable: t.to_string(),
                });
            }
            w.shapes.insert(format!("m{m}.{}.blend", core.tag()), frozen);
        }
        if module.cross_shuffle && frozen.channels % 2 != 0 {
            w.violations.push(Violation::OddChannels {
                at: format!("m{m}.cross_shuffle"),
                channels: frozen.channels,
            });
        }
        if m >= tail_start {
            for core in Core::ALL {
                if outs[core.index()] != current[core.index()] {
                    w.violations
                        .push(Violation::TailNotRepeatable { module: m, core });
                }
            }
        }
        current = [frozen; 3];
    }
    for core in Core::ALL {
        w.shapes
            .insert(format!("backbone.{}", core.tag()), current[core.index()]);
        if w.strides[core.index()] != BACKBONE_DOWNSCALE {
            w.violations.push(Violation::Downscale {
                core,
                factor: w.strides[core.index()],
            });
        }
    }
    let backbone = current[0];
    w.backbone = Some(backbone);

    let head = &spec.head;
    let cin = backbone.channels;
    if head.out_channels == 0
        || head.groups == 0
        || cin % head.groups != 0
        || head.out_channels % head.groups != 0
    {
        w.violations.push(Violation::HeadGroups {
            in_channels: cin,
            out_channels: head.out_channels,
            groups: head.groups,
        });
    } else {
        let weights = head.weight_count(cin);
        if weights > HEAD_WEIGHT_BUDGET {
            w.violations.push(Violation::HeadBudget {
                weights,
                budget: HEAD_WEIGHT_BUDGET,
            });
        }
    }
    let head_out = if head.global_pool {
        TensorShape::new(head.out_channels.max(1), 1, 1)
    } else {
        TensorShape::new(head.out_channels.max(1), backbone.height, backbone.width)
    };
    w.shapes.insert("head.out".into(), head_out);
    w
}

/// Every violated invariant of `spec`; empty means valid.
pub fn validate_spec(spec: &NetworkSpec) -> Vec<Violation> {
    walk(spec).violations
}

/// Shapes of every block output, blend output and backbone output.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<ShapeMap> {
    let w = walk(spec);
    for v in &w.violations {
        match v {
            Violation::OddChannels { at, channels } => {
                return Err(Error::OddChannels {
                    at: at.clone(),
                    channels: *channels,
                })
            }
            Violation::EmptyDimension { .. } => return Err(Error::InvalidSpec(v.to_string())),
            _ => {}
        }
    }
    Ok(w.shapes)
}

/// Shape of each core's backbone output.
pub fn backbone_shape(spec: &NetworkSpec) -> Result<TensorShape> {
    let shapes = infer_shapes(spec)?;
    Ok(shapes["backbone.frozen"])
}

pub(crate) fn ensure_valid(spec: &NetworkSpec) -> Result<()> {
    let violations = validate_spec(spec);
    if violations.is_empty() {
        return Ok(());
    }
    let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
    Err(Error::InvalidSpec(text.join("; ")))
}
