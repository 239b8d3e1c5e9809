//! Declarative fixed topology: validation, shape inference, unrolling of the
//! repeatable tail and parameter accounting.

pub mod graph;
pub mod params;
pub mod shapes;
pub mod spec;

pub use graph::{build_graph, unroll_repeats, BnDecl, ExecGraph, Node, Op, ParamDecl, ParamKind, Role};
pub use params::{count_graph, count_params, graph_macs, ParamPartition};
pub use shapes::{backbone_shape, infer_shapes, validate_spec, ShapeMap, Violation};
pub use spec::{
    ActivationKind, BlockSpec, Core, CoreSet, HeadSpec, NetworkSpec, PwlSpec, SemifreddoModuleSpec,
    StemSpec, TensorShape, TopologyHash, BACKBONE_DOWNSCALE, HEAD_WEIGHT_BUDGET,
};
