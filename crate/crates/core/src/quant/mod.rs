//! Int8 fixed point, CSD scalers and piecewise linear activations.

pub mod csd;
pub mod fixed;
pub mod pwl;
pub mod qforward;
pub mod qgraph;

pub use csd::{encode_csd, CsdCode};
pub use fixed::{calibrate_tensor, dequantize, quantize, QuantParams};
pub use pwl::{eval_pwl, fit_pwl, sample_uniform, PwlFunction, Samples};
pub use qforward::{quantize_input, quantized_forward, quantized_predict};
pub use qgraph::{build_qgraph, ConvKind, FoldedBn, LayerCensus, QConvWeights, QGraph, QLayer, QOp, QTensor};
