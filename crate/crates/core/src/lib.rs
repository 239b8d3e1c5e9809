//! Partially frozen fixed-topology CNN backbones: a frozen core and two
//! trainable cores joined by per-channel alpha blending, with int8
//! fixed-scaler inference and a silicon cost model.

pub mod cli;
pub mod engine;
pub mod error;
pub mod freezing;
pub mod hardware;
pub mod io;
pub mod quant;
pub mod topology;

pub use error::{Error, Result};
