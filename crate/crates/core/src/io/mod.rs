//! Persistence, dataset ingestion and report formats.

pub mod bundle;
pub mod dataset;
pub mod idx;

pub use bundle::{load_bundle, save_bundle, SectionTag, WeightBundle};
pub use dataset::{load_idx, synthetic_digits, Dataset};
