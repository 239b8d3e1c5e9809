//! Floating-point execution and masked training.

pub mod exec;
pub mod ops;
pub mod optim;
pub mod pool;
pub mod state;
pub mod tensor;
pub mod train;

pub use exec::{backward_pass, forward_pass, Binding, BnPolicy, ExecOptions, Forward, GradientSet, Mode};
pub use optim::{sgd_step_masked, OptimizerConfig, OptimizerState};
pub use pool::StreamingAvgPool;
pub use state::{BnStats, ModelState, ParamTensor, DEFAULT_SEED};
pub use tensor::Tensor;
pub use train::{evaluate, train_epoch, EpochReport, EvalReport, TrainConfig};
