//! Vertical freeze plans, ratio accounting, gradient masking and neuron
//! rejuvenation.

pub mod plan;
pub mod rejuvenate;

pub use plan::{effective_ratio, make_freeze_plan, mask_gradients, FreezePlan, FreezeScheme};
pub use rejuvenate::{rejuvenate, RejuvenationPolicy, RejuvenationReport, RevivedChannel};
