//! Training-memory accounting: the report type shared by the trainer and
//! the analytical planner, the planner itself, and linear extrapolation.

mod extrapolate;
mod planner;
mod report;
mod validate;

pub use extrapolate::{extrapolate_linear, Extrapolation};
pub use planner::{
    head_param_count, layer_tensor_numels, plan, plan_step, ActivationBreakdown, Plan, PlannedTensor, StepShape,
    StepSpec,
};
pub use report::{MemoryReport, QuantizationMode};
pub use validate::{tensor_diff, validate_against_measurement, ComponentErrors, MISMATCH_LIMIT};
