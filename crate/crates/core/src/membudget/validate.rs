use std::collections::BTreeMap;

use super::planner::Plan;
use super::report::MemoryReport;
use crate::autograd::SavedTensor;
use crate::error::{Error, Result};

/// `|planned − measured| / measured` per component; 0 when both are 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentErrors {
    pub param: f64,
    pub grad: f64,
    pub optimizer: f64,
    pub activation: f64,
    pub frozen_weight: f64,
}

impl ComponentErrors {
    /// Largest error over the headline components (activation, gradient,
    /// optimizer).
    pub fn headline_max(&self) -> f64 {
        self.activation.max(self.grad).max(self.optimizer)
    }
}

fn rel(planned: u64, measured: u64) -> f64 {
    match (planned, measured) {
        (0, 0) => 0.0,
        (_, 0) => f64::INFINITY,
        _ => (planned as f64 - measured as f64).abs() / measured as f64,
    }
}

/// Beyond this, a headline component is reported as a model failure.
pub const MISMATCH_LIMIT: f64 = 0.10;

/// Compares a plan with a tape measurement of the same step. Fails with a
/// diagnostic naming the tensors that differ most when any headline
/// component is off by more than [`MISMATCH_LIMIT`].
pub fn validate_against_measurement(
    plan: &Plan,
    measured: &MemoryReport,
    saved: &[SavedTensor],
) -> Result<ComponentErrors> {
    let p = &plan.report;
    let errors = ComponentErrors {
        param: rel(p.param_bytes, measured.param_bytes),
        grad: rel(p.grad_bytes, measured.grad_bytes),
        optimizer: rel(p.optimizer_bytes, measured.optimizer_bytes),
        activation: rel(p.activation_bytes, measured.activation_bytes),
        frozen_weight: rel(p.frozen_weight_bytes, measured.frozen_weight_bytes),
    };
    if errors.headline_max() <= MISMATCH_LIMIT {
        return Ok(errors);
    }
    Err(Error::MemoryMismatch(format!("{errors:?}; {}", tensor_diff(plan, saved))))
}

/// Saved values that appear on one side only, grouped by (op, shape) and
/// ordered by byte difference.
pub fn tensor_diff(plan: &Plan, saved: &[SavedTensor]) -> String {
    let mut diff: BTreeMap<(&str, Vec<usize>), i64> = BTreeMap::new();
    for t in &plan.tensors {
        *diff.entry((t.op, t.shape.clone())).or_default() += t.bytes as i64;
    }
    for t in saved {
        *diff.entry((t.op, t.shape.clone())).or_default() -= t.bytes as i64;
    }
    let mut rows: Vec<_> = diff.into_iter().filter(|(_, b)| *b != 0).collect();
    rows.sort_by_key(|(_, b)| std::cmp::Reverse(b.abs()));
    if rows.is_empty() {
        return "saved tensors agree".into();
    }
    let lines: Vec<String> = rows
        .iter()
        .take(8)
        .map(|((op, shape), b)| {
            format!("{op} {shape:?}: planner {} {} bytes", if *b > 0 { "over by" } else { "under by" }, b.abs())
        })
        .collect();
    lines.join("; ")
}
