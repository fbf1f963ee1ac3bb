use serde::Serialize;

use super::config::{plan_name, ExperimentConfig};
use crate::error::Result;
use crate::membudget::{plan, QuantizationMode, StepShape, StepSpec};

/// Planned bytes of one block of one plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemplanRow {
    pub plan: String,
    pub block: usize,
    pub first_layer: usize,
    pub last_layer: usize,
    pub batch: usize,
    pub input_len: usize,
    pub activation_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub param_bytes: u64,
    pub frozen_weight_bytes: u64,
    pub total_bytes: u64,
}

/// Encoder frames per sequence the plan sees: the configured length, or
/// the longest target sequence, cropped to the plan's truncation.
pub fn input_len(cfg: &ExperimentConfig, truncate_len: Option<usize>) -> usize {
    let full = cfg.memplan.input_len.unwrap_or_else(|| cfg.task.target_len[1].div_ceil(cfg.data.stride));
    truncate_len.map_or(full, |t| t.min(full))
}

/// Closed-form memory of every block of every plan, without training.
pub fn memplan(cfg: &ExperimentConfig, quantization: QuantizationMode) -> Result<Vec<MemplanRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for p in &cfg.plans {
        let len = input_len(cfg, p.truncate_len);
        for (i, block) in p.blocks(cfg.encoder.num_layers)?.into_iter().enumerate() {
            let spec = StepSpec {
                regime: p.regime,
                active: block.layers.clone(),
                shape: StepShape::uniform(p.batch_size, len, &p.loss),
                loss: p.loss.clone(),
                quantization,
            };
            let r = plan(&cfg.encoder, &spec)?.report;
            rows.push(MemplanRow {
                plan: plan_name(p),
                block: i + 1,
                first_layer: *block.layers.start(),
                last_layer: block.top(),
                batch: p.batch_size,
                input_len: len,
                activation_bytes: r.activation_bytes,
                grad_bytes: r.grad_bytes,
                optimizer_bytes: r.optimizer_bytes,
                param_bytes: r.param_bytes,
                frozen_weight_bytes: r.frozen_weight_bytes,
                total_bytes: r.total_bytes,
            });
        }
    }
    Ok(rows)
}
