use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use super::schedule::{build_schedule, ScheduleShape};
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// One loss on the top layer; every layer trains every step.
    E2e,
    /// A local loss on every layer with gradients blocked between layers.
    Glw,
    /// Blocks of layers train one after another, bottom to top.
    Ilw,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::E2e => "e2e",
            Regime::Glw => "glw",
            Regime::Ilw => "ilw",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A contiguous group of layers trained together for `steps` steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    /// 1-based layer indices.
    pub layers: RangeInclusive<usize>,
    pub steps: usize,
}

impl Block {
    pub fn top(&self) -> usize {
        *self.layers.end()
    }
}

/// How an encoder is pretrained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainPlan {
    pub regime: Regime,
    pub loss: LossConfig,
    pub total_steps: usize,
    /// Layers per ILW block.
    pub layers_per_step: usize,
    /// Profile of ILW steps per layer; ignored when `steps_per_layer` is set.
    pub schedule: ScheduleShape,
    pub steps_per_layer: Option<Vec<usize>>,
    /// Crop inputs to this many encoder frames.
    pub truncate_len: Option<usize>,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self {
            regime: Regime::Ilw,
            loss: LossConfig::default(),
            total_steps: 600,
            layers_per_step: 1,
            schedule: ScheduleShape::default(),
            steps_per_layer: None,
            truncate_len: None,
            batch_size: 8,
            optimizer: AdamConfig::default(),
        }
    }
}

impl PretrainPlan {
    pub fn new(regime: Regime, loss: LossConfig, total_steps: usize) -> Self {
        Self { regime, loss, total_steps, ..Self::default() }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("plan.batch_size must be ≥ 1".into()));
        }
        if self.layers_per_step == 0 || self.layers_per_step > num_layers {
            return Err(Error::Config(format!(
                "plan.layers_per_step = {} must lie in 1..={num_layers}",
                self.layers_per_step
            )));
        }
        if let Some(t) = self.truncate_len {
            if t < self.loss.min_len() {
                return Err(Error::Config(format!(
                    "plan.truncate_len = {t} is below the {} loss minimum of {} frames",
                    self.loss.kind,
                    self.loss.min_len()
                )));
            }
        }
        self.blocks(num_layers).map(|_| ())
    }

    /// Steps per layer for ILW.
    pub fn layer_steps(&self, num_layers: usize) -> Result<Vec<usize>> {
        match &self.steps_per_layer {
            Some(s) if s.len() != num_layers => {
                Err(Error::Config(format!("plan.steps_per_layer has {} entries for {num_layers} layers", s.len())))
            }
            Some(s) if s.iter().sum::<usize>() != self.total_steps => Err(Error::Config(format!(
                "plan.steps_per_layer sums to {}, total_steps is {}",
                s.iter().sum::<usize>(),
                self.total_steps
            ))),
            Some(s) if s.contains(&0) => Err(Error::Config("plan.steps_per_layer entries must be ≥ 1".into())),
            Some(s) => Ok(s.clone()),
            None => build_schedule(self.schedule, num_layers, self.total_steps),
        }
    }

    /// The blocks visited in order. E2E and GLW are one block spanning every
    /// layer; ILW groups `layers_per_step` layers, bottom to top.
    pub fn blocks(&self, num_layers: usize) -> Result<Vec<Block>> {
        if self.regime != Regime::Ilw {
            return Ok(vec![Block { layers: 1..=num_layers, steps: self.total_steps }]);
        }
        let steps = self.layer_steps(num_layers)?;
        let k = self.layers_per_step;
        Ok((0..num_layers)
            .step_by(k)
            .map(|lo| {
                let hi = (lo + k).min(num_layers);
                Block { layers: lo + 1..=hi, steps: steps[lo..hi].iter().sum() }
            })
            .collect())
    }
}

/// Index of the block whose window covers `step`.
pub fn block_at(blocks: &[Block], step: usize) -> Option<usize> {
    let mut end = 0;
    for (i, b) in blocks.iter().enumerate() {
        end += b.steps;
        if step < end {
            return Some(i);
        }
    }
    None
}
