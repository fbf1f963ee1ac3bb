use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::probe::FinetuneConfig;
use crate::train::{PretrainPlan, Regime};

/// Sizes of the generated data, in sequences. The pretraining pool holds
/// the labeled source sequences (labels stripped) plus fresh target ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub labeled_source: usize,
    pub pool_target: usize,
    pub eval_source: usize,
    pub eval_target: usize,
    pub stack: usize,
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { labeled_source: 256, pool_target: 256, eval_source: 128, eval_target: 128, stack: 4, stride: 3 }
    }
}

/// Reference runs trained without self-supervised pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Fine-tuning from random initialization.
    Supervised,
    /// The supervised model labels the target pool, then trains on both.
    PseudoLabel,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Supervised => "supervised",
            Baseline::PseudoLabel => "pseudo-label",
        }
    }
}

/// Settings of the `memplan` report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemplanConfig {
    /// Encoder frames per sequence; defaults to the longest target sequence
    /// after stacking.
    pub input_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Cells run concurrently.
    pub workers: usize,
    pub baselines: Vec<Baseline>,
    /// Fine-tuning steps between curve points; 0 records only the end.
    pub curve_every: usize,
    pub encoder: EncoderConfig,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub finetune: FinetuneConfig,
    pub memplan: MemplanConfig,
    pub plans: Vec<PretrainPlan>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            workers: 1,
            baselines: vec![Baseline::Supervised],
            curve_every: 100,
            encoder: EncoderConfig::toy(),
            task: TaskConfig::default(),
            data: DataConfig::default(),
            finetune: FinetuneConfig { steps: 600, ..FinetuneConfig::default() },
            memplan: MemplanConfig::default(),
            plans: Vec::new(),
        }
    }
}

/// Short stable name of a plan, used in run ids and report rows.
pub fn plan_name(plan: &PretrainPlan) -> String {
    let mut name = format!("{}-{}", plan.regime, plan.loss.kind);
    if plan.regime == Regime::Ilw {
        name += &format!("-k{}", plan.layers_per_step);
        name += match plan.steps_per_layer {
            Some(_) => "-custom",
            None => match plan.schedule.kind {
                crate::train::ScheduleKind::MoreAtBottom => "-more",
                crate::train::ScheduleKind::Uniform => "-uniform",
                crate::train::ScheduleKind::FewerAtBottom => "-fewer",
            },
        };
    }
    if let Some(t) = plan.truncate_len {
        name += &format!("-t{t}");
    }
    name
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every setting with defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name = {:?} must be a non-empty file name", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be ≥ 1".into()));
        }
        self.encoder.validate()?;
        self.task.validate()?;
        self.finetune.validate()?;
        if self.finetune.num_classes != self.task.num_states {
            return Err(Error::Config(format!(
                "finetune.num_classes = {} must equal task.num_states = {}",
                self.finetune.num_classes, self.task.num_states
            )));
        }
        let d = &self.data;
        if d.labeled_source == 0 || d.pool_target == 0 || d.eval_source == 0 || d.eval_target == 0 {
            return Err(Error::Config("data: every set size must be ≥ 1".into()));
        }
        if d.stack == 0 || d.stride == 0 || d.stack * self.task.raw_dim != self.encoder.feature_dim {
            return Err(Error::Config(format!(
                "data.stack × task.raw_dim = {} × {} must equal encoder.feature_dim = {}",
                d.stack, self.task.raw_dim, self.encoder.feature_dim
            )));
        }
        if self.encoder.domain_onehot_dim < 2 {
            return Err(Error::Config("encoder.domain_onehot_dim must hold both domain ids".into()));
        }
        let shortest = self.task.source_len[0].min(self.task.target_len[0]).div_ceil(d.stride);
        let mut names = BTreeSet::new();
        for (i, plan) in self.plans.iter().enumerate() {
            plan.validate(self.encoder.num_layers).map_err(|e| Error::Config(format!("plans[{i}]: {e}")))?;
            if plan.loss.min_len() > shortest {
                return Err(Error::Config(format!(
                    "plans[{i}]: {} needs {} frames but the shortest sequence has {shortest}",
                    plan.loss.kind,
                    plan.loss.min_len()
                )));
            }
            if !names.insert(plan_name(plan)) {
                return Err(Error::Config(format!("plans[{i}] duplicates {}", plan_name(plan))));
            }
        }
        if self.plans.is_empty() && self.baselines.is_empty() {
            return Err(Error::Config("nothing to run: no plans and no baselines".into()));
        }
        Ok(())
    }
}
