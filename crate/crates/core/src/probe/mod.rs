//! Supervised fine-tuning with a frame-classification head, frame error
//! evaluation, and the pseudo-label baseline.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, ParamId, ParamStore, Tape};
use crate::data::{Dataset, EvalSet, FeatureBatch, LabeledSet, Sequence, UnlabeledSet};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::tensor::NDArray;
use crate::train::{AdamConfig, OptimizerState};

/// Linear frame classifier `d → num_classes` on the top encoder layer.
#[derive(Clone, Debug)]
pub struct ProbeHead {
    pub store: ParamStore<f32>,
    pub weight: ParamId,
    pub bias: ParamId,
    pub num_classes: usize,
}

impl ProbeHead {
    /// Fan-in uniform weight, zero bias.
    pub fn new(model_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let bound = 1.0 / (model_dim as f32).sqrt();
        let data = (0..model_dim * num_classes).map(|_| rng.random_range(-bound..bound)).collect();
        let weight =
            store.add("probe.weight", NDArray::from_vec([model_dim, num_classes], data).expect("positive dims"));
        let bias = store.add("probe.bias", NDArray::zeros([num_classes]));
        Self { store, weight, bias, num_classes }
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for id in [self.weight, self.bias] {
            self.store.set_trainable(id, on);
        }
    }

    pub fn logits(&self, tape: &mut Tape<f32>, hidden: NodeId) -> Result<NodeId> {
        let w = tape.param(&self.store, self.weight);
        let b = tape.param(&self.store, self.bias);
        let z = tape.matmul(hidden, w)?;
        tape.add_bias(z, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Encoder and head both train.
    Full,
    /// Only the head trains; the encoder is frozen.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub mode: FinetuneMode,
    pub batch_size: usize,
    pub num_classes: usize,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            mode: FinetuneMode::Full,
            batch_size: 8,
            num_classes: 8,
            optimizer: AdamConfig::with_lr(3e-4),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.num_classes < 2 {
            return Err(Error::Config("finetune: batch_size must be positive and num_classes at least 2".into()));
        }
        self.optimizer.validate()
    }
}

fn input_node(tape: &mut Tape<f32>, state: &EncoderState, batch: &FeatureBatch) -> Result<NodeId> {
    let x = tape.constant(batch.input_matrix());
    state.encode(tape, x, batch.layout(), state.num_layers())
}

/// Trains `head` (and the encoder in full mode) with frame cross-entropy
/// over valid frames of `data`. `on_step` runs after every update with the
/// 1-based step count and its loss. Returns the per-step losses.
pub fn finetune(
    state: &mut EncoderState,
    head: &mut ProbeHead,
    data: &LabeledSet,
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(usize, f64, &EncoderState, &ProbeHead) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.num_classes != head.num_classes {
        return Err(Error::Config(format!(
            "finetune: head has {} classes, config {}",
            head.num_classes, cfg.num_classes
        )));
    }
    match cfg.mode {
        FinetuneMode::Full => state.set_trainable(&(1..=state.num_layers()).collect::<BTreeSet<_>>())?,
        FinetuneMode::HeadOnly => state.freeze_all(),
    }
    head.set_trainable(true);
    let mut optimizer = OptimizerState::new(cfg.optimizer.clone());
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = data.sample_batch(cfg.batch_size, state.config.domain_onehot_dim, rng)?;
        let labels = batch.labels.as_ref().ok_or_else(|| Error::Invalid("finetune: batch has no labels".into()))?;
        if labels.iter().any(|&l| l as usize >= head.num_classes) {
            return Err(Error::Invalid(format!("finetune: label out of range for {} classes", head.num_classes)));
        }
        let weight = 1.0 / batch.valid_frames() as f32;
        let weights: Vec<f32> = (0..labels.len()).map(|r| if batch.is_valid(r) { weight } else { 0.0 }).collect();
        let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let (st, hd) = (&*state, &*head);
        let loss = tape.forward(|t| {
            let hidden = input_node(t, st, &batch)?;
            let logits = hd.logits(t, hidden)?;
            t.cross_entropy(logits, targets, weights)
        })?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            tape.release();
            return Err(Error::Invalid(format!("non-finite fine-tuning loss at step {step}")));
        }
        tape.backward(loss)?;
        tape.write_grads(&mut state.store);
        tape.write_grads(&mut head.store);
        optimizer.step(&mut state.store);
        optimizer.step(&mut head.store);
        tape.release();
        losses.push(value);
        on_step(step, value, state, head)?;
    }
    Ok(losses)
}

/// Most likely class of every row of `batch` (padding rows included).
pub fn predict(state: &EncoderState, head: &ProbeHead, batch: &FeatureBatch) -> Result<Vec<u32>> {
    let mut tape = Tape::new();
    let logits = tape.forward(|t| {
        let hidden = input_node(t, state, batch)?;
        head.logits(t, hidden)
    })?;
    let value = tape.value(logits).ok_or_else(|| Error::Invalid("predict: logits were not kept".into()))?;
    Ok(value
        .data()
        .chunks(head.num_classes)
        .map(|row| (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best }) as u32)
        .collect())
}

/// Misclassified and valid frame counts of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DomainEval {
    pub domain_id: u32,
    pub errors: usize,
    pub frames: usize,
}

impl DomainEval {
    pub fn frame_error_rate(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.errors as f64 / self.frames as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EvalResult {
    pub seed: u64,
    pub source: DomainEval,
    pub target: DomainEval,
}

impl EvalResult {
    pub fn source_fer(&self) -> f64 {
        self.source.frame_error_rate()
    }

    pub fn target_fer(&self) -> f64 {
        self.target.frame_error_rate()
    }
}

const EVAL_BATCH: usize = 16;

/// Frame errors over every valid frame of `set`, batches scored in parallel.
pub fn evaluate_set(state: &EncoderState, head: &ProbeHead, set: &EvalSet) -> Result<DomainEval> {
    let batches = set.batches(EVAL_BATCH, state.config.domain_onehot_dim)?;
    let counts = batches
        .par_iter()
        .map(|batch| {
            let predicted = predict(state, head, batch)?;
            let labels = batch.labels.as_ref().ok_or_else(|| Error::Invalid("evaluate: set has no labels".into()))?;
            let mut errors = 0;
            for (r, (&p, &l)) in predicted.iter().zip(labels).enumerate() {
                if batch.is_valid(r) && p != l {
                    errors += 1;
                }
            }
            Ok((errors, batch.valid_frames()))
        })
        .collect::<Result<Vec<(usize, usize)>>>()?;
    Ok(DomainEval {
        domain_id: set.dataset().domain_id,
        errors: counts.iter().map(|c| c.0).sum(),
        frames: counts.iter().map(|c| c.1).sum(),
    })
}

pub fn evaluate(
    state: &EncoderState,
    head: &ProbeHead,
    source: &EvalSet,
    target: &EvalSet,
    seed: u64,
) -> Result<EvalResult> {
    Ok(EvalResult { seed, source: evaluate_set(state, head, source)?, target: evaluate_set(state, head, target)? })
}

/// Labels every sequence of domain `domain_id` in `pool` with the model's
/// own predictions.
pub fn pseudo_label(state: &EncoderState, head: &ProbeHead, pool: &UnlabeledSet, domain_id: u32) -> Result<LabeledSet> {
    let part = pool
        .parts()
        .iter()
        .find(|p| p.domain_id == domain_id)
        .ok_or_else(|| Error::Invalid(format!("pseudo_label: no domain {domain_id} in the pool")))?;
    let sequences = part
        .sequences
        .par_iter()
        .map(|s| {
            let batch = FeatureBatch::from_sequences(&[(s, domain_id)], state.config.domain_onehot_dim)?;
            let labels = predict(state, head, &batch)?;
            Ok(Sequence { features: s.features.clone(), labels: Some(labels) })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::pseudo(Dataset { domain_id, sequences })
}
