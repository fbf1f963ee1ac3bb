use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::optim::OptimizerState;
use super::plan::{block_at, Block, PretrainPlan, Regime};
use crate::autograd::{NodeId, SavedTensor, Tape};
use crate::data::{truncate, FeatureBatch, UnlabeledSet};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::losses::{mask_fill, sample_mask, ssl_loss, LossConfig, LossHead, LossInput};
use crate::membudget::{MemoryReport, QuantizationMode, StepShape};

/// Result of one pretraining step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Sum of the attached losses.
    pub loss: f64,
    /// One value per attached loss, bottom to top.
    pub layer_losses: Vec<f64>,
    pub report: MemoryReport,
    /// Lengths the step actually ran on, after truncation and masking.
    pub shape: StepShape,
    /// Values the backward pass kept, as measured at the end of forward.
    pub saved: Vec<SavedTensor>,
}

/// One row of the per-step metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub regime: Regime,
    /// 1-based block index.
    pub active_block: usize,
    pub loss: f64,
    pub activation_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub param_bytes: u64,
    pub peak_bytes: u64,
}

/// RNG of block `block` in a run seeded with `seed`. Each block draws from
/// its own stream, so a run resumed at a block boundary replays exactly.
pub fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64 + 1);
    rng
}

/// Pretraining driver for all three regimes.
pub struct Trainer {
    pub state: EncoderState,
    pub plan: PretrainPlan,
    pub optimizer: OptimizerState,
    blocks: Vec<Block>,
    heads: Vec<LossHead>,
    active: Option<usize>,
    tape: Tape,
}

impl Trainer {
    pub fn new(state: EncoderState, plan: PretrainPlan) -> Result<Self> {
        plan.validate(state.num_layers())?;
        let blocks = plan.blocks(state.num_layers())?;
        let optimizer = OptimizerState::new(plan.optimizer.clone());
        Ok(Self { state, plan, optimizer, blocks, heads: Vec::new(), active: None, tape: Tape::new() })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// 0-based index of the block currently set up, if any.
    pub fn active_block(&self) -> Option<usize> {
        self.active
    }

    pub fn heads(&self) -> &[LossHead] {
        &self.heads
    }

    /// Layers that receive a loss in block `block`.
    fn loss_layers(&self, block: usize) -> Vec<usize> {
        match self.plan.regime {
            Regime::Glw => (1..=self.state.num_layers()).collect(),
            _ => vec![self.blocks[block].top()],
        }
    }

    /// Makes exactly the block's layers trainable, drops the optimizer slots
    /// and heads of the previous block, and draws fresh heads from `rng`.
    pub fn enter_block(&mut self, block: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let b = self.blocks.get(block).ok_or_else(|| Error::Invalid(format!("no block {block}")))?;
        let layers: BTreeSet<usize> = b.layers.clone().collect();
        self.state.set_trainable(&layers)?;
        self.optimizer.clear();
        let cfg = &self.state.config;
        self.heads = self
            .loss_layers(block)
            .into_iter()
            .map(|l| {
                LossHead::named(&self.plan.loss, cfg.model_dim, cfg.feature_dim, &format!("layer{l:02}.head"), rng)
            })
            .collect();
        self.active = Some(block);
        Ok(())
    }

    /// One update of step `step`. Sets up the covering block first if it is
    /// not already active; the step's randomness (head init on block entry,
    /// truncation window, mask, negatives) comes from `rng`.
    pub fn step(&mut self, step: usize, batch: &FeatureBatch, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        let block = block_at(&self.blocks, step)
            .ok_or_else(|| Error::Invalid(format!("step {step} is past the plan's {} steps", self.plan.total_steps)))?;
        if self.active != Some(block) {
            self.enter_block(block, rng)?;
        }
        let top = self.blocks[block].top();
        let loss_layers = self.loss_layers(block);
        let cropped;
        let batch = match self.plan.truncate_len {
            Some(len) => {
                cropped = truncate(batch, len, self.plan.loss.min_len(), rng)?;
                &cropped
            }
            None => batch,
        };
        let layout = batch.layout();
        let mask = if self.plan.loss.masks_input() {
            Some(sample_mask(&batch.lengths, layout, &self.plan.loss.w2v2, rng)?)
        } else {
            None
        };

        let Self { state, plan, heads, tape, optimizer, .. } = self;
        let mut loss_nodes: Vec<NodeId> = Vec::new();
        let loss = tape.forward(|t| {
            let mut input = t.constant(batch.input_matrix());
            if let Some(mask) = &mask {
                input = t.mask_rows(input, mask.clone(), &mask_fill(batch.feature_dim))?;
            }
            let targets = t.constant(batch.targets());
            let outs = state.encode_layers(t, input, layout, top, plan.regime == Regime::Glw)?;
            for (head, &l) in heads.iter().zip(&loss_layers) {
                let x =
                    LossInput { hidden: outs[l - 1], targets, layout, lengths: &batch.lengths, mask: mask.as_deref() };
                loss_nodes.push(ssl_loss(t, head, &x, &plan.loss, rng)?);
            }
            let mut total = loss_nodes[0];
            for &n in &loss_nodes[1..] {
                total = t.add(total, n)?;
            }
            Ok(total)
        })?;
        let layer_losses: Vec<f64> = loss_nodes.iter().map(|&n| tape.scalar(n) as f64).collect();
        let loss_value = tape.scalar(loss) as f64;
        if !loss_value.is_finite() {
            tape.release();
            return Err(Error::Invalid(format!("non-finite loss at step {step}")));
        }
        let activation_bytes = tape.activation_bytes();
        let saved = tape.saved_tensors();
        tape.backward(loss)?;
        let grad_bytes = tape.grad_bytes();
        tape.write_grads(&mut state.store);
        for head in heads.iter_mut() {
            tape.write_grads(&mut head.store);
        }
        optimizer.step(&mut state.store);
        for head in heads.iter_mut() {
            optimizer.step(&mut head.store);
        }
        let peak_bytes = tape.peak_bytes();
        tape.release();
        tape.reset_peak();

        let (mut param_bytes, mut frozen_weight_bytes) = (0, 0);
        for l in 1..=top {
            for id in state.layer_param_ids(l)? {
                let p = state.store.get(id);
                if p.trainable {
                    param_bytes += p.value.bytes();
                } else {
                    frozen_weight_bytes += p.value.bytes();
                }
            }
        }
        param_bytes += heads.iter().flat_map(|h| h.store.iter()).map(|(_, p)| p.value.bytes()).sum::<u64>();
        let report = MemoryReport {
            param_bytes,
            grad_bytes,
            optimizer_bytes: optimizer.bytes(),
            activation_bytes,
            frozen_weight_bytes,
            quantization: QuantizationMode::F32,
            transient_bytes: 0,
            peak_bytes,
            total_bytes: 0,
        }
        .with_total();
        let shape = StepShape {
            lengths: batch.lengths.clone(),
            frames: batch.frames(),
            masked_frames: mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count()),
        };
        Ok(StepOutcome { loss: loss_value, layer_losses, report, shape, saved })
    }

    /// Runs every remaining step from `start_step`, sampling batches from
    /// `data`. Each block uses [`block_rng`]`(seed, block)` from its first
    /// step; `on_step` sees every row as it is produced.
    pub fn pretrain(
        &mut self,
        data: &UnlabeledSet,
        seed: u64,
        start_step: usize,
        mut on_step: impl FnMut(&mut Self, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        self.pretrain_with(data, seed, start_step, |t, row, _| on_step(t, row))
    }

    /// [`Trainer::pretrain`] with the full outcome of each step.
    pub fn pretrain_with(
        &mut self,
        data: &UnlabeledSet,
        seed: u64,
        start_step: usize,
        mut on_step: impl FnMut(&mut Self, &StepMetrics, &StepOutcome) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let onehot = self.state.config.domain_onehot_dim;
        let mut rows = Vec::with_capacity(self.plan.total_steps.saturating_sub(start_step));
        let mut rng = None;
        let mut current = None;
        for step in start_step..self.plan.total_steps {
            let block = block_at(&self.blocks, step).expect("step < total_steps");
            if current != Some(block) {
                let start = self.blocks[..block].iter().map(|b| b.steps).sum::<usize>();
                if step != start {
                    return Err(Error::Invalid(format!("step {step} is not at the start of block {}", block + 1)));
                }
                let mut r = block_rng(seed, block);
                self.enter_block(block, &mut r)?;
                rng = Some(r);
                current = Some(block);
            }
            let r = rng.as_mut().expect("set on block entry");
            let batch = data.sample_batch(self.plan.batch_size, onehot, r)?;
            let out = self.step(step, &batch, r)?;
            let row = StepMetrics {
                step,
                regime: self.plan.regime,
                active_block: block + 1,
                loss: out.loss,
                activation_bytes: out.report.activation_bytes,
                grad_bytes: out.report.grad_bytes,
                optimizer_bytes: out.report.optimizer_bytes,
                param_bytes: out.report.param_bytes,
                peak_bytes: out.report.peak_bytes,
            };
            on_step(self, &row, &out)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// End-to-end pretraining of `state` for `total_steps` steps.
pub fn e2e_pretrain(
    state: EncoderState,
    loss: &LossConfig,
    data: &UnlabeledSet,
    total_steps: usize,
    seed: u64,
) -> Result<(EncoderState, Vec<StepMetrics>)> {
    let plan = PretrainPlan::new(Regime::E2e, loss.clone(), total_steps);
    let mut trainer = Trainer::new(state, plan)?;
    let rows = trainer.pretrain(data, seed, 0, |_, _| Ok(()))?;
    Ok((trainer.state, rows))
}
