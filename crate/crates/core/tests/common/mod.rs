#![allow(dead_code)]

use lwssl::data::*;
use lwssl::encoder::{EncoderConfig, EncoderState};
use lwssl::losses::{LossConfig, LossKind};
use lwssl::membudget::{QuantizationMode, StepSpec};
use lwssl::train::{PretrainPlan, Regime, StepOutcome, Trainer};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A narrow encoder that trains in milliseconds per step.
pub fn small_config(num_layers: usize) -> EncoderConfig {
    EncoderConfig { num_layers, model_dim: 16, conv_kernel: 3, num_heads: 2, left_context: 4, ..EncoderConfig::toy() }
}

pub fn small_state(num_layers: usize, seed: u64) -> EncoderState {
    EncoderState::new(small_config(num_layers), &mut rng(seed)).unwrap()
}

/// Source and target sequences, stacked, labels stripped.
pub fn pool(n: usize, seed: u64) -> UnlabeledSet {
    let (source, target) = two_domains(&TaskConfig::default()).unwrap();
    let mut r = rng(seed);
    UnlabeledSet::new([
        source.generate(n, &mut r).unwrap().stacked(4, 3).unwrap(),
        target.generate(n, &mut r).unwrap().stacked(4, 3).unwrap(),
    ])
}

pub fn batch(size: usize, seed: u64) -> FeatureBatch {
    pool(size, seed).sample_batch(size, 4, &mut rng(seed + 1)).unwrap()
}

/// Every parameter value, flattened per tensor, in store order.
pub fn snapshot(state: &EncoderState) -> Vec<Vec<u32>> {
    state.store.iter().map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect()).collect()
}

/// Random features for sequences of the given lengths, padded to the longest.
pub fn batch_of(cfg: &EncoderConfig, lengths: &[usize], seed: u64) -> FeatureBatch {
    let mut r = rng(seed);
    let frames = *lengths.iter().max().unwrap();
    let width = cfg.input_dim();
    let mut features = vec![0.0f32; lengths.len() * frames * width];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let row = &mut features[(b * frames + t) * width..][..width];
            for v in &mut row[..cfg.feature_dim] {
                *v = r.random_range(-1.0..1.0);
            }
            row[cfg.feature_dim + b % cfg.domain_onehot_dim] = 1.0;
        }
    }
    FeatureBatch {
        features: lwssl::NDArray::from_vec([lengths.len(), frames, width], features).unwrap(),
        lengths: lengths.to_vec(),
        labels: None,
        domain_ids: (0..lengths.len()).map(|b| (b % cfg.domain_onehot_dim) as u32).collect(),
        feature_dim: cfg.feature_dim,
        onehot_dim: cfg.domain_onehot_dim,
    }
}

pub struct Measured {
    pub outcome: StepOutcome,
    pub spec: StepSpec,
}

/// Runs the first step of block `block` and returns what the tape saw with
/// the matching planner input.
pub fn measure(
    cfg: EncoderConfig,
    regime: Regime,
    kind: LossKind,
    k: usize,
    block: usize,
    batch: &FeatureBatch,
) -> Measured {
    let num_layers = cfg.num_layers;
    let state: EncoderState = EncoderState::new(cfg, &mut rng(3)).unwrap();
    let mut plan = PretrainPlan::new(regime, LossConfig::new(kind), num_layers);
    plan.layers_per_step = k;
    let blocks = plan.blocks(num_layers).unwrap();
    let start: usize = blocks[..block].iter().map(|b| b.steps).sum();
    let mut trainer = Trainer::new(state, plan.clone()).unwrap();
    let outcome = trainer.step(start, batch, &mut rng(11)).unwrap();
    let spec = StepSpec {
        regime,
        active: blocks[block].layers.clone(),
        shape: outcome.shape.clone(),
        loss: plan.loss.clone(),
        quantization: QuantizationMode::F32,
    };
    Measured { outcome, spec }
}
