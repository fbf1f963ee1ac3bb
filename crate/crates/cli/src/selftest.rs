use std::collections::BTreeSet;
use std::process::ExitCode;

use anyhow::{ensure, Result};
use lwssl::data::{two_domains, TaskConfig, UnlabeledSet};
use lwssl::encoder::{EncoderConfig, EncoderState};
use lwssl::experiment::{self, Baseline, DataConfig, ExperimentConfig};
use lwssl::gradcheck;
use lwssl::losses::{LossConfig, LossKind};
use lwssl::membudget::{plan, validate_against_measurement, QuantizationMode, StepSpec};
use lwssl::train::{PretrainPlan, Regime, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 3,
        model_dim: 16,
        num_heads: 2,
        left_context: 4,
        conv_kernel: 3,
        ..EncoderConfig::toy()
    }
}

fn pool() -> Result<UnlabeledSet> {
    let (s, t) = two_domains(&TaskConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(UnlabeledSet::new([s.generate(4, &mut rng)?.stacked(4, 3)?, t.generate(4, &mut rng)?.stacked(4, 3)?]))
}

fn gradients() -> Result<()> {
    let failed: Vec<String> = gradcheck::suite(5)?
        .into_iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.1e}", r.name, r.rel_error))
        .collect();
    ensure!(failed.is_empty(), "{}", failed.join(", "));
    Ok(())
}

/// An ILW step on the middle block, checked against the planner and for
/// untouched layers outside the block.
fn memory_and_freezing() -> Result<()> {
    let cfg = small_encoder();
    let state = EncoderState::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1))?;
    let plan_cfg = PretrainPlan { batch_size: 2, ..PretrainPlan::new(Regime::Ilw, LossConfig::new(LossKind::Cpc), 3) };
    let mut trainer = Trainer::new(state, plan_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = pool()?.sample_batch(2, cfg.domain_onehot_dim, &mut rng)?;
    let frozen = |s: &EncoderState| -> Result<Vec<Vec<u32>>> {
        let mut out = Vec::new();
        for l in [1, 3] {
            for id in s.layer_param_ids(l)? {
                out.push(s.store.get(id).value.data().iter().map(|v| v.to_bits()).collect());
            }
        }
        Ok(out)
    };
    let before = frozen(&trainer.state)?;
    let outcome = trainer.step(1, &batch, &mut rng)?;
    ensure!(frozen(&trainer.state)? == before, "layers outside the active block changed");
    ensure!(trainer.state.trainable_layers() == BTreeSet::from([2]), "only layer 2 should train");
    let spec = StepSpec {
        regime: Regime::Ilw,
        active: 2..=2,
        shape: outcome.shape.clone(),
        loss: plan_cfg.loss,
        quantization: QuantizationMode::F32,
    };
    let planned = plan(&cfg, &spec)?;
    let errors = validate_against_measurement(&planned, &outcome.report, &outcome.saved)?;
    ensure!(errors.headline_max() <= 0.01, "planner off by {:.1}%", 100.0 * errors.headline_max());
    Ok(())
}

fn determinism() -> Result<()> {
    let mut cfg = ExperimentConfig {
        name: "selftest".into(),
        seeds: vec![7],
        baselines: vec![Baseline::Supervised],
        curve_every: 0,
        encoder: small_encoder(),
        data: DataConfig { labeled_source: 4, pool_target: 4, eval_source: 4, eval_target: 4, ..DataConfig::default() },
        plans: vec![PretrainPlan {
            batch_size: 2,
            ..PretrainPlan::new(Regime::Ilw, LossConfig::new(LossKind::Cpc), 3)
        }],
        ..ExperimentConfig::default()
    };
    cfg.finetune.steps = 3;
    cfg.finetune.batch_size = 2;
    let dir = tempfile::tempdir()?;
    let mut summaries = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let outcome = experiment::run(&cfg, &out)?;
        ensure!(outcome.is_complete(), "cells failed: {:?}", outcome.failed);
        summaries.push(std::fs::read(out.join(experiment::SUMMARY))?);
    }
    ensure!(summaries[0] == summaries[1], "two runs of one seed differ");
    Ok(())
}

pub fn run() -> Result<ExitCode> {
    type Check = fn() -> Result<()>;
    let checks: [(&str, Check); 3] =
        [("gradients", gradients), ("memory and freezing", memory_and_freezing), ("determinism", determinism)];
    let mut ok = true;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok    {name}"),
            Err(e) => {
                ok = false;
                println!("FAIL  {name}: {e:#}");
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
