//! The acceptance criteria, one pass/fail line each. Runs the full toy
//! experiment matrix, so expect it to take a while.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use lwssl::data::FeatureBatch;
use lwssl::encoder::{EncoderConfig, EncoderState};
use lwssl::experiment::{self, ExperimentConfig, Layout, MetricsRow, SummaryRow};
use lwssl::gradcheck;
use lwssl::losses::{LossConfig, LossKind};
use lwssl::membudget::{plan, validate_against_measurement, MemoryReport};
use lwssl::train::{PretrainPlan, Regime, Trainer};
use rand::Rng;

type Check = std::result::Result<String, String>;

fn verdict(pass: bool, detail: String) -> Check {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pct(x: f64) -> String {
    format!("{:+.1}%", 100.0 * x)
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let results = gradcheck::suite(100).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let worst = results.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    verdict(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} ops and losses x 100 cases, worst {} at {:.1e}, failing {failed:?}, {elapsed:.1?}",
            results.len(),
            worst.name,
            worst.rel_error
        ),
    )
}

fn layer_bits(state: &EncoderState, layers: impl Iterator<Item = usize>) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for l in layers {
        for id in state.layer_param_ids(l).unwrap() {
            out.push(state.store.get(id).value.data().iter().map(|v| v.to_bits()).collect());
        }
    }
    out
}

fn freeze_suite() -> Check {
    let mut r = rng(50);
    let mut changed = 0;
    for case in 0..50 {
        let l = r.random_range(2..=8);
        let k = r.random_range(1..=l);
        let plan = PretrainPlan {
            layers_per_step: k,
            batch_size: 2,
            ..PretrainPlan::new(Regime::Ilw, LossConfig::new(LossKind::ALL[case % 3]), 2 * l)
        };
        let blocks = plan.blocks(l).unwrap();
        let block = r.random_range(0..blocks.len());
        let start: usize = blocks[..block].iter().map(|b| b.steps).sum();
        let active: BTreeSet<usize> = blocks[block].layers.clone().collect();
        let mut trainer = Trainer::new(small_state(l, case as u64), plan).unwrap();
        let outside = || (1..=l).filter(|x| !active.contains(x));
        let before = layer_bits(&trainer.state, outside());
        let inside = layer_bits(&trainer.state, active.iter().copied());
        trainer.step(start, &batch(2, case as u64), &mut rng(case as u64)).unwrap();
        if layer_bits(&trainer.state, outside()) != before {
            return Err(format!("case {case}: L={l} k={k} block {}: a frozen parameter moved", block + 1));
        }
        changed += usize::from(layer_bits(&trainer.state, active.iter().copied()) != inside);
    }
    verdict(
        changed == 50,
        format!("50 random ILW steps, frozen layers bit-identical, active block updated in {changed}/50"),
    )
}

fn memory_equivalence() -> Check {
    let started = Instant::now();
    let mut r = rng(3);
    let (mut worst, mut configs) = (0.0f64, 0);
    for num_layers in 2..=8 {
        for k in [1, 2, num_layers] {
            for len in [40, 80, 160] {
                let cfg = small_config(num_layers);
                let kind = LossKind::ALL[r.random_range(0..3)];
                let regime = match k {
                    k if k == num_layers && r.random_bool(0.5) => Regime::Glw,
                    k if k == num_layers => Regime::E2e,
                    _ => Regime::Ilw,
                };
                let block = if regime == Regime::Ilw { r.random_range(0..num_layers.div_ceil(k)) } else { 0 };
                let lengths = [len, len - r.random_range(0..20), len - r.random_range(0..20)];
                let m = measure(cfg.clone(), regime, kind, k, block, &batch_of(&cfg, &lengths, r.random()));
                let p = plan(&cfg, &m.spec).map_err(|e| e.to_string())?;
                let e =
                    validate_against_measurement(&p, &m.outcome.report, &m.outcome.saved).map_err(|e| e.to_string())?;
                worst = worst.max(e.activation).max(e.grad).max(e.optimizer);
                configs += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 0.01 && elapsed < Duration::from_secs(300),
        format!("{configs} configs, worst activation/grad/optimizer error {:.3}%, {elapsed:.1?}", 100.0 * worst),
    )
}

fn homogeneous(num_layers: usize) -> EncoderConfig {
    EncoderConfig { num_layers, ..EncoderConfig::toy() }
}

fn one_over_l() -> Check {
    let cfg = homogeneous(8);
    let batch = batch_of(&cfg, &[100; 4], 4);
    let one = measure(cfg.clone(), Regime::Ilw, LossKind::Cpc, 1, 0, &batch);
    let all = measure(cfg.clone(), Regime::E2e, LossKind::Cpc, 8, 0, &batch);
    let p_one = plan(&cfg, &one.spec).unwrap();
    let p_all = plan(&cfg, &all.spec).unwrap();
    let (a1, a8) = (one.outcome.report.activation_bytes, all.outcome.report.activation_bytes);
    let constant = p_one.breakdown.stem + p_one.breakdown.head;
    let measured = a1 as f64 / a8 as f64;
    let planned = p_one.report.activation_bytes as f64 / p_all.report.activation_bytes as f64;
    let bound = a8 / 8 + constant;
    verdict(
        a1 <= bound && (measured / planned - 1.0).abs() <= 0.10,
        format!(
            "layer 1 {a1} B <= E2E/8 + input and head {bound} B; ratio {measured:.4} measured vs {planned:.4} planned"
        ),
    )
}

/// Measured memory of the first step of `block` under a k-layer plan,
/// cropped to `truncate` frames if set.
fn step_report(
    cfg: &EncoderConfig,
    k: usize,
    block: usize,
    truncate: Option<usize>,
    batch: &FeatureBatch,
) -> MemoryReport {
    let l = cfg.num_layers;
    let regime = if k == l { Regime::E2e } else { Regime::Ilw };
    let plan = PretrainPlan {
        layers_per_step: k,
        truncate_len: truncate,
        ..PretrainPlan::new(regime, LossConfig::new(LossKind::Cpc), l)
    };
    let start: usize = plan.blocks(l).unwrap()[..block].iter().map(|b| b.steps).sum();
    let state = EncoderState::new(cfg.clone(), &mut rng(1)).unwrap();
    let mut trainer = Trainer::new(state, plan).unwrap();
    trainer.step(start, batch, &mut rng(2)).unwrap().report
}

fn orderings() -> Check {
    let cfg = homogeneous(8);
    let full = 120;
    let batch = batch_of(&cfg, &[full; 4], 9);
    let by_k: Vec<u64> = [1, 2, 4, 8].iter().map(|&k| step_report(&cfg, k, 0, None, &batch).activation_bytes).collect();
    let lens = [full, full / 2, full / 4];
    let crop = |n: usize| if n == full { None } else { Some(n) };
    let by_len: Vec<u64> = lens.iter().map(|&n| step_report(&cfg, 1, 0, crop(n), &batch).activation_bytes).collect();
    let bottom: Vec<u64> = lens.iter().map(|&n| step_report(&cfg, 1, 0, crop(n), &batch).total_bytes).collect();
    let top: Vec<u64> = lens.iter().map(|&n| step_report(&cfg, 1, 7, crop(n), &batch).total_bytes).collect();
    let k_up = by_k.windows(2).all(|w| w[0] < w[1]);
    let len_down = by_len.windows(2).all(|w| w[0] > w[1]);
    let top_over = top.iter().zip(&bottom).all(|(t, b)| t > b);
    verdict(
        k_up && len_down && top_over,
        format!(
            "activation by k=1,2,4,all {by_k:?}; by length {lens:?} {by_len:?}; total top {top:?} vs bottom {bottom:?}"
        ),
    )
}

struct Matrix {
    dir: PathBuf,
    cfg: ExperimentConfig,
    rows: Vec<SummaryRow>,
    elapsed: Duration,
    failed: Vec<(String, String)>,
}

impl Matrix {
    fn row(&self, plan: &str, seed: u64) -> Result<&SummaryRow, String> {
        self.rows
            .iter()
            .find(|r| r.plan == plan && r.seed == seed)
            .ok_or_else(|| format!("no result for {plan} seed {seed}"))
    }
}

fn full_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full.toml");
    let mut cfg = ExperimentConfig::load(path).unwrap();
    cfg.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    cfg
}

fn matrix() -> &'static Result<Matrix, String> {
    static MATRIX: OnceLock<Result<Matrix, String>> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-full");
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = full_config();
        let started = Instant::now();
        let outcome = experiment::run(&cfg, &dir).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        experiment::report(&dir).map_err(|e| e.to_string())?;
        Ok(Matrix { dir, cfg, rows: outcome.summary, elapsed, failed: outcome.failed })
    })
}

fn with_matrix(f: impl FnOnce(&Matrix) -> Check) -> Check {
    let m = matrix().as_ref().map_err(|e| format!("matrix run failed: {e}"))?;
    if !m.failed.is_empty() {
        return Err(format!("cells failed: {:?}", m.failed));
    }
    f(m)
}

fn table2() -> Check {
    with_matrix(|m| {
        let mut pass = m.elapsed < Duration::from_secs(30 * 60);
        let mut parts = Vec::new();
        for kind in LossKind::ALL {
            let (mut gains, mut drifts) = (Vec::new(), Vec::new());
            for &seed in &m.cfg.seeds {
                let base = m.row("supervised", seed)?;
                let ssl = m.row(&format!("e2e-{kind}"), seed)?;
                let gain = 1.0 - ssl.target_fer / base.target_fer;
                let drift = ssl.source_fer / base.source_fer - 1.0;
                pass &= gain >= 0.10 && drift <= 0.05;
                gains.push(pct(-gain));
                drifts.push(pct(drift));
            }
            parts.push(format!("{kind} target {} source {}", gains.join("/"), drifts.join("/")));
        }
        verdict(pass, format!("vs supervised per seed: {}; matrix {:.1?}", parts.join("; "), m.elapsed))
    })
}

fn mean(m: &Matrix, plan: &str, f: impl Fn(&SummaryRow) -> f64) -> Result<f64, String> {
    let values = m.cfg.seeds.iter().map(|&s| m.row(plan, s).map(&f)).collect::<Result<Vec<_>, _>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn ilw_matches_e2e() -> Check {
    with_matrix(|m| {
        let ilw = mean(m, "ilw-cpc-k1-uniform", |r| r.target_fer)?;
        let e2e = mean(m, "e2e-cpc", |r| r.target_fer)?;
        let act = |plan| mean(m, plan, |r| r.peak_activation_bytes.unwrap_or(u64::MAX) as f64);
        let share = act("ilw-cpc-k1-uniform")? / act("e2e-cpc")?;
        verdict(
            ilw <= 1.05 * e2e && share <= 0.25,
            format!(
                "mean target error ILW {ilw:.4} vs E2E {e2e:.4} ({}); ILW peak activation {:.1}% of E2E",
                pct(ilw / e2e - 1.0),
                100.0 * share
            ),
        )
    })
}

fn schedules() -> Check {
    with_matrix(|m| {
        for kind in ["more", "uniform", "fewer"] {
            let path = m.dir.join(format!("report/curve-ilw-cpc-k1-{kind}.csv"));
            let steps: Vec<usize> = csv::Reader::from_path(&path)
                .map_err(|e| format!("{}: {e}", path.display()))?
                .records()
                .map(|r| r.unwrap()[0].parse().unwrap())
                .collect();
            if steps.len() < 2 || !steps.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("{}: steps {steps:?}", path.display()));
            }
        }
        let mut wins = 0;
        let mut pairs = Vec::new();
        for &seed in &m.cfg.seeds {
            let more = m.row("ilw-cpc-k1-more", seed)?.target_fer;
            let uniform = m.row("ilw-cpc-k1-uniform", seed)?.target_fer;
            wins += usize::from(more <= uniform);
            pairs.push(format!("{more:.4}/{uniform:.4}"));
        }
        verdict(
            wins * 3 >= 2 * m.cfg.seeds.len(),
            format!(
                "three curve files emitted; more-at-bottom/uniform final target error {} ({wins} wins)",
                pairs.join(", ")
            ),
        )
    })
}

fn determinism() -> Check {
    with_matrix(|m| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = m.cfg.clone();
        cfg.seeds = vec![1];
        cfg.baselines.clear();
        cfg.plans.retain(|p| experiment::plan_name(p) == "ilw-cpc-k2-uniform");
        experiment::run(&cfg, dir.path()).map_err(|e| e.to_string())?;
        let id = "ilw-cpc-k2-uniform-s1";
        let (a, b) = (Layout::new(&m.dir), Layout::new(dir.path()));
        let mut files = vec![
            (a.cell_result(id), b.cell_result(id)),
            (a.metrics(id), b.metrics(id)),
            (a.final_checkpoint(id), b.final_checkpoint(id)),
        ];
        for block in 1..=3 {
            files.push((a.block_checkpoint(id, block), b.block_checkpoint(id, block)));
        }
        let differing: Vec<String> = files
            .iter()
            .filter(|(x, y)| std::fs::read(x).ok() != std::fs::read(y).ok() || !x.exists())
            .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        verdict(
            differing.is_empty(),
            format!("{id} rerun alone: {} files compared, differing {differing:?}", files.len()),
        )
    })
}

fn cpc_initial_loss() -> Check {
    with_matrix(|m| {
        let target = 9f64.ln();
        let mut firsts = Vec::new();
        for &seed in &m.cfg.seeds {
            let rows: Vec<MetricsRow> =
                csv::Reader::from_path(Layout::new(&m.dir).metrics(&format!("e2e-cpc-s{seed}")))
                    .map_err(|e| e.to_string())?
                    .deserialize()
                    .map(|r| r.unwrap())
                    .collect();
            firsts.push(rows[0].loss);
        }
        verdict(
            firsts.iter().all(|l| (l - target).abs() <= 0.3),
            format!("first-step CPC loss {firsts:.3?} vs ln 9 = {target:.3}"),
        )
    })
}

fn main() -> ExitCode {
    type Criterion = fn() -> Check;
    let criteria: [(&str, Criterion); 10] = [
        ("gradient suite", gradient_suite),
        ("freeze suite", freeze_suite),
        ("memory model equivalence", memory_equivalence),
        ("1/L activation memory", one_over_l),
        ("memory orderings", orderings),
        ("pretraining helps the target domain", table2),
        ("ILW matches E2E", ilw_matches_e2e),
        ("schedule curves", schedules),
        ("determinism", determinism),
        ("CPC initial loss", cpc_initial_loss),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}  {name}: {detail}", i + 1);
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
