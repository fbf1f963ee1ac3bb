use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{plan_name, Baseline, ExperimentConfig};
use crate::data::{two_domains, EvalSet, LabeledSet, UnlabeledSet};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderState};
use crate::error::{Error, Result};
use crate::membudget::{plan, QuantizationMode, StepSpec};
use crate::probe::{evaluate, finetune, pseudo_label, EvalResult, ProbeHead};
use crate::train::{PretrainPlan, Regime, StepMetrics, StepOutcome, Trainer};

/// Independent RNG streams of one seed. Block streams of the trainer count
/// up from 1, these count down from the top.
#[derive(Clone, Copy, Debug)]
enum Stream {
    Data = 0,
    Init = 1,
    Head = 2,
    Finetune = 3,
    Student = 4,
}

fn seed_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - stream as u64);
    rng
}

/// Everything the cells of one seed share.
pub struct SeedData {
    pub seed: u64,
    pub labeled: LabeledSet,
    pub pool: UnlabeledSet,
    pub eval_source: EvalSet,
    pub eval_target: EvalSet,
    pub init: EncoderState,
}

impl SeedData {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (source, target) = two_domains(&cfg.task)?;
        let d = &cfg.data;
        let mut rng = seed_rng(seed, Stream::Data);
        let src = source.generate(d.labeled_source, &mut rng)?.stacked(d.stack, d.stride)?;
        let tgt = target.generate(d.pool_target, &mut rng)?.stacked(d.stack, d.stride)?;
        let eval_source = EvalSet::generate(&source, d.eval_source, d.stack, d.stride, &mut rng)?;
        let eval_target = EvalSet::generate(&target, d.eval_target, d.stack, d.stride, &mut rng)?;
        let labeled = LabeledSet::new(src.clone(), &source)?;
        let init = EncoderState::new(cfg.encoder.clone(), &mut seed_rng(seed, Stream::Init))?;
        Ok(Self { seed, labeled, pool: UnlabeledSet::new([src, tgt]), eval_source, eval_target, init })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellKind {
    Baseline(Baseline),
    /// Index into `ExperimentConfig::plans`.
    Plan(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub run_id: String,
    pub name: String,
    pub seed: u64,
    pub kind: CellKind,
}

/// Every (baseline or plan) × seed cell, in report order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let named = cfg
            .baselines
            .iter()
            .map(|&b| (b.name().to_string(), CellKind::Baseline(b)))
            .chain(cfg.plans.iter().enumerate().map(|(i, p)| (plan_name(p), CellKind::Plan(i))));
        for (name, kind) in named {
            out.push(Cell { run_id: format!("{name}-s{seed}"), name, seed, kind });
        }
    }
    out
}

/// One line of `summary.csv`. Pretraining columns are empty for baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub plan: String,
    pub regime: Option<Regime>,
    pub loss: Option<String>,
    pub schedule: Option<String>,
    pub k: Option<usize>,
    pub truncate_len: Option<usize>,
    pub seed: u64,
    pub target_fer: f64,
    pub source_fer: f64,
    pub target_errors: usize,
    pub target_frames: usize,
    pub source_errors: usize,
    pub source_frames: usize,
    pub peak_bytes: Option<u64>,
    pub peak_activation_bytes: Option<u64>,
    pub final_pretrain_loss: Option<f64>,
}

/// One line of `metrics/<run_id>.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub step: usize,
    pub block: usize,
    pub loss: f64,
    pub activation_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub param_bytes: u64,
    pub peak_bytes: u64,
}

impl MetricsRow {
    fn new(run_id: &str, m: &StepMetrics) -> Self {
        Self {
            run_id: run_id.into(),
            step: m.step,
            block: m.active_block,
            loss: m.loss,
            activation_bytes: m.activation_bytes,
            grad_bytes: m.grad_bytes,
            optimizer_bytes: m.optimizer_bytes,
            param_bytes: m.param_bytes,
            peak_bytes: m.peak_bytes,
        }
    }
}

/// Measured and planned bytes of the first step of a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub run_id: String,
    pub block: usize,
    pub step: usize,
    pub activation_measured: u64,
    pub activation_planned: u64,
    pub grad_measured: u64,
    pub grad_planned: u64,
    pub optimizer_measured: u64,
    pub optimizer_planned: u64,
    pub param_measured: u64,
    pub param_planned: u64,
    pub frozen_weight_measured: u64,
    pub frozen_weight_planned: u64,
}

/// Frame error after `step` fine-tuning steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub step: usize,
    pub source_fer: f64,
    pub target_fer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub run_id: String,
    pub status: CellStatus,
    pub detail: String,
}

pub const MANIFEST: &str = "MANIFEST";
pub const SUMMARY: &str = "summary.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes through a temporary file so readers never see a torn CSV.
pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Paths inside a results directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join(SUMMARY)
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join(RESOLVED_CONFIG)
    }

    pub fn cell_result(&self, run_id: &str) -> PathBuf {
        self.root.join("cells").join(format!("{run_id}.csv"))
    }

    pub fn metrics(&self, run_id: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{run_id}.csv"))
    }

    pub fn memory(&self, run_id: &str) -> PathBuf {
        self.root.join("memory").join(format!("{run_id}.csv"))
    }

    pub fn curve(&self, run_id: &str) -> PathBuf {
        self.root.join("curves").join(format!("{run_id}.csv"))
    }

    pub fn checkpoints(&self, run_id: &str) -> PathBuf {
        self.root.join("checkpoints").join(run_id)
    }

    /// Checkpoint written when 1-based block `block` completes.
    pub fn block_checkpoint(&self, run_id: &str, block: usize) -> PathBuf {
        self.checkpoints(run_id).join(format!("block{block:02}.lwck"))
    }

    pub fn final_checkpoint(&self, run_id: &str) -> PathBuf {
        self.checkpoints(run_id).join("final.lwck")
    }

    fn create(&self) -> Result<()> {
        for sub in ["cells", "metrics", "memory", "curves", "checkpoints"] {
            create_dir(&self.root.join(sub))?;
        }
        Ok(())
    }
}

struct Manifest {
    path: PathBuf,
    rows: Mutex<Vec<ManifestRow>>,
}

impl Manifest {
    fn set(&self, run_id: &str, status: CellStatus, detail: String) -> Result<()> {
        let mut rows = self.rows.lock().expect("manifest lock");
        let row = rows.iter_mut().find(|r| r.run_id == run_id).expect("cell listed in the manifest");
        row.status = status;
        row.detail = detail;
        write_csv(&self.path, &rows)
    }
}

/// Outcome of [`run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub summary: Vec<SummaryRow>,
    /// run ids with the error that stopped them.
    pub failed: Vec<(String, String)>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Runs every cell of `cfg` into `out`, `cfg.workers` at a time.
///
/// Cells already finished in `out` are kept, and unfinished pretraining
/// resumes after its last completed block. `out` must hold results of the
/// same resolved config, if any. A failing cell is recorded in the MANIFEST
/// and the others still run.
pub fn run(cfg: &ExperimentConfig, out: impl Into<PathBuf>) -> Result<RunOutcome> {
    cfg.validate()?;
    let layout = Layout::new(out);
    let resolved = cfg.to_toml();
    if let Ok(existing) = fs::read_to_string(layout.resolved_config()) {
        if existing != resolved {
            return Err(Error::Config(format!("{} holds results of a different config", layout.root.display())));
        }
    }
    layout.create()?;
    fs::write(layout.resolved_config(), &resolved).map_err(|e| Error::io(layout.resolved_config(), e))?;

    let cells = cells(cfg);
    let previous: BTreeMap<String, ManifestRow> = match read_csv::<ManifestRow>(&layout.manifest()) {
        Ok(rows) => rows.into_iter().map(|r| (r.run_id.clone(), r)).collect(),
        Err(_) => BTreeMap::new(),
    };
    let rows = cells
        .iter()
        .map(|c| match previous.get(&c.run_id) {
            Some(r) if r.status == CellStatus::Done && layout.cell_result(&c.run_id).exists() => r.clone(),
            _ => ManifestRow { run_id: c.run_id.clone(), status: CellStatus::Pending, detail: String::new() },
        })
        .collect::<Vec<_>>();
    let todo: Vec<&Cell> =
        cells.iter().filter(|c| rows.iter().any(|r| r.run_id == c.run_id && r.status != CellStatus::Done)).collect();
    let manifest = Manifest { path: layout.manifest(), rows: Mutex::new(rows) };
    write_csv(&manifest.path, &manifest.rows.lock().expect("manifest lock"))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    pool.install(|| -> Result<()> {
        let mut seeds: Vec<u64> = todo.iter().map(|c| c.seed).collect();
        seeds.dedup();
        let data = seeds
            .par_iter()
            .map(|&s| Ok((s, SeedData::generate(cfg, s)?)))
            .collect::<Result<BTreeMap<u64, SeedData>>>()?;
        todo.par_iter().try_for_each(|cell| {
            let attempt = || {
                run_cell(cfg, cell, &data[&cell.seed], &layout)
                    .and_then(|row| write_csv(&layout.cell_result(&cell.run_id), &[row]))
            };
            let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(attempt)).unwrap_or_else(|panic| {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(Error::Invalid(format!("panicked: {msg}")))
            });
            match result {
                Ok(()) => manifest.set(&cell.run_id, CellStatus::Done, String::new()),
                Err(e) => manifest.set(&cell.run_id, CellStatus::Failed, e.to_string()),
            }
        })
    })?;

    let rows = manifest.rows.into_inner().expect("manifest lock");
    let mut summary = Vec::new();
    let mut failed = Vec::new();
    for row in rows {
        match row.status {
            CellStatus::Done => summary.extend(read_csv::<SummaryRow>(&layout.cell_result(&row.run_id))?),
            _ => failed.push((row.run_id, row.detail)),
        }
    }
    write_csv(&layout.summary(), &summary)?;
    Ok(RunOutcome { summary, failed })
}

/// Pretrains (for plan cells), fine-tunes, and evaluates one cell.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, data: &SeedData, layout: &Layout) -> Result<SummaryRow> {
    let mut row = SummaryRow {
        run_id: cell.run_id.clone(),
        plan: cell.name.clone(),
        regime: None,
        loss: None,
        schedule: None,
        k: None,
        truncate_len: None,
        seed: cell.seed,
        target_fer: 0.0,
        source_fer: 0.0,
        target_errors: 0,
        target_frames: 0,
        source_errors: 0,
        source_frames: 0,
        peak_bytes: None,
        peak_activation_bytes: None,
        final_pretrain_loss: None,
    };
    let result = match cell.kind {
        CellKind::Baseline(Baseline::Supervised) => {
            supervised(cfg, cell, data, layout, &data.labeled, Stream::Finetune)?
        }
        CellKind::Baseline(Baseline::PseudoLabel) => {
            let (teacher, head, _) = train_head(cfg, data, data.init.clone(), &data.labeled, None, Stream::Finetune)?;
            let pseudo = pseudo_label(&teacher, &head, &data.pool, crate::data::TARGET_DOMAIN)?;
            supervised(cfg, cell, data, layout, &data.labeled.clone().union(pseudo), Stream::Student)?
        }
        CellKind::Plan(i) => {
            let plan = &cfg.plans[i];
            row.regime = Some(plan.regime);
            row.loss = Some(plan.loss.kind.to_string());
            if plan.regime == Regime::Ilw {
                row.k = Some(plan.layers_per_step);
                row.schedule =
                    Some(if plan.steps_per_layer.is_some() { "custom".into() } else { plan.schedule.kind.to_string() });
            }
            row.truncate_len = plan.truncate_len;
            let state = pretrain(cfg, cell, plan, data, layout)?;
            let metrics: Vec<MetricsRow> = read_csv(&layout.metrics(&cell.run_id))?;
            row.peak_bytes = metrics.iter().map(|m| m.peak_bytes).max();
            row.peak_activation_bytes = metrics.iter().map(|m| m.activation_bytes).max();
            row.final_pretrain_loss = metrics.last().map(|m| m.loss);
            let (_, _, curve) = train_head(cfg, data, state, &data.labeled, Some(&cell.run_id), Stream::Finetune)?;
            write_csv(&layout.curve(&cell.run_id), &curve.0)?;
            curve.1
        }
    };
    row.target_fer = result.target_fer();
    row.source_fer = result.source_fer();
    row.target_errors = result.target.errors;
    row.target_frames = result.target.frames;
    row.source_errors = result.source.errors;
    row.source_frames = result.source.frames;
    Ok(row)
}

fn supervised(
    cfg: &ExperimentConfig,
    cell: &Cell,
    data: &SeedData,
    layout: &Layout,
    labeled: &LabeledSet,
    stream: Stream,
) -> Result<EvalResult> {
    let (_, _, (curve, result)) = train_head(cfg, data, data.init.clone(), labeled, Some(&cell.run_id), stream)?;
    write_csv(&layout.curve(&cell.run_id), &curve)?;
    Ok(result)
}

type Curve = (Vec<CurveRow>, EvalResult);

/// Fine-tunes `state` with a fresh head. With a run id, the frame error
/// curve is sampled every `curve_every` steps, at step 0 and at the end.
fn train_head(
    cfg: &ExperimentConfig,
    data: &SeedData,
    mut state: EncoderState,
    labeled: &LabeledSet,
    run_id: Option<&str>,
    stream: Stream,
) -> Result<(EncoderState, ProbeHead, Curve)> {
    let mut head =
        ProbeHead::new(cfg.encoder.model_dim, cfg.finetune.num_classes, &mut seed_rng(data.seed, Stream::Head));
    let steps = cfg.finetune.steps;
    let score =
        |state: &EncoderState, head: &ProbeHead| evaluate(state, head, &data.eval_source, &data.eval_target, data.seed);
    let point = |run_id: &str, step: usize, e: &EvalResult| CurveRow {
        run_id: run_id.into(),
        step,
        source_fer: e.source_fer(),
        target_fer: e.target_fer(),
    };
    let mut curve = Vec::new();
    if let Some(id) = run_id {
        curve.push(point(id, 0, &score(&state, &head)?));
    }
    let mut rng = seed_rng(data.seed, stream);
    finetune(&mut state, &mut head, labeled, &cfg.finetune, &mut rng, |step, _, s, h| {
        if let Some(id) = run_id {
            if step < steps && cfg.curve_every > 0 && step % cfg.curve_every == 0 {
                curve.push(point(id, step, &score(s, h)?));
            }
        }
        Ok(())
    })?;
    let result = score(&state, &head)?;
    if let Some(id) = run_id {
        if steps > 0 {
            curve.push(point(id, steps, &result));
        }
    }
    Ok((state, head, (curve, result)))
}

/// Runs the plan's pretraining, resuming after the last block checkpoint.
fn pretrain(
    cfg: &ExperimentConfig,
    cell: &Cell,
    plan: &PretrainPlan,
    data: &SeedData,
    layout: &Layout,
) -> Result<EncoderState> {
    let id = &cell.run_id;
    let final_path = layout.final_checkpoint(id);
    if final_path.exists() && layout.metrics(id).exists() {
        return load_checkpoint(&final_path);
    }
    create_dir(&layout.checkpoints(id))?;
    let blocks = plan.blocks(cfg.encoder.num_layers)?;
    let done = (1..=blocks.len()).take_while(|&b| layout.block_checkpoint(id, b).exists()).last().unwrap_or(0);
    let start_step: usize = blocks[..done].iter().map(|b| b.steps).sum();
    let (state, mut rows, mut memory) = if done > 0 {
        let keep = |step: usize| step < start_step;
        let rows: Vec<MetricsRow> =
            read_csv(&layout.metrics(id))?.into_iter().filter(|r: &MetricsRow| keep(r.step)).collect();
        let memory: Vec<MemoryRow> =
            read_csv(&layout.memory(id))?.into_iter().filter(|r: &MemoryRow| keep(r.step)).collect();
        if rows.len() != start_step {
            return Err(Error::Invalid(format!(
                "{id}: metrics hold {} of the {start_step} finished steps",
                rows.len()
            )));
        }
        (load_checkpoint(layout.block_checkpoint(id, done))?, rows, memory)
    } else {
        (data.init.clone(), Vec::new(), Vec::new())
    };

    let ends: Vec<usize> = blocks
        .iter()
        .scan(0, |acc, b| {
            *acc += b.steps;
            Some(*acc)
        })
        .collect();
    let mut trainer = Trainer::new(state, plan.clone())?;
    trainer.pretrain_with(&data.pool, cell.seed, start_step, |t, m, outcome| {
        let block = m.active_block;
        rows.push(MetricsRow::new(id, m));
        if m.step == ends[block - 1] - blocks[block - 1].steps {
            memory.push(memory_row(cfg, plan, id, block, m.step, &blocks[block - 1].layers, outcome)?);
        }
        if m.step + 1 == ends[block - 1] {
            write_csv(&layout.metrics(id), &rows)?;
            write_csv(&layout.memory(id), &memory)?;
            save_checkpoint(&t.state, layout.block_checkpoint(id, block))?;
        }
        Ok(())
    })?;
    write_csv(&layout.metrics(id), &rows)?;
    write_csv(&layout.memory(id), &memory)?;
    save_checkpoint(&trainer.state, &final_path)?;
    Ok(trainer.state)
}

fn memory_row(
    cfg: &ExperimentConfig,
    plan_cfg: &PretrainPlan,
    run_id: &str,
    block: usize,
    step: usize,
    layers: &std::ops::RangeInclusive<usize>,
    outcome: &StepOutcome,
) -> Result<MemoryRow> {
    let spec = StepSpec {
        regime: plan_cfg.regime,
        active: layers.clone(),
        shape: outcome.shape.clone(),
        loss: plan_cfg.loss.clone(),
        quantization: QuantizationMode::F32,
    };
    let planned = plan(&cfg.encoder, &spec)?.report;
    let m = &outcome.report;
    Ok(MemoryRow {
        run_id: run_id.into(),
        block,
        step,
        activation_measured: m.activation_bytes,
        activation_planned: planned.activation_bytes,
        grad_measured: m.grad_bytes,
        grad_planned: planned.grad_bytes,
        optimizer_measured: m.optimizer_bytes,
        optimizer_planned: planned.optimizer_bytes,
        param_measured: m.param_bytes,
        param_planned: planned.param_bytes,
        frozen_weight_measured: m.frozen_weight_bytes,
        frozen_weight_planned: planned.frozen_weight_bytes,
    })
}
