//! Config-driven experiment runner: pretrain, fine-tune and evaluate every
//! (plan, seed) cell, then tabulate the results.

mod config;
mod memplan;
mod report;
mod runner;

pub use config::{plan_name, Baseline, DataConfig, ExperimentConfig, MemplanConfig};
pub use memplan::{input_len, memplan, MemplanRow};
pub use report::{report, Report, Table, MISSING};
pub use runner::{
    cells, run, run_cell, Cell, CellKind, CellStatus, CurveRow, Layout, ManifestRow, MemoryRow, MetricsRow, RunOutcome,
    SeedData, SummaryRow, MANIFEST, RESOLVED_CONFIG, SUMMARY,
};
