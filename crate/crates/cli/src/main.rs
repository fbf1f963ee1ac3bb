use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lwssl::experiment::{self, ExperimentConfig, Table};
use lwssl::gradcheck;
use lwssl::membudget::QuantizationMode;

mod selftest;

/// Configs shipped with the binary, usable by name in place of a path.
const BUNDLED: &[(&str, &str)] = &[
    ("quickstart", include_str!("../../../configs/quickstart.toml")),
    ("full", include_str!("../../../configs/full.toml")),
    ("paper_scale", include_str!("../../../configs/paper_scale.toml")),
];

/// Exit code of a run or report with unfinished cells.
const PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "lwssl", version, about = "Layer-wise self-supervised pretraining experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, fine-tune and evaluate every plan × seed cell, then report.
    Run {
        /// Config file, or the name of a bundled config.
        config: String,
        /// Comma-separated seeds, replacing the config's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Results directory [default: results/<name>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cells run concurrently, replacing the config's.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Tabulate a results directory.
    Report { dir: PathBuf },
    /// Planned memory of every block of every plan, without training.
    Memplan {
        config: String,
        /// Frozen layer weights held as int8.
        #[arg(long)]
        quantized_frozen: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Finite-difference checks of every op and SSL loss in f64.
    Gradcheck {
        /// Random cases per op.
        #[arg(long, default_value_t = 100)]
        cases: u64,
    },
    /// Quick end-to-end health check.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

fn load_config(name: &str) -> Result<ExperimentConfig> {
    let path = Path::new(name);
    if !path.exists() {
        if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == name) {
            return ExperimentConfig::from_toml(text).with_context(|| format!("bundled config {name}"));
        }
        let names: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
        bail!("{name}: no such file, and not a bundled config ({})", names.join(", "));
    }
    Ok(ExperimentConfig::load(path)?)
}

fn print_report(dir: &Path) -> Result<bool> {
    let report = experiment::report(dir)?;
    print!("{}", report.render());
    for path in &report.curves {
        println!("curve: {}", path.display());
    }
    Ok(report.is_complete())
}

fn run(config: &str, seeds: Option<Vec<u64>>, out: Option<PathBuf>, workers: Option<usize>) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    if let Some(workers) = workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    let out = out.unwrap_or_else(|| Path::new("results").join(&cfg.name));
    let cells = experiment::cells(&cfg).len();
    eprintln!("running {cells} cells into {} with {} workers", out.display(), cfg.workers);
    let started = Instant::now();
    let outcome = experiment::run(&cfg, &out)?;
    eprintln!("finished in {:.1?}", started.elapsed());
    for (id, detail) in &outcome.failed {
        eprintln!("failed: {id}: {detail}");
    }
    let complete = print_report(&out)? && outcome.is_complete();
    Ok(if complete { ExitCode::SUCCESS } else { ExitCode::from(PARTIAL) })
}

fn memplan(config: &str, quantized: bool, format: Format) -> Result<()> {
    let cfg = load_config(config)?;
    let q = if quantized { QuantizationMode::Int8 } else { QuantizationMode::F32 };
    let rows = experiment::memplan(&cfg, q)?;
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for row in &rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Format::Text => {
            let mb = |b: u64| format!("{:.2}", b as f64 / 1e6);
            let header = [
                "plan",
                "block",
                "layers",
                "batch",
                "len",
                "act_MB",
                "grad_MB",
                "optim_MB",
                "param_MB",
                "frozen_MB",
                "total_MB",
            ];
            let mut table = Table {
                name: format!("{} ({} frozen weights)", cfg.name, if quantized { "int8" } else { "f32" }),
                header: header.iter().map(|s| s.to_string()).collect(),
                rows: Vec::new(),
            };
            for r in rows {
                table.rows.push(vec![
                    r.plan,
                    r.block.to_string(),
                    format!("{}-{}", r.first_layer, r.last_layer),
                    r.batch.to_string(),
                    r.input_len.to_string(),
                    mb(r.activation_bytes),
                    mb(r.grad_bytes),
                    mb(r.optimizer_bytes),
                    mb(r.param_bytes),
                    mb(r.frozen_weight_bytes),
                    mb(r.total_bytes),
                ]);
            }
            print!("{}", table.render());
        }
    }
    Ok(())
}

fn run_gradcheck(cases: u64) -> Result<ExitCode> {
    let started = Instant::now();
    let results = gradcheck::suite(cases)?;
    for r in &results {
        println!("{:<16} max rel error {:.2e}  {}", r.name, r.rel_error, if r.passed() { "ok" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks × {cases} cases in {:.1?}, {failed} failed", results.len(), started.elapsed());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seeds, out, workers } => run(&config, seeds, out, workers),
        Command::Report { dir } => Ok(if print_report(&dir)? { ExitCode::SUCCESS } else { ExitCode::from(PARTIAL) }),
        Command::Memplan { config, quantized_frozen, format } => {
            memplan(&config, quantized_frozen, format).map(|()| ExitCode::SUCCESS)
        }
        Command::Gradcheck { cases } => run_gradcheck(cases),
        Command::Selftest => selftest::run(),
    }
}
