use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::runner::{read_csv, CellStatus, CurveRow, Layout, ManifestRow, MemoryRow, SummaryRow};
use crate::error::{Error, Result};
use crate::train::Regime;

pub const MISSING: &str = "MISSING";

/// A rendered table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Space-aligned plain text.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = format!("{}\n", self.name);
        for line in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out += cells.join("  ").trim_end();
            out.push('\n');
        }
        out
    }
}

/// Tables and curve files written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    /// Curve CSVs, one per plan with curves.
    pub curves: Vec<PathBuf>,
    /// run ids without a finished result.
    pub missing: Vec<String>,
}

impl Report {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out += &t.render();
            out.push('\n');
        }
        if !self.missing.is_empty() {
            let _ = writeln!(out, "missing cells: {}", self.missing.join(", "));
        }
        out
    }
}

/// One plan's results, by seed; `None` where the cell did not finish.
struct Group {
    name: String,
    seeds: BTreeMap<u64, Option<SummaryRow>>,
}

impl Group {
    fn sample(&self) -> Option<&SummaryRow> {
        self.seeds.values().flatten().next()
    }

    /// Mean of `f` over seeds, or MISSING unless every seed finished.
    fn mean(&self, f: impl Fn(&SummaryRow) -> Option<f64>, digits: usize) -> String {
        let values: Option<Vec<f64>> = self.seeds.values().map(|r| r.as_ref().and_then(&f)).collect();
        match values {
            Some(v) if !v.is_empty() => format!("{:.digits$}", v.iter().sum::<f64>() / v.len() as f64),
            _ => MISSING.into(),
        }
    }

    fn per_seed(&self, f: impl Fn(&SummaryRow) -> f64) -> Vec<String> {
        self.seeds.values().map(|r| r.as_ref().map_or(MISSING.into(), |r| format!("{:.4}", f(r)))).collect()
    }
}

fn split_run_id(run_id: &str) -> Result<(&str, u64)> {
    run_id
        .rsplit_once("-s")
        .and_then(|(name, seed)| Some((name, seed.parse().ok()?)))
        .ok_or_else(|| Error::Invalid(format!("malformed run id {run_id:?} in MANIFEST")))
}

fn or_missing<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

/// Relative change of `value` against `base`, as a signed percentage.
fn relative(value: &str, base: &str) -> String {
    match (value.parse::<f64>(), base.parse::<f64>()) {
        (Ok(v), Ok(b)) if b > 0.0 => format!("{:+.1}%", 100.0 * (v - b) / b),
        _ => MISSING.into(),
    }
}

/// Tabulates a results directory into `<dir>/report/`: `table2.csv` (method
/// × domain frame error), `table3.csv` (block size vs memory and error),
/// `table4.csv` (truncation vs memory and error) and `curve-<plan>.csv`
/// fine-tuning curves averaged over seeds. Unfinished cells show as
/// MISSING.
pub fn report(dir: impl AsRef<Path>) -> Result<Report> {
    let layout = Layout::new(dir.as_ref());
    let manifest: Vec<ManifestRow> = read_csv(&layout.manifest())
        .map_err(|e| Error::Invalid(format!("{} has no readable MANIFEST: {e}", layout.root.display())))?;
    if manifest.is_empty() {
        return Err(Error::Invalid(format!("{}: MANIFEST lists no cells", layout.root.display())));
    }

    let mut groups: Vec<Group> = Vec::new();
    let mut missing = Vec::new();
    for m in &manifest {
        let (name, seed) = split_run_id(&m.run_id)?;
        let row = match m.status {
            CellStatus::Done => read_csv::<SummaryRow>(&layout.cell_result(&m.run_id))?.into_iter().next(),
            _ => None,
        };
        if row.is_none() {
            missing.push(m.run_id.clone());
        }
        match groups.iter_mut().find(|g| g.name == name) {
            Some(g) => {
                g.seeds.insert(seed, row);
            }
            None => groups.push(Group { name: name.into(), seeds: BTreeMap::from([(seed, row)]) }),
        }
    }
    let seeds: Vec<u64> = groups[0].seeds.keys().copied().collect();

    let fer = |r: &SummaryRow| Some(r.target_fer);
    let src = |r: &SummaryRow| Some(r.source_fer);
    let act = |r: &SummaryRow| r.peak_activation_bytes.map(|b| b as f64);
    let peak = |r: &SummaryRow| r.peak_bytes.map(|b| b as f64);

    // Methods × domains. Relative columns compare with supervised training.
    let mut header =
        vec!["plan", "regime", "loss", "target_fer", "source_fer", "target_vs_supervised", "source_vs_supervised"];
    let seed_cols: Vec<String> = seeds.iter().map(|s| format!("target_fer_s{s}")).collect();
    header.extend(seed_cols.iter().map(String::as_str));
    let mut table2 = Table::new("table2: frame error by method and domain", &header);
    let base = groups.iter().find(|g| g.name == "supervised");
    let (base_t, base_s) = base.map_or((String::new(), String::new()), |b| (b.mean(fer, 4), b.mean(src, 4)));
    for g in groups.iter().filter(|g| g.sample().is_none_or(|r| r.truncate_len.is_none())) {
        let s = g.sample();
        let (t, so) = (g.mean(fer, 4), g.mean(src, 4));
        let mut row = vec![
            g.name.clone(),
            or_missing(s.and_then(|r| r.regime)),
            or_missing(s.and_then(|r| r.loss.clone())),
            t.clone(),
            so.clone(),
            relative(&t, &base_t),
            relative(&so, &base_s),
        ];
        row.extend(g.per_seed(|r| r.target_fer));
        table2.rows.push(row);
    }

    // Memory against block size, bottom and top blocks from the memory logs.
    let mut table3 = Table::new(
        "table3: block size vs memory and error",
        &[
            "plan",
            "k",
            "peak_activation_bytes",
            "peak_bytes",
            "bottom_block_activation",
            "top_block_activation",
            "target_fer",
        ],
    );
    let block_activation = |g: &Group, top: bool| -> String {
        let values: Option<Vec<f64>> = g
            .seeds
            .values()
            .map(|r| {
                let r = r.as_ref()?;
                let rows: Vec<MemoryRow> = read_csv(&layout.memory(&r.run_id)).ok()?;
                let row = if top { rows.last() } else { rows.first() }?;
                Some(row.activation_measured as f64)
            })
            .collect();
        values.map_or(MISSING.into(), |v| format!("{:.0}", v.iter().sum::<f64>() / v.len() as f64))
    };
    let mut memory_rows: Vec<(usize, &Group)> = groups
        .iter()
        .filter_map(|g| {
            let r = g.sample()?;
            match (r.regime, r.truncate_len) {
                (Some(Regime::Ilw), None) => Some((r.k.unwrap_or(0), g)),
                (Some(Regime::E2e), None) => Some((usize::MAX, g)),
                _ => None,
            }
        })
        .collect();
    memory_rows.sort_by_key(|(k, _)| *k);
    for (k, g) in memory_rows {
        table3.rows.push(vec![
            g.name.clone(),
            if k == usize::MAX { "all".into() } else { k.to_string() },
            g.mean(act, 0),
            g.mean(peak, 0),
            block_activation(g, false),
            block_activation(g, true),
            g.mean(fer, 4),
        ]);
    }

    // Truncation, with the matching untruncated plan as "full".
    let mut table4 = Table::new(
        "table4: truncation vs memory and error",
        &[
            "plan",
            "truncate_len",
            "peak_activation_bytes",
            "bottom_block_activation",
            "top_block_activation",
            "target_fer",
        ],
    );
    let key = |r: &SummaryRow| (r.regime, r.loss.clone(), r.k, r.schedule.clone());
    let truncated: Vec<_> =
        groups.iter().filter_map(|g| g.sample().filter(|r| r.truncate_len.is_some()).map(key)).collect();
    let mut trunc_rows: Vec<(usize, &Group)> = groups
        .iter()
        .filter_map(|g| {
            let r = g.sample()?;
            truncated.contains(&key(r)).then(|| (r.truncate_len.unwrap_or(usize::MAX), g))
        })
        .collect();
    trunc_rows.sort_by_key(|(t, g)| (std::cmp::Reverse(*t), g.name.clone()));
    for (t, g) in trunc_rows {
        table4.rows.push(vec![
            g.name.clone(),
            if t == usize::MAX { "full".into() } else { t.to_string() },
            g.mean(act, 0),
            block_activation(g, false),
            block_activation(g, true),
            g.mean(fer, 4),
        ]);
    }

    let out = layout.root.join("report");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let tables = vec![table2, table3, table4];
    for (t, file) in tables.iter().zip(["table2.csv", "table3.csv", "table4.csv"]) {
        t.write_csv(&out.join(file))?;
    }

    let mut curves = Vec::new();
    for g in &groups {
        let mut by_step: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for r in g.seeds.values().flatten() {
            let Ok(rows) = read_csv::<CurveRow>(&layout.curve(&r.run_id)) else { continue };
            for c in rows {
                let e = by_step.entry(c.step).or_default();
                e.0 += c.target_fer;
                e.1 += c.source_fer;
                e.2 += 1;
            }
        }
        if by_step.is_empty() {
            continue;
        }
        let mut t = Table::new(&g.name, &["step", "target_fer", "source_fer", "seeds"]);
        for (step, (tf, sf, n)) in by_step {
            let n_f = n as f64;
            t.rows.push(vec![step.to_string(), format!("{:.4}", tf / n_f), format!("{:.4}", sf / n_f), n.to_string()]);
        }
        let path = out.join(format!("curve-{}.csv", g.name));
        t.write_csv(&path)?;
        curves.push(path);
    }
    Ok(Report { tables, curves, missing })
}
