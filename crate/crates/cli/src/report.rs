//! Metrics records and the cross-run comparison table.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ctkt::config::ExperimentConfig;
use ctkt::trainer::EpochRecord;

use crate::fail;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsLine {
    Epoch(EpochRecord),
    Summary(RunSummary),
}

/// Final line of a run: CERs of the averaged model and mean timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub aux: String,
    pub teacher: String,
    pub seed: u64,
    pub epochs: usize,
    pub averaged_epochs: Vec<usize>,
    pub dev_cer: f64,
    pub test_cer: f64,
    pub dev_cer_lm: f64,
    pub test_cer_lm: f64,
    pub forward_secs_per_iter: f64,
    pub backward_secs_per_iter: f64,
    pub checksum: String,
}

impl RunSummary {
    /// `cers` = dev, test, dev with LM, test with LM.
    pub fn new(cfg: &ExperimentConfig, history: &[EpochRecord], averaged: &[usize], cers: [f64; 4], checksum: u64) -> Self {
        let iters: usize = history.iter().map(|r| r.iterations).sum::<usize>().max(1);
        let weighted = |f: fn(&EpochRecord) -> f64| {
            history.iter().map(|r| f(r) * r.iterations as f64).sum::<f64>() / iters as f64
        };
        let teacher = match cfg.train.variant {
            ctkt::model::Variant::Vanilla => "none".to_owned(),
            _ => cfg.variant_directionality().to_string(),
        };
        Self {
            variant: cfg.train.variant.to_string(),
            aux: cfg.train.loss.aux_kind.to_string(),
            teacher,
            seed: cfg.train.seed,
            epochs: history.len(),
            averaged_epochs: averaged.to_vec(),
            dev_cer: cers[0],
            test_cer: cers[1],
            dev_cer_lm: cers[2],
            test_cer_lm: cers[3],
            forward_secs_per_iter: weighted(|r| r.forward_secs_per_iter),
            backward_secs_per_iter: weighted(|r| r.backward_secs_per_iter),
            checksum: format!("{checksum:016x}"),
        }
    }
}

struct Row {
    run: String,
    summary: RunSummary,
}

fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: MetricsLine = serde_json::from_str(line)
            .map_err(|e| fail(2, format!("{}:{}: malformed metrics line: {e}", path.display(), i + 1)))?;
        if let MetricsLine::Summary(s) = parsed {
            summary = Some(s);
        }
    }
    summary.ok_or_else(|| fail(2, format!("{}: no summary record (training unfinished?)", path.display())))
}

fn run_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

const COLUMNS: [&str; 12] = [
    "run", "variant", "aux", "teacher", "seed", "epochs", "dev_cer", "test_cer", "dev_cer_lm", "test_cer_lm",
    "fwd_s_per_iter", "bwd_s_per_iter",
];

fn text_cells(r: &Row) -> Vec<String> {
    let s = &r.summary;
    vec![
        r.run.clone(),
        s.variant.clone(),
        s.aux.clone(),
        s.teacher.clone(),
        s.seed.to_string(),
        s.epochs.to_string(),
        format!("{:.4}", s.dev_cer),
        format!("{:.4}", s.test_cer),
        format!("{:.4}", s.dev_cer_lm),
        format!("{:.4}", s.test_cer_lm),
        format!("{:.5}", s.forward_secs_per_iter),
        format!("{:.5}", s.backward_secs_per_iter),
    ]
}

fn csv_cells(r: &Row) -> Vec<String> {
    let s = &r.summary;
    vec![
        r.run.clone(),
        s.variant.clone(),
        s.aux.clone(),
        s.teacher.clone(),
        s.seed.to_string(),
        s.epochs.to_string(),
        s.dev_cer.to_string(),
        s.test_cer.to_string(),
        s.dev_cer_lm.to_string(),
        s.test_cer_lm.to_string(),
        s.forward_secs_per_iter.to_string(),
        s.backward_secs_per_iter.to_string(),
    ]
}

fn render_table(rows: &[Row]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(text_cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    // text columns left-aligned, numbers right-aligned
    let render = |items: &[&str]| -> String {
        let parts: Vec<String> = items
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| if i < 4 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_owned() + "\n"
    };
    let mut out = render(&COLUMNS);
    let rules: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out += &render(&rules.iter().map(String::as_str).collect::<Vec<_>>());
    for r in &cells {
        out += &render(&r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn render_csv(rows: &[Row]) -> String {
    let mut out = COLUMNS.join(",") + "\n";
    for r in rows {
        let cells: Vec<String> = csv_cells(r).iter().map(|c| csv_field(c)).collect();
        out += &(cells.join(",") + "\n");
    }
    out
}

pub fn run(metrics: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = metrics
        .iter()
        .map(|p| Ok(Row { run: run_label(p), summary: read_summary(p)? }))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.summary.test_cer.total_cmp(&b.summary.test_cer));
    let table = render_table(&rows);
    let csv_path = out.with_extension("csv");
    ctkt::checkpoint::write_atomic(out, table.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    ctkt::checkpoint::write_atomic(&csv_path, render_csv(&rows).as_bytes())
        .with_context(|| format!("writing {}", csv_path.display()))?;
    print!("{table}");
    println!("wrote {} and {}", out.display(), csv_path.display());
    Ok(())
}
