//! The experiment grid: missing rates × methods × dataset seeds.
//!
//! Every cell owns its output subdirectory and random streams, so cells can
//! run on any number of workers without coordinating. Per dataset seed, one
//! complete draw is shared by all rates and methods, and the per-rate masks
//! reuse one noise stream, so method comparisons at a rate are paired and
//! masks are nested across rates (a lower rate hides a subset of what a
//! higher rate hides). `clean` always trains on the complete version of the
//! cell's data.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use missnodags::csv;
use missnodags::dataset::InterventionalDataset;
use missnodags::error::{Error, Result};
use missnodags::graph::GraphStructure;
use missnodags::rng::derive_seed;

use crate::config::{ExperimentConfig, Method};
use crate::pipeline::{execute_run, generate_in_memory, mask_dataset, mask_seed, Generated};
use crate::report::mean_stderr;

/// Per-run rows aggregated by `sweep` and re-read by `report`.
pub const SUMMARY_FILE: &str = "summary.csv";
/// Mean/stderr rollup per (rate, method).
pub const SUMMARY_AGG_FILE: &str = "summary_agg.csv";
/// Column names of `summary.csv` (a trailing `status` column records
/// failures without disturbing the score columns).
pub const SUMMARY_HEADER: &str = "missing_rate,method,seed,shd,nll_test,wall_time_s,status";

const CELL_TAG: u64 = 0x4345_4C4C;

/// One `summary.csv` row.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub rate: f64,
    pub method: String,
    pub seed: u64,
    pub shd: f64,
    pub nll_test: f64,
    pub wall_time_s: f64,
    pub status: String,
}

impl SummaryRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

struct SeedData {
    seed: u64,
    generated: Generated,
    truth: GraphStructure,
    /// One masked variant per configured rate, in rate order.
    masked: Vec<InterventionalDataset>,
}

/// `sweep`: run the whole grid under `out`, writing per-run artifacts to
/// `out/runs/...` and the two summary files at the top level. Individual run
/// failures become rows with an error status; the grid keeps going.
pub fn cmd_sweep(config_path: &Path, out: &Path, jobs: Option<usize>) -> Result<usize> {
    let cfg = ExperimentConfig::read(config_path)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // Data generation is cheap next to training; do it up front and serially
    // so each cell starts from a shared, immutable problem instance.
    let mut seed_data = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let generated = generate_in_memory(&cfg, seed)?;
        let truth = generated.truth_structure();
        let masked = cfg
            .missing
            .rates
            .iter()
            .map(|&rate| mask_dataset(&generated.complete, rate, mask_seed(&cfg, seed)))
            .collect::<Result<Vec<_>>>()?;
        seed_data.push(SeedData {
            seed,
            generated,
            truth,
            masked,
        });
    }

    let mut cells = Vec::new();
    for rate_idx in 0..cfg.missing.rates.len() {
        for &method in &cfg.run.methods {
            for seed_idx in 0..seed_data.len() {
                cells.push((rate_idx, method, seed_idx));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid("jobs", format!("could not build worker pool: {e}")))?;
    let mut rows: Vec<SummaryRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(rate_idx, method, seed_idx)| {
                run_cell(&cfg, out, rate_idx, method, &seed_data[seed_idx])
            })
            .collect()
    });

    rows.sort_by(|a, b| {
        a.rate
            .partial_cmp(&b.rate)
            .unwrap()
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.seed.cmp(&b.seed))
    });
    write_summary(&out.join(SUMMARY_FILE), &rows)?;
    write_aggregate(&out.join(SUMMARY_AGG_FILE), &rows)?;
    Ok(rows.len())
}

fn run_cell(
    cfg: &ExperimentConfig,
    out: &Path,
    rate_idx: usize,
    method: Method,
    data: &SeedData,
) -> SummaryRow {
    let rate = cfg.missing.rates[rate_idx];
    let cell_dir = out
        .join("runs")
        .join(format!("rate_{rate}"))
        .join(method.as_str())
        .join(format!("seed_{}", data.seed));
    let mut train_cfg = cfg.train.clone();
    // Method-independent derivation: at a given (seed, rate), every method
    // starts from the same initialization and optimizer randomness.
    train_cfg.seed = derive_seed(cfg.train.seed, &[CELL_TAG, data.seed, rate.to_bits()]);

    let dataset = match method {
        Method::Clean => &data.generated.complete,
        _ => &data.masked[rate_idx],
    };
    let outcome = execute_run(
        dataset,
        Some(&data.truth),
        Some(&data.generated.test),
        &train_cfg,
        method,
        &cell_dir,
    );
    match outcome {
        Ok(o) => SummaryRow {
            rate,
            method: method.as_str().to_string(),
            seed: data.seed,
            shd: o.shd.map_or(f64::NAN, |v| v as f64),
            nll_test: o.nll_test,
            wall_time_s: o.wall_time_s,
            status: "ok".to_string(),
        },
        Err(e) => SummaryRow {
            rate,
            method: method.as_str().to_string(),
            seed: data.seed,
            shd: f64::NAN,
            nll_test: f64::NAN,
            wall_time_s: f64::NAN,
            status: sanitize_status(&format!("error: {e}")),
        },
    }
}

/// Keep the status CSV-safe: single line, no field separators.
fn sanitize_status(s: &str) -> String {
    s.replace(['\n', '\r'], " ").replace(',', ";")
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv::format_float(r.rate),
            r.method,
            r.seed,
            csv::format_float(r.shd),
            csv::format_float(r.nll_test),
            csv::format_float(r.wall_time_s),
            r.status,
        ));
    }
    csv::write_file(path, &out)
}

fn write_aggregate(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from(
        "missing_rate,method,n,shd_mean,shd_stderr,nll_mean,nll_stderr,wall_time_mean_s\n",
    );
    for group in group_rows(rows) {
        let ok: Vec<&SummaryRow> = group.iter().filter(|r| r.is_ok()).collect();
        let (shd_mean, shd_stderr) = mean_stderr(&ok.iter().map(|r| r.shd).collect::<Vec<_>>());
        let (nll_mean, nll_stderr) =
            mean_stderr(&ok.iter().map(|r| r.nll_test).collect::<Vec<_>>());
        let (wall_mean, _) = mean_stderr(&ok.iter().map(|r| r.wall_time_s).collect::<Vec<_>>());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv::format_float(group[0].rate),
            group[0].method,
            ok.len(),
            csv::format_float(shd_mean),
            csv::format_float(shd_stderr),
            csv::format_float(nll_mean),
            csv::format_float(nll_stderr),
            csv::format_float(wall_mean),
        ));
    }
    csv::write_file(path, &out)
}

/// Split sorted rows into consecutive (rate, method) groups.
pub fn group_rows(rows: &[SummaryRow]) -> Vec<&[SummaryRow]> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        let boundary = i == rows.len()
            || rows[i].rate != rows[start].rate
            || rows[i].method != rows[start].method;
        if boundary {
            groups.push(&rows[start..i]);
            start = i;
        }
    }
    groups
}
