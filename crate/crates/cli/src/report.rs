//! Roll sweep summaries up into one plot-ready table.

use std::path::Path;

use walkdir::WalkDir;

use missnodags::csv;
use missnodags::error::{Error, Result};

use crate::sweep::{group_rows, SummaryRow, SUMMARY_FILE};

/// Column names of the report output: one row per (rate, method).
pub const REPORT_HEADER: &str = "missing_rate,method,n,shd_mean,shd_stderr,nll_mean,nll_stderr";

/// Mean and standard error of the mean (sample stddev / sqrt(n)). One value
/// has no spread evidence, so its stderr is reported as zero; an empty slice
/// yields NaNs.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `report`: find every summary file under `runs`, pool the successful rows,
/// and write one aggregated row per (rate, method), ordered by rate then
/// method name.
pub fn cmd_report(runs: &Path, out: &Path) -> Result<usize> {
    let mut rows = Vec::new();
    for entry in WalkDir::new(runs).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                return Err(Error::invalid(
                    "runs",
                    format!("could not walk `{}`: {e}", runs.display()),
                ))
            }
        };
        if entry.file_type().is_file() && entry.file_name() == SUMMARY_FILE {
            rows.extend(read_summary(entry.path())?);
        }
    }
    rows.retain(|r| r.is_ok());
    if rows.is_empty() {
        return Err(Error::invalid(
            "runs",
            format!(
                "no successful summary rows found under `{}`; run `sweep` first",
                runs.display()
            ),
        ));
    }
    rows.sort_by(|a, b| {
        a.rate
            .partial_cmp(&b.rate)
            .unwrap()
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.seed.cmp(&b.seed))
    });

    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    let groups = group_rows(&rows);
    let n_groups = groups.len();
    for group in groups {
        let (shd_mean, shd_stderr) =
            mean_stderr(&group.iter().map(|r| r.shd).collect::<Vec<_>>());
        let (nll_mean, nll_stderr) =
            mean_stderr(&group.iter().map(|r| r.nll_test).collect::<Vec<_>>());
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv::format_float(group[0].rate),
            group[0].method,
            group.len(),
            csv::format_float(shd_mean),
            csv::format_float(shd_stderr),
            csv::format_float(nll_mean),
            csv::format_float(nll_stderr),
        ));
    }
    csv::write_file(out, &text)?;
    Ok(n_groups)
}

/// Parse one summary file. The `status` column is optional so externally
/// assembled summaries in the documented layout are accepted too.
fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let lines = csv::read_lines(path)?;
    let header = lines.first().map(|l| l.trim()).unwrap_or("");
    if !header.starts_with("missing_rate,method,seed,shd,nll_test,wall_time_s") {
        return Err(Error::parse(
            path,
            1,
            format!("unexpected summary header `{header}`"),
        ));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 6 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected at least 6 fields, got {}", fields.len()),
            ));
        }
        rows.push(SummaryRow {
            rate: csv::parse_float(fields[0], path, line_no)?,
            method: fields[1].to_string(),
            seed: csv::parse_usize(fields[2], path, line_no)? as u64,
            shd: csv::parse_float(fields[3], path, line_no)?,
            nll_test: csv::parse_float(fields[4], path, line_no)?,
            wall_time_s: csv::parse_float(fields[5], path, line_no)?,
            status: fields.get(6).unwrap_or(&"ok").to_string(),
        });
    }
    Ok(rows)
}
