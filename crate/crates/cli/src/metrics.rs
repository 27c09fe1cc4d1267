//! Per-replication experiment metrics, their CSV form, and the quartile
//! summaries the report command builds from them.
//!
//! The metrics table is deterministic for a given config and seed, so
//! wall-clock runtimes go to a separate timings file that reruns are free
//! to change.

use crate::error::{CliError, Result};
use multiway::io::format_value;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TRAIT_FILE: &str = "trait_metrics.csv";
pub const NA: &str = "NA";

/// One cross-validation replication: correlation between held-out values
/// and their imputations, covariance error against the generating model
/// (when known), and fit effort.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub rep: usize,
    /// Pearson correlation over deleted-then-imputed cells; `None` when
    /// fewer than two cells were scored or a side had zero variance.
    pub correlation: Option<f64>,
    /// Mean squared entrywise error between the implied covariance and the
    /// true one; `None` without a truth model.
    pub cov_mse: Option<f64>,
    pub iterations: usize,
    pub runtime_s: f64,
}

/// Per-trait-level correlation of one replication.
#[derive(Debug, Clone)]
pub struct TraitRecord {
    pub rep: usize,
    pub level: String,
    pub correlation: Option<f64>,
}

fn opt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format_value(x),
        None => NA.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        CliError::Io(format!("cannot create '{}': {e}", path.display()))
    })?))
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "rep,correlation,cov_mse,iterations")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.rep,
            opt_value(r.correlation),
            opt_value(r.cov_mse),
            r.iterations
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "rep,runtime_s")?;
    for r in records {
        writeln!(w, "{},{}", r.rep, format_value(r.runtime_s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trait_metrics(path: &Path, records: &[TraitRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "rep,trait,correlation")?;
    for r in records {
        writeln!(w, "{},{},{}", r.rep, r.level, opt_value(r.correlation))?;
    }
    w.flush()?;
    Ok(())
}

/// Pearson correlation; `None` for fewer than two pairs or a degenerate
/// margin.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Quantile by linear interpolation between order statistics (the
/// inclusive method): rank `p * (n-1)` split into its integer and
/// fractional parts. `values` must be sorted and non-empty.
pub fn quantile_inclusive(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let w = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * w
}

/// Five-number summary of an unsorted, possibly empty batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(FiveNumber {
        min: sorted[0],
        q1: quantile_inclusive(&sorted, 0.25),
        median: quantile_inclusive(&sorted, 0.5),
        q3: quantile_inclusive(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// A delimited text table kept as raw strings; the report command parses
/// only the columns it was asked to summarize.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_raw_table(path: &Path) -> Result<RawTable> {
    let file = File::open(path)
        .map_err(|e| CliError::Io(format!("cannot read '{}': {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => split(&h?),
        None => {
            return Err(CliError::data(format!(
                "'{}' is empty",
                path.display()
            )))
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split(&line);
        if fields.len() != header.len() {
            return Err(CliError::data(format!(
                "{}:{}: row has {} fields, expected {}",
                path.display(),
                i + 2,
                fields.len(),
                header.len()
            )));
        }
        rows.push(fields);
    }
    Ok(RawTable { header, rows })
}

fn split(line: &str) -> Vec<String> {
    line.trim_end_matches(['\r', '\n'])
        .split(',')
        .map(|f| f.trim().to_string())
        .collect()
}
