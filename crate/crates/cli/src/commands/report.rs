//! Aggregates metrics tables into per-design-cell five-number summaries:
//! a combined summary CSV, per-metric plot-data files, and optional SVG
//! boxplots. Tables sharing a label pool their rows, so a design cell can
//! be spread over many single-replication runs.

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::metrics::{five_number, read_raw_table, FiveNumber, NA};
use crate::svg::write_boxplot_svg;
use crate::OutputFormat;
use multiway::io::format_value;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const KEYS: [&str; 3] = ["inputs", "labels", "metrics"];

fn default_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| String::from("table"))
        })
}

fn file_token(metric: &str) -> String {
    metric
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn run(cfg: &Config, format: OutputFormat) -> Result<()> {
    cfg.check_keys("report", &KEYS, &[])?;
    let inputs = cfg
        .get_list("inputs")
        .filter(|l| !l.is_empty())
        .ok_or_else(|| CliError::config("missing required key 'inputs'".to_string()))?;
    let labels = match cfg.get_list("labels") {
        Some(labels) => {
            if labels.len() != inputs.len() {
                return Err(CliError::config(format!(
                    "{} labels for {} inputs",
                    labels.len(),
                    inputs.len()
                )));
            }
            labels
        }
        None => inputs
            .iter()
            .map(|p| default_label(Path::new(p)))
            .collect(),
    };
    let out = cfg.out_dir()?;

    let tables: Vec<_> = inputs
        .iter()
        .map(|p| read_raw_table(Path::new(p)))
        .collect::<Result<_>>()?;

    let metrics = match cfg.get_list("metrics") {
        Some(m) if !m.is_empty() => m,
        _ => tables[0]
            .header
            .iter()
            .filter(|c| c.as_str() != "rep")
            .cloned()
            .collect(),
    };
    if metrics.is_empty() {
        return Err(CliError::data(format!(
            "'{}' has no metric columns beyond 'rep'",
            inputs[0]
        )));
    }

    // Pool values per (cell label, metric), keeping first-appearance label
    // order.
    let mut cells: Vec<String> = Vec::new();
    for label in &labels {
        if !cells.contains(label) {
            cells.push(label.clone());
        }
    }
    let mut pooled: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); metrics.len()]; cells.len()];
    for ((input, label), table) in inputs.iter().zip(&labels).zip(&tables) {
        let cell = cells.iter().position(|c| c == label).unwrap();
        for (mi, metric) in metrics.iter().enumerate() {
            let col = table
                .header
                .iter()
                .position(|c| c == metric)
                .ok_or_else(|| {
                    CliError::data(format!("'{input}' has no column '{metric}'"))
                })?;
            for (ri, row) in table.rows.iter().enumerate() {
                let field = &row[col];
                if field.is_empty() || field == NA {
                    continue;
                }
                let v: f64 = field.parse().map_err(|_| {
                    CliError::data(format!(
                        "{input}: row {}: column '{metric}': '{field}' is not a number",
                        ri + 2
                    ))
                })?;
                pooled[cell][mi].push(v);
            }
        }
    }

    let summaries: Vec<Vec<Option<FiveNumber>>> = pooled
        .iter()
        .map(|per_metric| per_metric.iter().map(|v| five_number(v)).collect())
        .collect();

    let path = out.join("summary.csv");
    let mut w = BufWriter::new(
        File::create(&path)
            .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", path.display())))?,
    );
    writeln!(w, "cell,metric,count,min,q1,median,q3,max")?;
    for (ci, cell) in cells.iter().enumerate() {
        for (mi, metric) in metrics.iter().enumerate() {
            let count = pooled[ci][mi].len();
            match summaries[ci][mi] {
                Some(s) => writeln!(
                    w,
                    "{cell},{metric},{count},{},{},{},{},{}",
                    format_value(s.min),
                    format_value(s.q1),
                    format_value(s.median),
                    format_value(s.q3),
                    format_value(s.max)
                )?,
                None => writeln!(w, "{cell},{metric},0,{NA},{NA},{NA},{NA},{NA}")?,
            }
        }
    }
    w.flush()?;

    for (mi, metric) in metrics.iter().enumerate() {
        let with_data: Vec<(String, FiveNumber)> = cells
            .iter()
            .enumerate()
            .filter_map(|(ci, cell)| summaries[ci][mi].map(|s| (cell.clone(), s)))
            .collect();
        let plot = out.join(format!("plot_{}.csv", file_token(metric)));
        let mut w = BufWriter::new(File::create(&plot).map_err(|e| {
            CliError::Io(format!("cannot create '{}': {e}", plot.display()))
        })?);
        writeln!(w, "cell,min,q1,median,q3,max")?;
        for (cell, s) in &with_data {
            writeln!(
                w,
                "{cell},{},{},{},{},{}",
                format_value(s.min),
                format_value(s.q1),
                format_value(s.median),
                format_value(s.q3),
                format_value(s.max)
            )?;
        }
        w.flush()?;
        if matches!(format, OutputFormat::Svg) && !with_data.is_empty() {
            write_boxplot_svg(
                &out.join(format!("boxplot_{}.svg", file_token(metric))),
                metric,
                &with_data,
            )?;
        }
    }

    cfg.write_resolved(&out.join("resolved.cfg"))?;
    println!(
        "summarized {} table(s) into {} design cell(s) in {}",
        inputs.len(),
        cells.len(),
        out.display()
    );
    Ok(())
}
