//! Fitted-model parameter files: a mean table, one labeled factor matrix
//! per dimension, and a flat scalar file tying them together. A directory
//! written by `save_model` loads back into the exact same model.

use crate::config::{write_pairs, Config};
use crate::error::{CliError, Result};
use multiway::io::{
    format_value, load_long_table, write_labeled_matrix, write_long_table, LongTable,
    TableSchema,
};
use multiway::io::read_labeled_matrix;
use multiway::missing::{PartialArray, PartialSample};
use multiway::normal::{ArrayNormalModel, CovarianceFactor, KroneckerCovariance};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const MODEL_FILE: &str = "model.cfg";
pub const MEAN_FILE: &str = "mean.csv";
pub const TRACE_FILE: &str = "trace.csv";

pub fn factor_file(k: usize) -> String {
    format!("factor_{}.csv", k + 1)
}

/// A model read back from parameter files, with the label dictionaries and
/// scalar metadata that came with it.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: ArrayNormalModel,
    /// Dimension column names in axis order.
    pub dims: Vec<String>,
    /// Per-dimension level labels; these define the axis order.
    pub levels: Vec<Vec<String>>,
    /// Contents of the scalar file (fit summary, ratio estimates, ...).
    pub scalars: Config,
}

/// Writes `mean.csv`, `factor_<k>.csv` for every dimension, and `model.cfg`
/// holding the dimension names plus the caller's scalar pairs.
pub fn save_model(
    dir: &Path,
    model: &ArrayNormalModel,
    dims: &[String],
    levels: &[Vec<String>],
    extras: &[(String, String)],
) -> Result<()> {
    let order = model.shape().order();
    if dims.len() != order || levels.len() != order {
        return Err(CliError::data(format!(
            "{} dimension names and {} level lists for an order-{order} model",
            dims.len(),
            levels.len()
        )));
    }
    let mean_table = LongTable {
        sample: PartialSample::new(vec![PartialArray::complete(model.mean().clone())?])?,
        levels: levels.to_vec(),
        sample_ids: Vec::new(),
    };
    let schema = TableSchema::new(dims.to_vec());
    write_long_table(&mean_table, &schema, &dir.join(MEAN_FILE), false)?;
    for (k, factor) in model.covariance().factors().iter().enumerate() {
        write_labeled_matrix(&dir.join(factor_file(k)), &levels[k], factor.sigma(), ',')?;
    }
    let mut pairs = vec![("dims".to_string(), dims.join(","))];
    pairs.extend_from_slice(extras);
    write_pairs(&dir.join(MODEL_FILE), &pairs)
}

/// Loads a directory written by [`save_model`]. The factor files' labels
/// are authoritative for axis order; the mean table must cover every cell.
pub fn load_model(dir: &Path) -> Result<SavedModel> {
    let scalars = Config::from_file(&dir.join(MODEL_FILE))?;
    let dims = scalars
        .get_list("dims")
        .filter(|d| !d.is_empty())
        .ok_or_else(|| {
            CliError::data(format!(
                "'{}' does not declare its dimensions",
                dir.join(MODEL_FILE).display()
            ))
        })?;

    let mut levels = Vec::with_capacity(dims.len());
    let mut factors = Vec::with_capacity(dims.len());
    for k in 0..dims.len() {
        let (labels, matrix) = read_labeled_matrix(&dir.join(factor_file(k)), ',')?;
        factors.push(CovarianceFactor::new(matrix, k)?);
        levels.push(labels);
    }

    let mut schema = TableSchema::new(dims.clone());
    schema.fixed_levels = levels.iter().map(|l| Some(l.clone())).collect();
    let mean_table = load_long_table(&dir.join(MEAN_FILE), &schema)?;
    let mean_obs = &mean_table.sample.observations()[0];
    if mean_table.sample.len() != 1 || mean_obs.observed_count() != mean_obs.shape().len() {
        return Err(CliError::data(format!(
            "'{}' must hold one complete array",
            dir.join(MEAN_FILE).display()
        )));
    }
    let model = ArrayNormalModel::new(
        mean_obs.values().clone(),
        KroneckerCovariance::new(factors)?,
    )?;
    Ok(SavedModel {
        model,
        dims,
        levels,
        scalars,
    })
}

/// Two-column log-likelihood trace, one row per completed sweep.
pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path)
            .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", path.display())))?,
    );
    writeln!(w, "iteration,loglik")?;
    for (i, ll) in trace.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, format_value(*ll))?;
    }
    w.flush()?;
    Ok(())
}
