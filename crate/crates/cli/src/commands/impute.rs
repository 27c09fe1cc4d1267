//! Imputes the missing cells of a dataset under previously fitted
//! parameters and writes exactly those cells as a long table.

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::model_io::load_model;
use crate::modelspec::parse_table_options;
use multiway::io::{format_value, load_long_table, TableSchema};
use multiway::missing::impute_all;
use std::fs::File;
use std::io::{BufWriter, Write};

const KEYS: [&str; 5] = ["data", "model", "dims", "delimiter", "missing_token"];

pub fn run(cfg: &Config) -> Result<()> {
    cfg.check_keys("impute", &KEYS, &[])?;
    let saved = load_model(&cfg.require_path("model")?)?;
    let dims = match cfg.get_list("dims") {
        Some(dims) => {
            if dims.len() != saved.dims.len() {
                return Err(CliError::config(format!(
                    "key 'dims' lists {} columns but the model has {} dimensions",
                    dims.len(),
                    saved.dims.len()
                )));
            }
            dims
        }
        None => saved.dims.clone(),
    };
    let (delimiter, missing_token) = parse_table_options(cfg)?;
    let mut schema = TableSchema::new(dims);
    schema.delimiter = delimiter;
    schema.missing_token = missing_token;
    schema.fixed_levels = saved.levels.iter().map(|l| Some(l.clone())).collect();

    let data = cfg.require_path("data")?;
    let table = load_long_table(&data, &schema)?;
    if table.sample.shape() != saved.model.shape() {
        return Err(CliError::data(format!(
            "data has shape {:?} but the model has {:?}",
            table.sample.shape().dims(),
            saved.model.shape().dims()
        )));
    }
    let out = cfg.out_dir()?;

    let imputed = impute_all(&table.sample, &saved.model)?;

    let path = out.join("imputed.csv");
    let mut w = BufWriter::new(
        File::create(&path)
            .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", path.display())))?,
    );
    let d = schema.delimiter;
    let with_sample = !table.sample_ids.is_empty();
    let mut header = schema.dimensions.join(&d.to_string());
    if with_sample {
        header.push(d);
        header.push_str(&schema.sample_column);
    }
    header.push(d);
    header.push_str(&schema.value_column);
    writeln!(w, "{header}")?;

    let shape = table.sample.shape().clone();
    let mut cells = 0usize;
    for (q, obs) in table.sample.observations().iter().enumerate() {
        for t in 0..shape.len() {
            if obs.mask().is_observed(t) {
                continue;
            }
            let idx = shape.multi_index(t);
            let mut row = String::new();
            for (k, &c) in idx.iter().enumerate() {
                row.push_str(&table.levels[k][c]);
                row.push(d);
            }
            if with_sample {
                row.push_str(&table.sample_ids[q]);
                row.push(d);
            }
            row.push_str(&format_value(imputed[q].values()[t]));
            writeln!(w, "{row}")?;
            cells += 1;
        }
    }
    w.flush()?;

    cfg.write_resolved(&out.join("resolved.cfg"))?;
    println!("imputed {cells} missing cell(s) into {}", path.display());
    Ok(())
}
