//! Generates synthetic experiments: a seeded truth model, complete data
//! arrays, and one masked dataset per requested missingness proportion,
//! all written in the same formats the fitting commands read back.

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::model_io::save_model;
use crate::modelspec::parse_table_options;
use crate::seed::{stream_seed, DOMAIN_DATA, DOMAIN_MASK, DOMAIN_TRUTH};
use multiway::avspmm::{AdditiveMean, AvspmmModel, DimensionSpec};
use multiway::io::{
    format_value, load_kernel_matrix, marker_kernel, write_labeled_matrix, write_long_table,
    LongTable, MarkerMatrix, TableSchema,
};
use multiway::missing::{PartialArray, PartialSample};
use multiway::normal::sample as draw_sample;
use multiway::tensor::{ObservationMask, Shape};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write as _;
use std::path::Path;

const KEYS: [&str; 8] = [
    "shape",
    "samples",
    "missing",
    "dim_names",
    "mean_dims",
    "sigma2",
    "delimiter",
    "missing_token",
];
const DIM_KEYS: [&str; 5] = ["type", "kernel", "markers", "lambda", "center"];

/// Seeded positive definite factor with strong neighbor correlation and
/// uneven scales: a geometric-decay base plus a Wishart-style perturbation,
/// rescaled by random per-level standard deviations.
fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let mut s = &a * a.transpose() * (0.9 / m as f64);
    for i in 0..m {
        for j in 0..m {
            s[(i, j)] += 0.65_f64.powi((i as i32 - j as i32).abs());
        }
    }
    let d: Vec<f64> = (0..m).map(|_| (0.6 + rng.random::<f64>()).sqrt()).collect();
    for i in 0..m {
        for j in 0..m {
            s[(i, j)] *= d[i] * d[j];
        }
    }
    s
}

fn default_labels(m: usize) -> Vec<String> {
    (1..=m).map(|i| i.to_string()).collect()
}

fn write_marker_matrix(path: &Path, markers: &MarkerMatrix) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        &std::iter::once(String::new())
            .chain((1..=markers.values.ncols()).map(|j| format!("m{j}")))
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for (r, label) in markers.labels.iter().enumerate() {
        out.push_str(label);
        for c in 0..markers.values.ncols() {
            out.push(',');
            out.push_str(&format_value(markers.values[(r, c)]));
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", path.display())))?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn run(cfg: &Config) -> Result<()> {
    cfg.check_keys("simulate", &KEYS, &DIM_KEYS)?;
    let dims = cfg
        .get_shape("shape")?
        .ok_or_else(|| CliError::config("missing required key 'shape'".to_string()))?;
    let shape = Shape::new(dims.clone())?;
    let order = shape.order();

    let names = match cfg.get_list("dim_names") {
        Some(names) => {
            if names.len() != order || names.iter().any(String::is_empty) {
                return Err(CliError::config(format!(
                    "key 'dim_names' must list {order} non-empty names"
                )));
            }
            names
        }
        None => (1..=order).map(|k| format!("dim{k}")).collect(),
    };
    let samples = cfg.get_usize("samples")?.unwrap_or(1);
    if samples == 0 {
        return Err(CliError::config("key 'samples': must be at least 1".to_string()));
    }
    let missing = cfg.get_f64_list("missing")?.unwrap_or_default();
    let mut pcts = Vec::new();
    for &p in &missing {
        if !(0.0..1.0).contains(&p) {
            return Err(CliError::config(format!(
                "key 'missing': proportion {p} is outside [0, 1)"
            )));
        }
        let pct = (p * 100.0).round() as u32;
        if pcts.contains(&pct) {
            return Err(CliError::config(format!(
                "key 'missing': proportions round to the same file name missing_{pct}.csv"
            )));
        }
        pcts.push(pct);
    }
    let sigma2 = cfg.get_f64("sigma2")?.unwrap_or(1.0);
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(CliError::config("key 'sigma2': must be positive".to_string()));
    }
    let seed = cfg.get_u64("seed")?.unwrap_or(0);
    let (delimiter, missing_token) = parse_table_options(cfg)?;
    let out = cfg.out_dir()?;

    // Truth model, one independent stream per dimension.
    let mut specs = Vec::with_capacity(order);
    let mut levels = Vec::with_capacity(order);
    let mut truth_extras = vec![("method".to_string(), "truth".to_string())];
    let mut kernel_files: Vec<(String, DMatrix<f64>, Vec<String>)> = Vec::new();
    let mut marker_files: Vec<(String, MarkerMatrix)> = Vec::new();
    truth_extras.push(("sigma2".to_string(), format_value(sigma2)));
    for k in 0..order {
        let m = shape.dim(k);
        let key = |suffix: &str| format!("dim{}.{}", k + 1, suffix);
        let kind = cfg.get(&key("type")).unwrap_or("unstructured");
        match kind {
            "unstructured" => {
                for suffix in ["kernel", "markers", "lambda", "center"] {
                    if cfg.get(&key(suffix)).is_some() {
                        return Err(CliError::config(format!(
                            "dimension {}: '{}' needs '{}' = known",
                            k + 1,
                            key(suffix),
                            key("type")
                        )));
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, DOMAIN_TRUTH, k as u64));
                specs.push(DimensionSpec::Unstructured {
                    sigma: random_spd(m, &mut rng),
                });
                levels.push(default_labels(m));
                truth_extras.push((key("type"), "unstructured".to_string()));
            }
            "known" => {
                let lambda = cfg.get_f64(&key("lambda"))?.ok_or_else(|| {
                    CliError::config(format!("dimension {}: missing '{}'", k + 1, key("lambda")))
                })?;
                if !(lambda >= 0.0) || !lambda.is_finite() {
                    return Err(CliError::config(format!(
                        "key '{}': must be finite and non-negative",
                        key("lambda")
                    )));
                }
                let (kernel, labels) = match (cfg.get_path(&key("kernel")), cfg.get_usize(&key("markers"))?) {
                    (Some(_), Some(_)) => {
                        return Err(CliError::config(format!(
                            "dimension {}: give either '{}' or '{}', not both",
                            k + 1,
                            key("kernel"),
                            key("markers")
                        )))
                    }
                    (Some(path), None) => {
                        let km = load_kernel_matrix(&path, delimiter)?;
                        if km.matrix.nrows() != m {
                            return Err(CliError::config(format!(
                                "dimension {} has {m} levels but '{}' is {}x{}",
                                k + 1,
                                path.display(),
                                km.matrix.nrows(),
                                km.matrix.nrows()
                            )));
                        }
                        (km.matrix, km.labels)
                    }
                    (None, Some(count)) => {
                        if count == 0 {
                            return Err(CliError::config(format!(
                                "key '{}': must be at least 1",
                                key("markers")
                            )));
                        }
                        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                            seed,
                            DOMAIN_TRUTH,
                            k as u64,
                        ));
                        let labels = default_labels(m);
                        let values = DMatrix::from_fn(m, count, |_, _| {
                            if rng.random::<f64>() < 0.5 {
                                -1.0
                            } else {
                                1.0
                            }
                        });
                        let markers = MarkerMatrix::new(labels.clone(), values)?;
                        let center = cfg.get_bool(&key("center"))?.unwrap_or(true);
                        let kernel = marker_kernel(&markers, center)?;
                        marker_files.push((format!("markers_dim{}.csv", k + 1), markers));
                        (kernel, labels)
                    }
                    (None, None) => {
                        return Err(CliError::config(format!(
                            "dimension {}: known dimensions need '{}' or '{}'",
                            k + 1,
                            key("kernel"),
                            key("markers")
                        )))
                    }
                };
                kernel_files.push((format!("kernel_dim{}.csv", k + 1), kernel.clone(), labels.clone()));
                truth_extras.push((key("type"), "known".to_string()));
                truth_extras.push((key("lambda"), format_value(lambda)));
                specs.push(DimensionSpec::Known { kernel, lambda });
                levels.push(labels);
            }
            other => {
                return Err(CliError::config(format!(
                    "key '{}': '{other}' is not 'unstructured' or 'known'",
                    key("type")
                )))
            }
        }
    }

    let any_known = specs.iter().any(DimensionSpec::is_known);
    let included: Vec<bool> = {
        let listed = cfg.get_usize_list("mean_dims")?.unwrap_or_default();
        let mut flags = vec![false; order];
        for d in listed {
            if d < 1 || d > order {
                return Err(CliError::config(format!(
                    "key 'mean_dims': dimension {d} is outside 1..={order}"
                )));
            }
            flags[d - 1] = true;
        }
        flags
    };
    let mut betas = Vec::with_capacity(order);
    for k in 0..order {
        if included[k] {
            let mut rng =
                ChaCha8Rng::seed_from_u64(stream_seed(seed, DOMAIN_TRUTH, 1000 + k as u64));
            betas.push(DVector::from_fn(shape.dim(k), |_, _| {
                rng.random::<f64>() * 2.0 - 1.0
            }));
        } else {
            betas.push(DVector::zeros(shape.dim(k)));
        }
    }
    let mean = AdditiveMean::new(betas, included)?;

    let truth = AvspmmModel {
        mean,
        sigma: if any_known { sigma2.sqrt() } else { 1.0 },
        specs,
    };
    let mut implied = truth.implied_normal(&shape)?;
    if !any_known && sigma2 != 1.0 {
        // Without a kernel dimension the scale has no carrier; fold it into
        // the first factor.
        let (mean, mut cov) = implied.into_parts();
        cov.factors_mut()[0] = cov.factor(0).scaled(sigma2)?;
        implied = multiway::normal::ArrayNormalModel::new(mean, cov)?;
    }

    // Data.
    let draws = draw_sample(&implied, stream_seed(seed, DOMAIN_DATA, 0), samples)?;
    let sample_ids: Vec<String> = (1..=samples).map(|i| i.to_string()).collect();
    let mut schema = TableSchema::new(names.clone());
    schema.delimiter = delimiter;
    schema.missing_token = missing_token;

    let truth_dir = out.join("truth");
    fs::create_dir_all(&truth_dir)
        .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", truth_dir.display())))?;
    save_model(&truth_dir, &implied, &names, &levels, &truth_extras)?;
    for (name, kernel, labels) in &kernel_files {
        write_labeled_matrix(&truth_dir.join(name), labels, kernel, delimiter)?;
    }
    for (name, markers) in &marker_files {
        write_marker_matrix(&truth_dir.join(name), markers)?;
    }

    let data_dir = out.join("data");
    fs::create_dir_all(&data_dir)
        .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", data_dir.display())))?;
    let complete = LongTable {
        sample: PartialSample::new(
            draws
                .iter()
                .map(|x| PartialArray::complete(x.clone()))
                .collect::<multiway::Result<Vec<_>>>()?,
        )?,
        levels: levels.clone(),
        sample_ids: sample_ids.clone(),
    };
    write_long_table(&complete, &schema, &data_dir.join("complete.csv"), false)?;

    for (pi, (&p, &pct)) in missing.iter().zip(&pcts).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, DOMAIN_MASK, pi as u64));
        let masked: Vec<PartialArray> = draws
            .iter()
            .map(|x| {
                let flags: Vec<bool> = (0..shape.len())
                    .map(|_| rng.random::<f64>() >= p)
                    .collect();
                PartialArray::new(x.clone(), ObservationMask::from_flags(flags))
            })
            .collect::<multiway::Result<Vec<_>>>()?;
        let table = LongTable {
            sample: PartialSample::new(masked)?,
            levels: levels.clone(),
            sample_ids: sample_ids.clone(),
        };
        write_long_table(
            &table,
            &schema,
            &data_dir.join(format!("missing_{pct}.csv")),
            true,
        )?;
    }

    cfg.write_resolved(&out.join("resolved.cfg"))?;
    println!(
        "simulated {} replicate(s) of shape {} with {} masked dataset(s) in {}",
        samples,
        dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
        missing.len(),
        out.display()
    );
    Ok(())
}
