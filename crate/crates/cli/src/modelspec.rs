//! The per-dimension model vocabulary shared by the fit and cv commands:
//! which dimensions carry a known similarity kernel, how the mean is
//! modeled, fit controls, and the dispatch between the all-unstructured
//! alternating fit and the kernel-ratio mixed-model fit.

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::model_io::SavedModel;
use multiway::avspmm::{fit_avspmm, AvspmmConfig, DimensionSpec, DEFAULT_LAMBDA_BOUNDS};
use multiway::io::{format_value, load_kernel_matrix, load_level_file, KernelMatrix, TableSchema};
use multiway::missing::{
    flip_flop_incomplete, flip_flop_incomplete_from, FitConfig, InitPolicy, MomentPolicy,
    PartialSample,
};
use multiway::normal::ArrayNormalModel;
use multiway::tensor::MultiwayArray;
use nalgebra::DMatrix;

/// Covariance role of one dimension.
pub enum DimModel {
    /// Factor estimated freely.
    Unstructured,
    /// Factor fixed to `kernel + lambda I` up to scale, with the ratio
    /// estimated by profile likelihood from `lambda_init`.
    Known {
        kernel: KernelMatrix,
        lambda_init: f64,
    },
}

/// Mean structure of the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeanModel {
    /// Zero mean, held fixed.
    None,
    /// A free mean cell per array position (all-unstructured fits only).
    Cellwise,
    /// Additive per-level effects along the listed zero-based dimensions
    /// (kernel fits only).
    Additive(Vec<usize>),
}

/// Everything the fit and cv commands share: data schema, covariance roles,
/// mean structure, and solver controls.
pub struct ModelSpec {
    pub dims: Vec<String>,
    pub dim_models: Vec<DimModel>,
    pub mean: MeanModel,
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub moments: MomentPolicy,
    pub lambda_bounds: (f64, f64),
    pub delimiter: char,
    pub missing_token: String,
    /// Axis orders pinned by kernel labels or level files; `None` leaves the
    /// order to first appearance in the data.
    pub fixed_levels: Vec<Option<Vec<String>>>,
}

/// Config keys consumed by [`parse_model_spec`]; commands append their own.
pub const MODEL_KEYS: [&str; 10] = [
    "dims",
    "mean",
    "mean_dims",
    "max_iterations",
    "rel_tol",
    "moments",
    "lambda_min",
    "lambda_max",
    "delimiter",
    "missing_token",
];
pub const MODEL_DIM_KEYS: [&str; 4] = ["type", "kernel", "lambda_init", "levels"];

/// Table options used by every data-reading command.
pub fn parse_table_options(cfg: &Config) -> Result<(char, String)> {
    let delimiter = match cfg.get("delimiter") {
        None | Some("comma") => ',',
        Some("tab") => '\t',
        Some(other) => {
            return Err(CliError::config(format!(
                "key 'delimiter': '{other}' is not 'comma' or 'tab'"
            )))
        }
    };
    let token = cfg.get("missing_token").unwrap_or("NA").to_string();
    Ok((delimiter, token))
}

pub fn parse_model_spec(cfg: &Config) -> Result<ModelSpec> {
    let dims = cfg
        .get_list("dims")
        .ok_or_else(|| CliError::config("missing required key 'dims'".to_string()))?;
    if dims.is_empty() || dims.iter().any(String::is_empty) {
        return Err(CliError::config(
            "key 'dims' must list one non-empty column name per dimension".to_string(),
        ));
    }
    let order = dims.len();
    let (delimiter, missing_token) = parse_table_options(cfg)?;

    let mut dim_models = Vec::with_capacity(order);
    let mut fixed_levels = vec![None; order];
    for k in 0..order {
        let key = |suffix: &str| format!("dim{}.{}", k + 1, suffix);
        let kind = cfg.get(&key("type")).unwrap_or("unstructured");
        match kind {
            "unstructured" => {
                if cfg.get(&key("kernel")).is_some() || cfg.get(&key("lambda_init")).is_some() {
                    return Err(CliError::config(format!(
                        "dimension {}: kernel options need '{}' = known",
                        k + 1,
                        key("type")
                    )));
                }
                if let Some(path) = cfg.get_path(&key("levels")) {
                    fixed_levels[k] = Some(load_level_file(&path)?);
                }
                dim_models.push(DimModel::Unstructured);
            }
            "known" => {
                if cfg.get(&key("levels")).is_some() {
                    return Err(CliError::config(format!(
                        "dimension {}: the kernel labels already fix the level order; \
                         drop '{}'",
                        k + 1,
                        key("levels")
                    )));
                }
                let path = cfg
                    .get_path(&key("kernel"))
                    .ok_or_else(|| {
                        CliError::config(format!(
                            "dimension {}: missing '{}'",
                            k + 1,
                            key("kernel")
                        ))
                    })?;
                let kernel = load_kernel_matrix(&path, delimiter)?;
                if kernel.repair_delta > 0.0 {
                    eprintln!(
                        "note: kernel '{}' repaired (negative eigenvalue mass {:.3e})",
                        path.display(),
                        kernel.repair_delta
                    );
                }
                let lambda_init = cfg.get_f64(&key("lambda_init"))?.unwrap_or(1.0);
                if !(lambda_init > 0.0) || !lambda_init.is_finite() {
                    return Err(CliError::config(format!(
                        "key '{}': initial ratio must be positive",
                        key("lambda_init")
                    )));
                }
                fixed_levels[k] = Some(kernel.labels.clone());
                dim_models.push(DimModel::Known {
                    kernel,
                    lambda_init,
                });
            }
            other => {
                return Err(CliError::config(format!(
                    "key '{}': '{other}' is not 'unstructured' or 'known'",
                    key("type")
                )))
            }
        }
    }
    let any_known = dim_models.iter().any(|d| matches!(d, DimModel::Known { .. }));

    let mean = match cfg.get("mean") {
        None => {
            if any_known {
                MeanModel::None
            } else {
                MeanModel::Cellwise
            }
        }
        Some("none") => MeanModel::None,
        Some("cellwise") => {
            if any_known {
                return Err(CliError::config(
                    "mean = cellwise needs an all-unstructured model; \
                     use 'additive' or 'none' with kernel dimensions"
                        .to_string(),
                ));
            }
            MeanModel::Cellwise
        }
        Some("additive") => {
            if !any_known {
                return Err(CliError::config(
                    "mean = additive needs at least one known-kernel dimension; \
                     all-unstructured fits use 'cellwise' or 'none'"
                        .to_string(),
                ));
            }
            let listed = cfg
                .get_usize_list("mean_dims")?
                .filter(|l| !l.is_empty())
                .ok_or_else(|| {
                    CliError::config("mean = additive needs 'mean_dims'".to_string())
                })?;
            let mut zero_based = Vec::new();
            for d in listed {
                if d < 1 || d > order {
                    return Err(CliError::config(format!(
                        "key 'mean_dims': dimension {d} is outside 1..={order}"
                    )));
                }
                if zero_based.contains(&(d - 1)) {
                    return Err(CliError::config(format!(
                        "key 'mean_dims': dimension {d} listed twice"
                    )));
                }
                zero_based.push(d - 1);
            }
            MeanModel::Additive(zero_based)
        }
        Some(other) => {
            return Err(CliError::config(format!(
                "key 'mean': '{other}' is not 'none', 'cellwise', or 'additive'"
            )))
        }
    };
    if cfg.get("mean_dims").is_some() && !matches!(mean, MeanModel::Additive(_)) {
        return Err(CliError::config(
            "'mean_dims' only applies with mean = additive".to_string(),
        ));
    }

    let max_iterations = cfg.get_usize("max_iterations")?.unwrap_or(200);
    if max_iterations == 0 {
        return Err(CliError::config(
            "key 'max_iterations': must be at least 1".to_string(),
        ));
    }
    let rel_tol = cfg.get_f64("rel_tol")?.unwrap_or(1e-6);
    if !(rel_tol >= 0.0) {
        return Err(CliError::config(
            "key 'rel_tol': must be non-negative".to_string(),
        ));
    }
    let moments = match cfg.get("moments") {
        None | Some("full") => MomentPolicy::MeanAndCovariance,
        Some("mean_only") => MomentPolicy::MeanOnly,
        Some(other) => {
            return Err(CliError::config(format!(
                "key 'moments': '{other}' is not 'full' or 'mean_only'"
            )))
        }
    };
    let lo = cfg.get_f64("lambda_min")?.unwrap_or(DEFAULT_LAMBDA_BOUNDS.0);
    let hi = cfg.get_f64("lambda_max")?.unwrap_or(DEFAULT_LAMBDA_BOUNDS.1);
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(CliError::config(format!(
            "ratio bounds must satisfy 0 < lambda_min < lambda_max, got [{lo}, {hi}]"
        )));
    }

    Ok(ModelSpec {
        dims,
        dim_models,
        mean,
        max_iterations,
        rel_tol,
        moments,
        lambda_bounds: (lo, hi),
        delimiter,
        missing_token,
        fixed_levels,
    })
}

impl ModelSpec {
    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn any_known(&self) -> bool {
        self.dim_models
            .iter()
            .any(|d| matches!(d, DimModel::Known { .. }))
    }

    pub fn schema(&self) -> TableSchema {
        let mut schema = TableSchema::new(self.dims.clone());
        schema.delimiter = self.delimiter;
        schema.missing_token = self.missing_token.clone();
        schema.fixed_levels = self.fixed_levels.clone();
        schema
    }
}

/// A finished fit in command-level terms: the implied array normal model,
/// the likelihood trace, the completed arrays, and the scalar summary pairs
/// destined for the model file.
pub struct FitOutcome {
    pub model: ArrayNormalModel,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub imputed: Vec<MultiwayArray>,
    pub warnings: Vec<String>,
    pub extras: Vec<(String, String)>,
}

/// Fits the specified model to a sample, warm-starting from previously
/// saved parameters when given. Any known-kernel dimension routes to the
/// ratio-estimating mixed-model fit; otherwise the alternating
/// imputation/covariance fit runs.
pub fn fit_sample(
    sample: &PartialSample,
    spec: &ModelSpec,
    warm: Option<&SavedModel>,
) -> Result<FitOutcome> {
    let shape = sample.shape();
    if shape.order() != spec.order() {
        return Err(CliError::data(format!(
            "data has {} dimensions but the model spec has {}",
            shape.order(),
            spec.order()
        )));
    }
    if let Some(w) = warm {
        if w.model.shape() != shape {
            return Err(CliError::data(format!(
                "warm-start model has shape {:?} but the data has {:?}",
                w.model.shape().dims(),
                shape.dims()
            )));
        }
    }

    if spec.any_known() {
        let mut specs = Vec::with_capacity(spec.order());
        for (k, dm) in spec.dim_models.iter().enumerate() {
            let spec_k = match dm {
                DimModel::Known {
                    kernel,
                    lambda_init,
                } => {
                    if kernel.matrix.nrows() != shape.dim(k) {
                        return Err(CliError::data(format!(
                            "dimension {} has {} levels but its kernel is {}x{}",
                            k + 1,
                            shape.dim(k),
                            kernel.matrix.nrows(),
                            kernel.matrix.nrows()
                        )));
                    }
                    let lambda = warm
                        .and_then(|w| {
                            w.scalars
                                .get_f64(&format!("dim{}.lambda", k + 1))
                                .ok()
                                .flatten()
                        })
                        .unwrap_or(*lambda_init);
                    DimensionSpec::Known {
                        kernel: kernel.matrix.clone(),
                        lambda,
                    }
                }
                DimModel::Unstructured => {
                    let sigma = match warm {
                        Some(w) => w.model.covariance().factor(k).sigma().clone(),
                        None => DMatrix::identity(shape.dim(k), shape.dim(k)),
                    };
                    DimensionSpec::Unstructured { sigma }
                }
            };
            specs.push(spec_k);
        }
        let mean_dims = match &spec.mean {
            MeanModel::Additive(list) => {
                let mut flags = vec![false; spec.order()];
                for &d in list {
                    flags[d] = true;
                }
                flags
            }
            MeanModel::None => Vec::new(),
            MeanModel::Cellwise => unreachable!("rejected when the spec was parsed"),
        };
        let config = AvspmmConfig {
            max_iterations: spec.max_iterations,
            rel_tol: spec.rel_tol,
            mean_dims,
            moments: spec.moments,
            lambda_bounds: spec.lambda_bounds,
        };
        let report = fit_avspmm(sample, &specs, &config)?;
        let mut extras = vec![
            ("method".to_string(), "avspmm".to_string()),
            (
                "sigma2".to_string(),
                format_value(report.model.sigma * report.model.sigma),
            ),
        ];
        for (k, s) in report.model.specs.iter().enumerate() {
            if let DimensionSpec::Known { lambda, .. } = s {
                extras.push((format!("dim{}.lambda", k + 1), format_value(*lambda)));
                extras.push((
                    format!("dim{}.lambda_boundary", k + 1),
                    report.lambda_at_boundary[k].to_string(),
                ));
            }
        }
        push_common_extras(&mut extras, &report.loglik_trace, report.converged, report.iterations);
        Ok(FitOutcome {
            model: report.implied,
            trace: report.loglik_trace,
            iterations: report.iterations,
            converged: report.converged,
            imputed: report.imputed,
            warnings: report.warnings,
            extras,
        })
    } else {
        let config = FitConfig {
            max_iterations: spec.max_iterations,
            rel_tol: spec.rel_tol,
            init: match spec.mean {
                MeanModel::Cellwise => InitPolicy::ObservedMean,
                _ => InitPolicy::Zero,
            },
            estimate_mean: spec.mean == MeanModel::Cellwise,
            moments: spec.moments,
        };
        let report = match warm {
            Some(w) => flip_flop_incomplete_from(sample, &config, w.model.clone())?,
            None => flip_flop_incomplete(sample, &config)?,
        };
        let mut extras = vec![("method".to_string(), "flip_flop".to_string())];
        push_common_extras(&mut extras, &report.loglik_trace, report.converged, report.iterations);
        Ok(FitOutcome {
            model: report.model,
            trace: report.loglik_trace,
            iterations: report.iterations,
            converged: report.converged,
            imputed: report.imputed,
            warnings: report.warnings,
            extras,
        })
    }
}

fn push_common_extras(
    extras: &mut Vec<(String, String)>,
    trace: &[f64],
    converged: bool,
    iterations: usize,
) {
    if let Some(ll) = trace.last() {
        extras.push(("loglik".to_string(), format_value(*ll)));
    }
    extras.push(("iterations".to_string(), iterations.to_string()));
    extras.push(("converged".to_string(), converged.to_string()));
}
