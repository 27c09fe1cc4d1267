//! Cross-validation by induced missingness: per replication, delete a
//! proportion of the observed cells, refit, impute the deleted cells, and
//! score them against the values they had. Deletions never touch cells
//! that were missing in the source data, so scoring only ever compares
//! against genuinely observed values.

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::metrics::{
    pearson, write_metrics, write_timings, write_trait_metrics, MetricsRecord, TraitRecord,
    METRICS_FILE, TIMINGS_FILE, TRAIT_FILE,
};
use crate::model_io::load_model;
use crate::modelspec::{fit_sample, parse_model_spec, ModelSpec, MODEL_DIM_KEYS, MODEL_KEYS};
use crate::seed::{stream_seed, DOMAIN_HOLDOUT};
use multiway::io::{load_long_table, LongTable};
use multiway::missing::{PartialArray, PartialSample};
use multiway::normal::{vec_parameters, DEFAULT_DENSE_CAP};
use multiway::tensor::ObservationMask;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const EXTRA_KEYS: [&str; 6] = [
    "data",
    "holdout",
    "replications",
    "truth",
    "trait_dim",
    "dense_cap",
];

struct RepSettings<'a> {
    table: &'a LongTable,
    spec: &'a ModelSpec,
    holdout: f64,
    seed: u64,
    truth_cov: Option<&'a DMatrix<f64>>,
    dense_cap: usize,
    trait_dim: Option<usize>,
}

/// One replication: delete, fit, impute, score.
fn run_rep(r: usize, s: &RepSettings<'_>) -> Result<(MetricsRecord, Vec<TraitRecord>)> {
    let sample = &s.table.sample;
    let shape = sample.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(s.seed, DOMAIN_HOLDOUT, r as u64));

    let mut reduced = Vec::with_capacity(sample.len());
    let mut held: Vec<(usize, usize)> = Vec::new();
    for (q, obs) in sample.observations().iter().enumerate() {
        let offsets: Vec<usize> = obs.mask().observed_offsets().collect();
        let k = ((s.holdout * offsets.len() as f64).round() as usize).min(offsets.len());
        let mut chosen = rand::seq::index::sample(&mut rng, offsets.len(), k).into_vec();
        chosen.sort_unstable();
        let mut flags: Vec<bool> = (0..shape.len()).map(|t| obs.mask().is_observed(t)).collect();
        for &c in &chosen {
            flags[offsets[c]] = false;
            held.push((q, offsets[c]));
        }
        reduced.push(PartialArray::new(
            obs.values().clone(),
            ObservationMask::from_flags(flags),
        )?);
    }
    if held.len() < 2 {
        return Err(CliError::data(format!(
            "replication {r}: holdout selected {} cell(s); too few to score",
            held.len()
        )));
    }
    let reduced = PartialSample::new(reduced)?;

    let start = Instant::now();
    let outcome = fit_sample(&reduced, s.spec, None)?;
    let runtime_s = start.elapsed().as_secs_f64();

    let mut trues = Vec::with_capacity(held.len());
    let mut preds = Vec::with_capacity(held.len());
    for &(q, t) in &held {
        trues.push(sample.observations()[q].values().values()[t]);
        preds.push(outcome.imputed[q].values()[t]);
    }
    let correlation = pearson(&trues, &preds);

    let cov_mse = match s.truth_cov {
        Some(truth) => {
            let fitted = vec_parameters(&outcome.model, s.dense_cap)?.1;
            let diff = &fitted - truth;
            Some(diff.norm_squared() / diff.len() as f64)
        }
        None => None,
    };

    let mut traits = Vec::new();
    if let Some(td) = s.trait_dim {
        let m = shape.dim(td);
        let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); m];
        for (i, &(_, t)) in held.iter().enumerate() {
            let level = shape.multi_index(t)[td];
            groups[level].0.push(trues[i]);
            groups[level].1.push(preds[i]);
        }
        for (level, (t, p)) in groups.iter().enumerate() {
            traits.push(TraitRecord {
                rep: r,
                level: s.table.levels[td][level].clone(),
                correlation: pearson(t, p),
            });
        }
    }

    Ok((
        MetricsRecord {
            rep: r,
            correlation,
            cov_mse,
            iterations: outcome.iterations,
            runtime_s,
        },
        traits,
    ))
}

pub fn run(cfg: &Config) -> Result<()> {
    let fixed: Vec<&str> = MODEL_KEYS.iter().chain(EXTRA_KEYS.iter()).copied().collect();
    cfg.check_keys("cv", &fixed, &MODEL_DIM_KEYS)?;

    let spec = parse_model_spec(cfg)?;
    let data = cfg.require_path("data")?;
    let table = load_long_table(&data, &spec.schema())?;

    let holdout = cfg
        .get_f64("holdout")?
        .ok_or_else(|| CliError::config("missing required key 'holdout'".to_string()))?;
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(CliError::config(format!(
            "key 'holdout': {holdout} leaves nothing to score; need a proportion in (0, 1)"
        )));
    }
    let replications = cfg.get_usize("replications")?.unwrap_or(1);
    if replications == 0 {
        return Err(CliError::config(
            "key 'replications': must be at least 1".to_string(),
        ));
    }
    let seed = cfg.get_u64("seed")?.unwrap_or(0);
    let dense_cap = cfg.get_usize("dense_cap")?.unwrap_or(DEFAULT_DENSE_CAP);
    let trait_dim = match cfg.get_usize("trait_dim")? {
        Some(d) => {
            if d < 1 || d > spec.order() {
                return Err(CliError::config(format!(
                    "key 'trait_dim': dimension {d} is outside 1..={}",
                    spec.order()
                )));
            }
            Some(d - 1)
        }
        None => None,
    };
    let truth_cov = match cfg.get_path("truth") {
        Some(dir) => {
            let truth = load_model(&dir)?;
            if truth.model.shape() != table.sample.shape() {
                return Err(CliError::data(format!(
                    "truth model has shape {:?} but the data has {:?}",
                    truth.model.shape().dims(),
                    table.sample.shape().dims()
                )));
            }
            Some(vec_parameters(&truth.model, dense_cap)?.1)
        }
        None => None,
    };
    let out = cfg.out_dir()?;

    let settings = RepSettings {
        table: &table,
        spec: &spec,
        holdout,
        seed,
        truth_cov: truth_cov.as_ref(),
        dense_cap,
        trait_dim,
    };

    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>> = (0..replications)
        .into_par_iter()
        .map(|r| run_rep(r, &settings))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>> = (0..replications).map(|r| run_rep(r, &settings)).collect();
    let mut results = results?;
    results.sort_by_key(|(m, _)| m.rep);

    let metrics: Vec<MetricsRecord> = results.iter().map(|(m, _)| m.clone()).collect();
    write_metrics(&out.join(METRICS_FILE), &metrics)?;
    write_timings(&out.join(TIMINGS_FILE), &metrics)?;
    if trait_dim.is_some() {
        let traits: Vec<TraitRecord> = results.into_iter().flat_map(|(_, t)| t).collect();
        write_trait_metrics(&out.join(TRAIT_FILE), &traits)?;
    }
    cfg.write_resolved(&out.join("resolved.cfg"))?;
    println!(
        "cross-validated {replications} replication(s) at {holdout} holdout into {}",
        out.display()
    );
    Ok(())
}
