//! Integration tests for the alternating fit on partially observed arrays.

mod common;

use common::*;
use multiway::missing::{
    flip_flop_incomplete, observed_loglik, FitConfig, InitPolicy, PartialArray, PartialSample,
};
use multiway::normal::{sample, ArrayNormalModel, KroneckerCovariance};
use multiway::tensor::{matricize, MultiwayArray};
use nalgebra::{Cholesky, DMatrix};

/// Reference alternating estimator for fully observed matrices, written
/// directly from the two-sided sample-covariance updates without any shared
/// code: row factor from X S_c^-1 X', column factor from X' S_r^-1 X, column
/// factor normalized to a unit leading diagonal.
fn reference_matrix_flip_flop(
    xs: &[DMatrix<f64>],
    sweeps: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = xs.len();
    let r = xs[0].nrows();
    let c = xs[0].ncols();
    let mut mean = DMatrix::zeros(r, c);
    for x in xs {
        mean += x;
    }
    mean /= n as f64;
    let mut sig_r = DMatrix::identity(r, r);
    let mut sig_c = DMatrix::identity(c, c);
    for _ in 0..sweeps {
        let inv_c = Cholesky::new(sig_c.clone()).unwrap().inverse();
        let mut s = DMatrix::zeros(r, r);
        for x in xs {
            let d = x - &mean;
            s += &d * &inv_c * d.transpose();
        }
        sig_r = s / (n * c) as f64;
        let inv_r = Cholesky::new(sig_r.clone()).unwrap().inverse();
        let mut s = DMatrix::zeros(c, c);
        for x in xs {
            let d = x - &mean;
            s += d.transpose() * &inv_r * &d;
        }
        sig_c = s / (n * r) as f64;
        let scale = sig_c[(0, 0)];
        sig_c /= scale;
        sig_r *= scale;
    }
    (mean, sig_r, sig_c)
}

#[test]
fn complete_data_matches_reference_two_way_estimator() {
    for seed in [1u64, 2, 3, 4, 5, 6, 7, 8, 9, 10] {
        let truth = truth_model(&[3, 4], seed);
        let draws = sample(&truth, seed.wrapping_add(500), 40).unwrap();
        let mats: Vec<DMatrix<f64>> = draws.iter().map(|x| matricize(x, 0).unwrap()).collect();
        let sample_complete = PartialSample::new(
            draws
                .iter()
                .map(|x| PartialArray::complete(x.clone()).unwrap())
                .collect(),
        )
        .unwrap();
        let sweeps = 25;
        let config = FitConfig {
            max_iterations: sweeps,
            rel_tol: 0.0,
            ..FitConfig::default()
        };
        let report = flip_flop_incomplete(&sample_complete, &config).unwrap();
        let (mean_ref, sig_r, sig_c) = reference_matrix_flip_flop(&mats, sweeps);

        let got_mean = matricize(report.model.mean(), 0).unwrap();
        assert!(
            (got_mean - &mean_ref).norm() <= 1e-6 * (1.0 + mean_ref.norm()),
            "seed {seed}: mean mismatch"
        );
        let got_r = report.model.covariance().factor(0).sigma();
        let got_c = report.model.covariance().factor(1).sigma();
        assert!(
            (got_r - &sig_r).norm() <= 1e-6 * (1.0 + sig_r.norm()),
            "seed {seed}: row factor mismatch: got {got_r} want {sig_r}"
        );
        assert!(
            (got_c - &sig_c).norm() <= 1e-6 * (1.0 + sig_c.norm()),
            "seed {seed}: column factor mismatch"
        );
    }
}

#[test]
fn trace_is_monotone_at_reference_missing_settings() {
    // 6x4x2 arrays, 20 replicates, 20% missing: the setting used by the
    // larger acceptance sweep, checked here for a few seeds.
    for seed in [11u64, 12, 13, 14, 15] {
        let truth = truth_model(&[6, 4, 2], seed);
        let (masked, _) = masked_sample(&truth, 20, 0.2, seed.wrapping_add(900));
        let report = flip_flop_incomplete(&masked, &FitConfig::default()).unwrap();
        assert!(report.converged, "seed {seed} did not converge");
        for (t, w) in report.loglik_trace.windows(2).enumerate() {
            assert!(
                w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0),
                "seed {seed}: trace decreased at sweep {}: {} -> {}",
                t + 1,
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn imputations_track_truth_at_low_missingness() {
    let truth = truth_model(&[6, 4, 2], 77);
    let (masked, complete) = masked_sample(&truth, 100, 0.1, 1234);
    let report = flip_flop_incomplete(&masked, &FitConfig::default()).unwrap();
    let mut got = Vec::new();
    let mut want = Vec::new();
    for (l, obs) in masked.observations().iter().enumerate() {
        for t in obs.mask().missing_offsets() {
            got.push(report.imputed[l].values()[t]);
            want.push(complete[l].values()[t]);
        }
    }
    assert!(got.len() > 100, "expected a few hundred deleted cells");
    let r = correlation(&got, &want);
    assert!(r > 0.5, "imputation correlation {r} too weak");
}

#[test]
fn refit_is_deterministic() {
    let truth = truth_model(&[4, 3], 21);
    let (masked, _) = masked_sample(&truth, 15, 0.25, 4321);
    let config = FitConfig::default();
    let a = flip_flop_incomplete(&masked, &config).unwrap();
    let b = flip_flop_incomplete(&masked, &config).unwrap();
    assert_eq!(a.loglik_trace, b.loglik_trace);
    assert_eq!(a.model.mean().values(), b.model.mean().values());
    for k in 0..2 {
        assert_eq!(
            a.model.covariance().factor(k).sigma(),
            b.model.covariance().factor(k).sigma()
        );
    }
}

#[test]
fn scale_transfer_leaves_observed_loglik_invariant() {
    let truth = truth_model(&[3, 3, 2], 31);
    let (masked, _) = masked_sample(&truth, 10, 0.3, 999);
    let base = observed_loglik(&masked, &truth).unwrap();
    let c = 2.5;
    let f = truth.covariance().factors();
    let moved = ArrayNormalModel::new(
        truth.mean().clone(),
        KroneckerCovariance::new(vec![
            f[0].scaled(c).unwrap(),
            f[1].scaled(1.0 / c).unwrap(),
            f[2].clone(),
        ])
        .unwrap(),
    )
    .unwrap();
    let shifted = observed_loglik(&masked, &moved).unwrap();
    assert!(
        (base - shifted).abs() <= 1e-9 * base.abs().max(1.0),
        "loglik moved under scale transfer: {base} vs {shifted}"
    );
}

#[test]
fn single_replicate_complete_fit_runs() {
    // One fully observed replicate with enough cells per dimension is the
    // degenerate-but-legal case: 1 * (4*3) columns >= 2 rows etc.
    let truth = truth_model(&[2, 4, 3], 41);
    let draws = sample(&truth, 51, 1).unwrap();
    let s = PartialSample::new(vec![PartialArray::complete(draws[0].clone()).unwrap()]).unwrap();
    let config = FitConfig {
        estimate_mean: false,
        init: InitPolicy::Zero,
        max_iterations: 50,
        ..FitConfig::default()
    };
    let report = flip_flop_incomplete(&s, &config).unwrap();
    assert!(report.iterations >= 1);
    for w in report.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
    }
}

#[test]
fn first_sweep_matches_dense_em_oracle() {
    // Reproduce one full sweep with dense linear algebra: conditional mean
    // and covariance from the materialized cell covariance, factor updates
    // from explicit whitened second moments, then the scale normalization.
    use multiway::tensor::kronecker_product;

    let s = shape(&[2, 3]);
    let n = s.len();
    let cells_a = [Some(0.8), None, Some(-0.4), Some(1.2), None, Some(0.3)];
    let cells_b = [None, Some(-0.9), Some(0.6), None, Some(1.4), Some(-0.2)];
    let obs_a = PartialArray::from_options(s.clone(), &cells_a).unwrap();
    let obs_b = PartialArray::from_options(s.clone(), &cells_b).unwrap();
    let sample_two = PartialSample::new(vec![obs_a, obs_b]).unwrap();
    let config = FitConfig {
        max_iterations: 1,
        rel_tol: 0.0,
        estimate_mean: false,
        init: InitPolicy::Zero,
        ..FitConfig::default()
    };
    let report = flip_flop_incomplete(&sample_two, &config).unwrap();

    // Dense conditional moments under the initial model (zero mean, identity
    // covariance): imputations are zero at missing cells, each conditional
    // covariance is the identity restricted to that replicate's missing
    // coordinates.
    let all_cells = [cells_a, cells_b];
    let mut xhats = Vec::new();
    let mut cond = DMatrix::zeros(n, n);
    for cells in &all_cells {
        let mut xhat = nalgebra::DVector::zeros(n);
        for (t, c) in cells.iter().enumerate() {
            match c {
                Some(v) => xhat[t] = *v,
                None => cond[(t, t)] += 1.0,
            }
        }
        xhats.push(xhat);
    }

    // Factor-0 update: fibers of the completed arrays plus partial trace of
    // the summed conditional covariance over mode 0; 2 replicates x 3 fibers.
    let xarrs: Vec<MultiwayArray> = xhats
        .iter()
        .map(|x| MultiwayArray::from_vec(s.clone(), x.iter().copied().collect()).unwrap())
        .collect();
    let mut s0 = DMatrix::zeros(2, 2);
    for x in &xarrs {
        let x0 = matricize(x, 0).unwrap();
        s0 += &x0 * x0.transpose();
    }
    for q in 0..3 {
        for r in 0..2 {
            for c in 0..2 {
                s0[(r, c)] += cond[(q * 2 + r, q * 2 + c)];
            }
        }
    }
    s0 /= 6.0;

    // Factor-1 update with the fresh factor 0: whiten mode 0 by the root of
    // s0 on both the completed arrays and the conditional covariance.
    let a0 = Cholesky::new(s0.clone()).unwrap().unpack();
    let a0inv = a0.clone().try_inverse().unwrap();
    let g = kronecker_product(&DMatrix::identity(3, 3), &a0inv);
    let f = &g * &cond * g.transpose();
    let mut s1 = DMatrix::zeros(3, 3);
    for x in &xarrs {
        let z0 = &a0inv * matricize(x, 0).unwrap();
        let zarr = multiway::tensor::dematricize(&z0, 0, &s).unwrap();
        let z1 = matricize(&zarr, 1).unwrap();
        s1 += &z1 * z1.transpose();
    }
    for q in 0..2 {
        for r in 0..3 {
            for c in 0..3 {
                s1[(r, c)] += f[(r * 2 + q, c * 2 + q)];
            }
        }
    }
    s1 /= 4.0;

    // Scale normalization: factor 1 gets a unit leading diagonal.
    let scale = s1[(0, 0)];
    let s1n = &s1 / scale;
    let s0n = &s0 * scale;

    let got0 = report.model.covariance().factor(0).sigma();
    let got1 = report.model.covariance().factor(1).sigma();
    assert!(
        (got0 - &s0n).norm() <= 1e-10 * (1.0 + s0n.norm()),
        "factor 0: got {got0}, want {s0n}"
    );
    assert!(
        (got1 - &s1n).norm() <= 1e-10 * (1.0 + s1n.norm()),
        "factor 1: got {got1}, want {s1n}"
    );

}

#[test]
fn corrected_updates_run_on_large_sparse_arrays() {
    // The conditional-covariance term only ever costs work quadratic in the
    // observed-cell count, so a large array with few observed cells fits
    // without materializing anything cellwise.
    let s = shape(&[70, 60]);
    let n = s.len();
    let obs: Vec<PartialArray> = (0..3)
        .map(|l| {
            let cells: Vec<Option<f64>> = (0..n)
                .map(|t| {
                    (t % 31 == l).then(|| ((l * n + t) as f64 * 0.61).sin() * 1.5)
                })
                .collect();
            PartialArray::from_options(s.clone(), &cells).unwrap()
        })
        .collect();
    let sample = PartialSample::new(obs).unwrap();
    let config = FitConfig {
        max_iterations: 3,
        rel_tol: 0.0,
        estimate_mean: false,
        init: InitPolicy::Zero,
        ..FitConfig::default()
    };
    let report = flip_flop_incomplete(&sample, &config).unwrap();
    assert_eq!(report.iterations, 3);
    for w in report.loglik_trace.windows(2) {
        assert!(
            w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0),
            "log likelihood decreased: {} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn mean_only_policy_still_fits() {
    use multiway::missing::MomentPolicy;
    let truth = truth_model(&[6, 4, 2], 19);
    let (masked, complete) = masked_sample(&truth, 40, 0.2, 5150);
    let config = FitConfig {
        moments: MomentPolicy::MeanOnly,
        ..FitConfig::default()
    };
    let report = flip_flop_incomplete(&masked, &config).unwrap();
    assert!(report.iterations >= 1);
    let mut got = Vec::new();
    let mut want = Vec::new();
    for (l, obs) in masked.observations().iter().enumerate() {
        for t in obs.mask().missing_offsets() {
            got.push(report.imputed[l].values()[t]);
            want.push(complete[l].values()[t]);
        }
    }
    let r = correlation(&got, &want);
    assert!(r > 0.4, "mean-only imputation correlation {r} too weak");
}

#[test]
fn mean_only_update_keeps_imputed_cells_for_mean() {
    // With everything missing in one replicate and observed in another, the
    // mean update averages observed values with model imputations; check the
    // fit still runs and the imputed arrays carry observed cells through.
    let truth = truth_model(&[3, 2], 61);
    let (masked, _) = masked_sample(&truth, 12, 0.35, 777);
    let report = flip_flop_incomplete(&masked, &FitConfig::default()).unwrap();
    for (l, obs) in masked.observations().iter().enumerate() {
        for t in obs.mask().observed_offsets() {
            assert_eq!(
                report.imputed[l].values()[t],
                obs.values().values()[t],
                "observed cell {t} of replicate {l} not carried through"
            );
        }
    }
}
