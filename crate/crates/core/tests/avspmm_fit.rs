//! Integration tests for the multiway mixed-model fit: equivalence with the
//! unstructured flip-flop fit, the explicit covariance expansion for known
//! kernels, monotonicity of the outer loop, and parameter recovery.

mod common;

use approx::assert_relative_eq;
use multiway::avspmm::{
    fit_avspmm, AdditiveMean, AvspmmConfig, AvspmmModel, DimensionSpec,
};
use multiway::missing::{
    flip_flop_incomplete, FitConfig, InitPolicy, PartialArray, PartialSample,
};
use multiway::normal::sample;
use multiway::tensor::kronecker_product;
use nalgebra::{DMatrix, DVector};

use common::{masked_sample, random_spd, shape, truth_model};

fn all_unstructured(dims: &[usize]) -> Vec<DimensionSpec> {
    dims.iter()
        .map(|&m| DimensionSpec::Unstructured {
            sigma: DMatrix::identity(m, m),
        })
        .collect()
}

/// With every dimension unstructured and no mean, the mixed-model fit is the
/// same alternating algorithm as the flip-flop fit up to where the scale
/// normalization happens inside a sweep, which cancels exactly.
fn assert_matches_flip_flop(sample: &PartialSample, dims: &[usize]) {
    let flip = flip_flop_incomplete(
        sample,
        &FitConfig {
            max_iterations: 30,
            rel_tol: 1e-9,
            init: InitPolicy::Zero,
            estimate_mean: false,
            ..FitConfig::default()
        },
    )
    .unwrap();
    let mixed = fit_avspmm(
        sample,
        &all_unstructured(dims),
        &AvspmmConfig {
            max_iterations: 30,
            rel_tol: 1e-9,
            ..AvspmmConfig::default()
        },
    )
    .unwrap();

    assert_eq!(flip.iterations, mixed.iterations);
    assert_eq!(flip.loglik_trace.len(), mixed.loglik_trace.len());
    for (a, b) in flip.loglik_trace.iter().zip(&mixed.loglik_trace) {
        assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
    }
    for k in 0..dims.len() {
        let fa = flip.model.covariance().factor(k).sigma();
        let fb = mixed.implied.covariance().factor(k).sigma();
        for (a, b) in fa.iter().zip(fb.iter()) {
            assert!(
                (a - b).abs() <= 1e-8 * (1.0 + a.abs()),
                "factor {k} differs: {a} vs {b}"
            );
        }
    }
}

#[test]
fn all_unstructured_fit_matches_flip_flop_on_complete_data() {
    let truth = truth_model(&[3, 4, 2], 41);
    let draws = sample(&truth, 77, 6).unwrap();
    let obs: Vec<PartialArray> = draws.into_iter().map(|x| PartialArray::complete(x).unwrap()).collect();
    let s = PartialSample::new(obs).unwrap();
    assert_matches_flip_flop(&s, &[3, 4, 2]);
}

#[test]
fn all_unstructured_fit_matches_flip_flop_with_missing_cells() {
    let truth = truth_model(&[3, 4, 2], 42);
    let (s, _) = masked_sample(&truth, 6, 0.25, 99);
    assert_matches_flip_flop(&s, &[3, 4, 2]);
}

#[test]
fn known_dimension_factors_expand_to_the_four_term_identity() {
    // With two known kernels the full covariance is
    // sigma^2 (K2 (x) K1 + l1 K2 (x) I + l2 I (x) K1 + l1 l2 I).
    let k1 = random_spd(3, 5, 0.1);
    let k2 = random_spd(4, 6, 0.1);
    let (l1, l2, sigma) = (0.7, 0.3, 1.3);
    let s = shape(&[3, 4]);
    let model = AvspmmModel {
        mean: AdditiveMean::zeros(&s, vec![false, false]).unwrap(),
        sigma,
        specs: vec![
            DimensionSpec::Known {
                kernel: k1.clone(),
                lambda: l1,
            },
            DimensionSpec::Known {
                kernel: k2.clone(),
                lambda: l2,
            },
        ],
    };
    let implied = model.implied_normal(&s).unwrap();
    let got = implied.covariance().materialize(usize::MAX).unwrap();

    let i1 = DMatrix::identity(3, 3);
    let i2 = DMatrix::identity(4, 4);
    let want = (kronecker_product(&k2, &k1)
        + kronecker_product(&k2, &i1) * l1
        + kronecker_product(&i2, &k1) * l2
        + DMatrix::identity(12, 12) * (l1 * l2))
        * (sigma * sigma);
    for (a, b) in got.iter().zip(want.iter()) {
        assert_relative_eq!(a, b, epsilon = 1e-10, max_relative = 1e-10);
    }
}

/// Truth with a known-kernel first dimension, unstructured others, and an
/// additive mean over the first two dimensions.
fn mixed_truth(
    dims: &[usize],
    kernel: &DMatrix<f64>,
    lambda: f64,
    sigma: f64,
    seed: u64,
) -> AvspmmModel {
    let s = shape(dims);
    let mut specs = vec![DimensionSpec::Known {
        kernel: kernel.clone(),
        lambda,
    }];
    for (k, &m) in dims.iter().enumerate().skip(1) {
        let mut u = random_spd(m, seed.wrapping_add(200 + k as u64), 0.4);
        let c = u[(0, 0)];
        u /= c;
        specs.push(DimensionSpec::Unstructured { sigma: u });
    }
    let mut mean = AdditiveMean::zeros(&s, {
        let mut inc = vec![false; dims.len()];
        inc[0] = true;
        if dims.len() > 1 {
            inc[1] = true;
        }
        inc
    })
    .unwrap();
    mean.set_beta(
        0,
        DVector::from_fn(dims[0], |i, _| 0.6 * ((i as f64) * 1.3).sin() + 0.8),
    )
    .unwrap();
    if dims.len() > 1 {
        mean.set_beta(
            1,
            DVector::from_fn(dims[1], |i, _| 0.9 * ((i as f64) * 0.7).cos()),
        )
        .unwrap();
    }
    AvspmmModel {
        mean,
        sigma,
        specs,
    }
}

fn assert_monotone(trace: &[f64]) {
    for w in trace.windows(2) {
        assert!(
            w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0),
            "log likelihood decreased: {} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn outer_loop_is_monotone_with_known_and_unstructured_dimensions() {
    let dims = [5, 4, 3];
    let kernel = random_spd(5, 31, 0.2);
    let truth = mixed_truth(&dims, &kernel, 0.8, 1.2, 17);
    let implied = truth.implied_normal(&shape(&dims)).unwrap();
    let (s, _) = masked_sample(&implied, 8, 0.25, 303);

    for mean_dims in [vec![true, true, false], vec![false, false, false]] {
        let report = fit_avspmm(
            &s,
            &truth.specs,
            &AvspmmConfig {
                max_iterations: 25,
                rel_tol: 0.0,
                mean_dims,
                ..AvspmmConfig::default()
            },
        )
        .unwrap();
        assert_eq!(report.iterations, 25);
        assert_monotone(&report.loglik_trace);
    }
}

#[test]
fn fit_recovers_ratio_scale_and_unstructured_factor() {
    let dims = [8, 10];
    let kernel = DMatrix::from_diagonal(&DVector::from_vec(vec![
        0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0,
    ]));
    let truth = mixed_truth(&dims, &kernel, 1.0, 1.5, 23);
    let implied = truth.implied_normal(&shape(&dims)).unwrap();
    let draws = sample(&implied, 505, 40).unwrap();
    let obs: Vec<PartialArray> = draws.into_iter().map(|x| PartialArray::complete(x).unwrap()).collect();
    let s = PartialSample::new(obs).unwrap();

    let report = fit_avspmm(
        &s,
        &truth.specs,
        &AvspmmConfig {
            max_iterations: 60,
            rel_tol: 1e-8,
            mean_dims: vec![true, true],
            ..AvspmmConfig::default()
        },
    )
    .unwrap();
    assert!(report.converged);
    assert_monotone(&report.loglik_trace);

    let DimensionSpec::Known { lambda, .. } = report.model.specs[0] else {
        panic!("first dimension should stay known");
    };
    assert!(
        (lambda - 1.0).abs() < 0.35,
        "ratio {lambda} too far from 1"
    );
    assert!(!report.lambda_at_boundary[0]);

    let sigma2 = report.model.sigma * report.model.sigma;
    assert!(
        (sigma2 / (1.5 * 1.5) - 1.0).abs() < 0.35,
        "scale {sigma2} too far from 2.25"
    );

    // The fitted first factor must be exactly sigma^2 (K + lambda I).
    let f0 = report.implied.covariance().factor(0).sigma();
    for r in 0..8 {
        for c in 0..8 {
            let want = sigma2 * (kernel[(r, c)] + if r == c { lambda } else { 0.0 });
            assert_relative_eq!(f0[(r, c)], want, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    // Unstructured factor: normalized truth vs normalized estimate.
    let DimensionSpec::Unstructured { sigma: ref truth_u } = truth.specs[1] else {
        panic!();
    };
    let est_u = report.implied.covariance().factor(1).sigma();
    assert_relative_eq!(est_u[(0, 0)], 1.0, epsilon = 1e-12);
    for (a, b) in est_u.iter().zip(truth_u.iter()) {
        assert!(
            (a - b).abs() < 0.5,
            "unstructured entry {a} far from truth {b}"
        );
    }

    // Mean coefficients in canonical form: compare mean arrays instead.
    let fitted_mean = report.implied.mean();
    let true_mean = implied.mean();
    for (a, b) in fitted_mean.values().iter().zip(true_mean.values()) {
        assert!((a - b).abs() < 0.6, "mean cell {a} far from truth {b}");
    }
}

#[test]
fn fit_with_missing_data_stays_monotone_and_recovers_ratio_roughly() {
    let dims = [6, 8];
    let kernel = DMatrix::from_diagonal(&DVector::from_vec(vec![
        0.25, 0.5, 1.0, 2.0, 8.0, 32.0,
    ]));
    let truth = mixed_truth(&dims, &kernel, 4.0, 1.0, 29);
    let implied = truth.implied_normal(&shape(&dims)).unwrap();
    let (s, _) = masked_sample(&implied, 30, 0.2, 811);

    let report = fit_avspmm(
        &s,
        &truth.specs,
        &AvspmmConfig {
            max_iterations: 40,
            rel_tol: 1e-8,
            mean_dims: vec![true, true],
            ..AvspmmConfig::default()
        },
    )
    .unwrap();
    assert_monotone(&report.loglik_trace);
    let DimensionSpec::Known { lambda, .. } = report.model.specs[0] else {
        panic!("first dimension should stay known");
    };
    assert!(
        lambda > 1.0 && lambda < 16.0,
        "ratio {lambda} implausible for truth 4"
    );
}
