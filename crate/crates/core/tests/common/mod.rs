//! Shared fixtures for integration tests.
//!
//! Each test binary compiles its own copy, so not every helper is used by
//! every target.
#![allow(dead_code)]

use multiway::missing::{PartialArray, PartialSample};
use multiway::normal::{sample, ArrayNormalModel, CovarianceFactor, KroneckerCovariance};
use multiway::tensor::{MultiwayArray, ObservationMask, Shape};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims.to_vec()).unwrap()
}

/// Random symmetric positive-definite matrix with a moderate condition
/// number: B B' / m + boost * I for standard normal B.
pub fn random_spd(m: usize, seed: u64, boost: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    &b * b.transpose() / m as f64 + DMatrix::identity(m, m) * boost
}

pub fn random_mean(dims: &[usize], seed: u64, scale: f64) -> MultiwayArray {
    let s = shape(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..s.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    MultiwayArray::from_vec(s, vals).unwrap()
}

/// Array normal truth with random SPD factors and a random mean.
pub fn truth_model(dims: &[usize], seed: u64) -> ArrayNormalModel {
    let factors: Vec<CovarianceFactor> = dims
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            CovarianceFactor::new(random_spd(m, seed.wrapping_add(101 + k as u64), 0.3), k).unwrap()
        })
        .collect();
    ArrayNormalModel::new(
        random_mean(dims, seed.wrapping_add(7), 1.0),
        KroneckerCovariance::new(factors).unwrap(),
    )
    .unwrap()
}

/// Draws `n` replicates from the model and deletes cells independently with
/// probability `miss_prob`. Returns the masked sample and the complete draws.
pub fn masked_sample(
    model: &ArrayNormalModel,
    n: usize,
    miss_prob: f64,
    seed: u64,
) -> (PartialSample, Vec<MultiwayArray>) {
    let draws = sample(model, seed, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let obs: Vec<PartialArray> = draws
        .iter()
        .map(|x| {
            let flags: Vec<bool> = (0..x.shape().len())
                .map(|_| rng.random::<f64>() >= miss_prob)
                .collect();
            PartialArray::new(x.clone(), ObservationMask::from_flags(flags)).unwrap()
        })
        .collect();
    (PartialSample::new(obs).unwrap(), draws)
}

/// Pearson correlation of two equal-length slices.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa.sqrt() * sbb.sqrt())
}
