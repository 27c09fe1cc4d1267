//! Array-variate normal model with separable (Kronecker) covariance.
//!
//! An order-`i` array `X` with mean `M` has covariance factors
//! `Sigma_1, ..., Sigma_i`, one per dimension; the covariance of `rvec(X)` is
//! the Kronecker product `Sigma_i (x) ... (x) Sigma_1`. Densities and
//! samples never materialize that product: they work through mode-wise
//! triangular solves or multiplications with the factor roots.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::tensor::{mode_multiply, MultiwayArray, Shape};

/// Default cap on total vector length for dense materializations.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Lower-triangular Cholesky root of a symmetric positive-definite factor.
/// `dimension` (zero-based) is only used to name the factor in errors.
pub fn factor_root(sigma: &DMatrix<f64>, dimension: usize) -> Result<DMatrix<f64>> {
    if sigma.nrows() != sigma.ncols() {
        return Err(CoreError::NotPositiveDefinite {
            dimension,
            detail: format!("matrix is {}x{}, not square", sigma.nrows(), sigma.ncols()),
        });
    }
    let scale = sigma.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-8 * (1.0 + scale);
    for r in 0..sigma.nrows() {
        for c in 0..r {
            if (sigma[(r, c)] - sigma[(c, r)]).abs() > tol {
                return Err(CoreError::NotPositiveDefinite {
                    dimension,
                    detail: format!("not symmetric at ({r}, {c})"),
                });
            }
        }
    }
    match Cholesky::new(sigma.clone()) {
        Some(chol) => Ok(chol.unpack()),
        None => Err(CoreError::NotPositiveDefinite {
            dimension,
            detail: "Cholesky factorization failed".to_string(),
        }),
    }
}

/// One per-dimension covariance factor together with its lower Cholesky root.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFactor {
    sigma: DMatrix<f64>,
    root: DMatrix<f64>,
}

impl CovarianceFactor {
    /// Validates symmetry and positive definiteness; `dimension` names the
    /// factor in errors.
    pub fn new(sigma: DMatrix<f64>, dimension: usize) -> Result<Self> {
        let root = factor_root(&sigma, dimension)?;
        Ok(CovarianceFactor { sigma, root })
    }

    pub fn identity(m: usize) -> Self {
        CovarianceFactor {
            sigma: DMatrix::identity(m, m),
            root: DMatrix::identity(m, m),
        }
    }

    /// Extent of the dimension this factor covers.
    pub fn order(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower-triangular root `A` with `A A' = Sigma`.
    pub fn root(&self) -> &DMatrix<f64> {
        &self.root
    }

    /// `ln |A|` for the root, i.e. the sum of the log diagonal.
    pub fn log_det_root(&self) -> f64 {
        self.root.diagonal().iter().map(|d| d.ln()).sum()
    }

    /// Scales the factor by `c > 0` exactly: `Sigma -> c Sigma`,
    /// `A -> sqrt(c) A`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(CoreError::domain(format!(
                "covariance scale must be positive and finite, got {c}"
            )));
        }
        Ok(CovarianceFactor {
            sigma: &self.sigma * c,
            root: &self.root * c.sqrt(),
        })
    }
}

/// Separable covariance: one factor per dimension, dimension 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCovariance {
    factors: Vec<CovarianceFactor>,
}

impl KroneckerCovariance {
    pub fn new(factors: Vec<CovarianceFactor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(CoreError::shape("a covariance needs at least one factor"));
        }
        Ok(KroneckerCovariance { factors })
    }

    pub fn identity(shape: &Shape) -> Self {
        KroneckerCovariance {
            factors: shape.dims().iter().map(|&m| CovarianceFactor::identity(m)).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.order()).collect()
    }

    /// Total dimension of the vectorized covariance.
    pub fn total_dim(&self) -> usize {
        self.factors.iter().map(|f| f.order()).product()
    }

    pub fn factor(&self, mode: usize) -> &CovarianceFactor {
        &self.factors[mode]
    }

    pub fn factors(&self) -> &[CovarianceFactor] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [CovarianceFactor] {
        &mut self.factors
    }

    /// Entry of the full Kronecker covariance at a pair of zero-based
    /// multi-indices: the product of per-factor entries.
    pub fn entry(&self, p: &[usize], q: &[usize]) -> f64 {
        self.factors
            .iter()
            .enumerate()
            .map(|(k, f)| f.sigma[(p[k], q[k])])
            .product()
    }

    /// `ln` determinant of the full Kronecker covariance.
    pub fn log_det(&self) -> f64 {
        let n = self.total_dim();
        self.factors
            .iter()
            .map(|f| 2.0 * f.log_det_root() * (n / f.order()) as f64)
            .sum()
    }

    /// Dense covariance of the vectorized array. Fails above `cap` rows.
    pub fn materialize(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.total_dim();
        if n > cap {
            return Err(CoreError::SizeCapExceeded { requested: n, cap });
        }
        let mut out = self.factors.last().unwrap().sigma.clone();
        for f in self.factors[..self.factors.len() - 1].iter().rev() {
            out = out.kronecker(&f.sigma);
        }
        Ok(out)
    }

    /// Applies the inverse factor roots on every mode except `skip`,
    /// i.e. the Tucker product by `A_k^{-1}` for all kept modes.
    pub fn whiten_except(&self, x: &MultiwayArray, skip: Option<usize>) -> Result<MultiwayArray> {
        let mut acc = x.clone();
        for (k, f) in self.factors.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            acc = solve_mode(f.root(), &acc, k)?;
        }
        Ok(acc)
    }

    /// Applies the inverse factor roots on every mode.
    pub fn whiten(&self, x: &MultiwayArray) -> Result<MultiwayArray> {
        self.whiten_except(x, None)
    }

    /// Applies the factor roots (not their inverses) on every mode:
    /// the map taking white noise to correlated noise.
    pub fn color(&self, x: &MultiwayArray) -> Result<MultiwayArray> {
        let mut acc = x.clone();
        for (k, f) in self.factors.iter().enumerate() {
            acc = mode_multiply(&acc, f.root(), k)?;
        }
        Ok(acc)
    }
}

/// Multiplies `x` along `mode` by the inverse of a lower-triangular root via
/// a triangular solve of the matricization.
pub(crate) fn solve_mode(
    root: &DMatrix<f64>,
    x: &MultiwayArray,
    mode: usize,
) -> Result<MultiwayArray> {
    let unfolded = crate::tensor::matricize(x, mode)?;
    let solved = root.solve_lower_triangular(&unfolded).ok_or_else(|| {
        CoreError::domain(format!("zero diagonal in triangular root for mode {mode}"))
    })?;
    crate::tensor::dematricize(&solved, mode, x.shape())
}

/// Array normal model: mean array plus separable covariance whose factor
/// extents match the mean's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayNormalModel {
    mean: MultiwayArray,
    covariance: KroneckerCovariance,
}

impl ArrayNormalModel {
    pub fn new(mean: MultiwayArray, covariance: KroneckerCovariance) -> Result<Self> {
        if covariance.dims() != mean.shape().dims() {
            return Err(CoreError::shape(format!(
                "covariance factor extents {:?} do not match mean shape {:?}",
                covariance.dims(),
                mean.shape().dims()
            )));
        }
        Ok(ArrayNormalModel { mean, covariance })
    }

    /// Standard model: zero mean, identity factors.
    pub fn standard(shape: Shape) -> Self {
        let covariance = KroneckerCovariance::identity(&shape);
        ArrayNormalModel {
            mean: MultiwayArray::zeros(shape),
            covariance,
        }
    }

    pub fn shape(&self) -> &Shape {
        self.mean.shape()
    }

    pub fn mean(&self) -> &MultiwayArray {
        &self.mean
    }

    pub fn covariance(&self) -> &KroneckerCovariance {
        &self.covariance
    }

    pub fn into_parts(self) -> (MultiwayArray, KroneckerCovariance) {
        (self.mean, self.covariance)
    }
}

/// Log density of a fully observed array under the model, computed by
/// whitening the centered array mode by mode.
pub fn log_density(x: &MultiwayArray, model: &ArrayNormalModel) -> Result<f64> {
    if x.shape() != model.shape() {
        return Err(CoreError::shape(format!(
            "data shape {:?} does not match model shape {:?}",
            x.shape().dims(),
            model.shape().dims()
        )));
    }
    let centered = x.sub(model.mean())?;
    let white = model.covariance().whiten(&centered)?;
    let n = x.shape().len() as f64;
    let mut ll = -0.5 * white.square_norm() - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    for f in model.covariance().factors() {
        ll -= (x.shape().len() / f.order()) as f64 * f.log_det_root();
    }
    Ok(ll)
}

/// Mean vector and dense covariance of the vectorized array. Fails when the
/// total dimension exceeds `cap`.
pub fn vec_parameters(model: &ArrayNormalModel, cap: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cov = model.covariance().materialize(cap)?;
    let mean = DVector::from_column_slice(model.mean().values());
    Ok((mean, cov))
}

/// Draws `count` independent arrays from the model using a counter-based
/// generator seeded with `seed`. Per array, standard normal cells are drawn
/// in vectorization order and colored by the factor roots.
pub fn sample(model: &ArrayNormalModel, seed: u64, count: usize) -> Result<Vec<MultiwayArray>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(model, &mut rng, count)
}

/// Like [`sample`] but drawing from a caller-provided generator.
pub fn sample_with<R: Rng>(
    model: &ArrayNormalModel,
    rng: &mut R,
    count: usize,
) -> Result<Vec<MultiwayArray>> {
    let shape = model.shape().clone();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut z = MultiwayArray::zeros(shape.clone());
        for v in z.values_mut() {
            *v = rng.sample(StandardNormal);
        }
        let colored = model.covariance().color(&z)?;
        let mut x = model.mean().clone();
        for (slot, c) in x.values_mut().iter_mut().zip(colored.values()) {
            *slot += c;
        }
        out.push(x);
    }
    Ok(out)
}
