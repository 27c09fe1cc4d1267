//! Maximum-likelihood fitting of array normal models from partially
//! observed replicate arrays.
//!
//! The estimator alternates two steps until the observed-data log likelihood
//! stabilizes:
//!
//! * an imputation step that replaces every missing cell with its
//!   conditional mean given the observed cells under the current model, and
//! * per-parameter updates that re-estimate the mean array and each
//!   covariance factor in turn from the completed arrays, each update using
//!   the freshest values of the other factors.
//!
//! With [`MomentPolicy::MeanAndCovariance`] (the default) each covariance
//! update consumes the full conditional second moment of the completed
//! arrays — imputed cross products plus the conditional covariance of the
//! missing cells — so every sweep is a generalized EM step and the observed
//! log likelihood cannot decrease. The covariance term enters only through
//! mode-wise partial traces, which contract to small matrices built from
//! each observation's inverse observed-block covariance, so it is never
//! materialized over cells. [`MomentPolicy::MeanOnly`] drops the term and
//! treats imputations as data; it is cheaper per sweep, but the likelihood
//! trace may dip.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::normal::{log_density, ArrayNormalModel, CovarianceFactor, KroneckerCovariance};
use crate::parallel;
use crate::tensor::{matricize, mode_multiply, MultiwayArray, ObservationMask, Shape};

/// One replicate array together with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialArray {
    values: MultiwayArray,
    mask: ObservationMask,
}

impl PartialArray {
    /// Pairs values with a mask of the same length. Observed cells must hold
    /// finite values; missing cells may hold anything (their content is
    /// ignored).
    pub fn new(values: MultiwayArray, mask: ObservationMask) -> Result<Self> {
        if mask.len() != values.shape().len() {
            return Err(CoreError::shape(format!(
                "mask covers {} cells but the array has {}",
                mask.len(),
                values.shape().len()
            )));
        }
        for t in mask.observed_offsets() {
            if !values.values()[t].is_finite() {
                return Err(CoreError::domain(format!(
                    "observed cell at offset {t} is not finite"
                )));
            }
        }
        Ok(PartialArray { values, mask })
    }

    /// Fully observed array.
    pub fn complete(values: MultiwayArray) -> Result<Self> {
        let mask = ObservationMask::full(values.shape().len());
        PartialArray::new(values, mask)
    }

    /// Builds from per-cell options in vectorization order; `None` marks a
    /// missing cell.
    pub fn from_options(shape: Shape, cells: &[Option<f64>]) -> Result<Self> {
        if cells.len() != shape.len() {
            return Err(CoreError::shape(format!(
                "{} cells supplied for a shape holding {}",
                cells.len(),
                shape.len()
            )));
        }
        let values: Vec<f64> = cells.iter().map(|c| c.unwrap_or(0.0)).collect();
        let mask = ObservationMask::from_flags(cells.iter().map(|c| c.is_some()).collect());
        PartialArray::new(MultiwayArray::from_vec(shape, values)?, mask)
    }

    pub fn shape(&self) -> &Shape {
        self.values.shape()
    }

    pub fn values(&self) -> &MultiwayArray {
        &self.values
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    pub fn observed_count(&self) -> usize {
        self.mask.observed_count()
    }
}

/// A sample of replicate arrays sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSample {
    observations: Vec<PartialArray>,
}

impl PartialSample {
    pub fn new(observations: Vec<PartialArray>) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| CoreError::domain("a sample needs at least one observation"))?;
        let shape = first.shape().clone();
        for (l, obs) in observations.iter().enumerate() {
            if obs.shape() != &shape {
                return Err(CoreError::shape(format!(
                    "observation {l} has shape {:?}, expected {:?}",
                    obs.shape().dims(),
                    shape.dims()
                )));
            }
        }
        Ok(PartialSample { observations })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn shape(&self) -> &Shape {
        self.observations[0].shape()
    }

    pub fn observations(&self) -> &[PartialArray] {
        &self.observations
    }

    pub fn total_observed(&self) -> usize {
        self.observations.iter().map(|o| o.observed_count()).sum()
    }

    /// Canonical offsets of cells observed in no replicate.
    pub fn never_observed_cells(&self) -> Vec<usize> {
        let n = self.shape().len();
        let mut seen = vec![false; n];
        for obs in &self.observations {
            for t in obs.mask.observed_offsets() {
                seen[t] = true;
            }
        }
        seen.iter()
            .enumerate()
            .filter_map(|(t, &s)| (!s).then_some(t))
            .collect()
    }

    /// Cellwise mean over replicates where the cell is observed; cells never
    /// observed get 0.
    pub fn observed_cell_mean(&self) -> MultiwayArray {
        let n = self.shape().len();
        let mut sum = vec![0.0; n];
        let mut count = vec![0usize; n];
        for obs in &self.observations {
            for t in obs.mask.observed_offsets() {
                sum[t] += obs.values.values()[t];
                count[t] += 1;
            }
        }
        for t in 0..n {
            if count[t] > 0 {
                sum[t] /= count[t] as f64;
            }
        }
        MultiwayArray::from_vec(self.shape().clone(), sum).expect("shape matches by construction")
    }
}

/// Initial parameter choice for the alternating fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Mean starts at the cellwise observed average, factors at identity.
    #[default]
    ObservedMean,
    /// Mean starts at zero, factors at identity.
    Zero,
}

/// Which conditional moments of the missing cells feed the covariance
/// updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MomentPolicy {
    /// Imputed cross products plus the conditional covariance of the missing
    /// cells: each sweep is a generalized EM step, so the observed log
    /// likelihood is non-decreasing. The covariance term is never
    /// materialized cellwise; each factor update contracts it against the
    /// current whitening, which costs one dense inverse of the observed
    /// block per observation and sweep.
    #[default]
    MeanAndCovariance,
    /// Imputed cross products only. Cheaper, but the likelihood trace may
    /// decrease between sweeps.
    MeanOnly,
}

/// Per-observation conditioning data retained for corrected factor updates:
/// the inverse covariance of the observed cells and their zero-based
/// multi-indices, one row of `coords` per observed cell.
pub(crate) struct ObsConditioning {
    soo_inv: DMatrix<f64>,
    coords: Vec<Vec<usize>>,
}

/// Options for [`flip_flop_incomplete`] and the mixed-model fit built on it.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Upper bound on full update sweeps.
    pub max_iterations: usize,
    /// Stop once the relative change of the observed log likelihood over one
    /// sweep drops to this value or below.
    pub rel_tol: f64,
    pub init: InitPolicy,
    /// When false, the mean array is held at its initial value and only the
    /// covariance factors are updated.
    pub estimate_mean: bool,
    pub moments: MomentPolicy,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 200,
            rel_tol: 1e-6,
            init: InitPolicy::default(),
            estimate_mean: true,
            moments: MomentPolicy::default(),
        }
    }
}

/// Result of an alternating fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: ArrayNormalModel,
    /// Observed-data log likelihood after each completed sweep; the value at
    /// the initial parameters is not included.
    pub loglik_trace: Vec<f64>,
    /// Number of sweeps performed.
    pub iterations: usize,
    /// Whether the relative-change criterion was met within the budget.
    pub converged: bool,
    /// Completed arrays at the final parameters, one per observation, with
    /// observed cells copied through unchanged.
    pub imputed: Vec<MultiwayArray>,
    pub warnings: Vec<String>,
}

/// Imputation and observed-likelihood contribution of one observation:
/// the completed array, the log density of the observed cells, and (when
/// requested and cells are missing) the conditioning data needed to account
/// for the conditional covariance of the missing cells in factor updates.
fn observation_stats(
    obs: &PartialArray,
    model: &ArrayNormalModel,
    index: usize,
    want_cov: bool,
) -> Result<(MultiwayArray, f64, Option<ObsConditioning>)> {
    let shape = obs.shape();
    if shape != model.shape() {
        return Err(CoreError::shape(format!(
            "observation {index} has shape {:?} but the model has {:?}",
            shape.dims(),
            model.shape().dims()
        )));
    }
    let n = shape.len();
    let n_obs = obs.mask().observed_count();
    if n_obs == 0 {
        // Nothing observed: the conditional distribution is the model
        // itself, so the conditioning block is empty.
        let cond = want_cov.then(|| ObsConditioning {
            soo_inv: DMatrix::zeros(0, 0),
            coords: Vec::new(),
        });
        return Ok((model.mean().clone(), 0.0, cond));
    }
    if n_obs == n {
        // Fully observed: the conditional covariance is zero and contributes
        // nothing to the updates.
        let ll = log_density(obs.values(), model)?;
        return Ok((obs.values().clone(), ll, None));
    }

    let offsets: Vec<usize> = obs.mask().observed_offsets().collect();
    let coords: Vec<Vec<usize>> = offsets.iter().map(|&t| shape.multi_index(t)).collect();
    let cov = model.covariance();

    // Covariance restricted to observed coordinates.
    let mut sigma_oo = DMatrix::zeros(n_obs, n_obs);
    for a in 0..n_obs {
        for b in 0..=a {
            let v = cov.entry(&coords[a], &coords[b]);
            sigma_oo[(a, b)] = v;
            sigma_oo[(b, a)] = v;
        }
    }
    let chol = Cholesky::new(sigma_oo)
        .ok_or(CoreError::SingularConditioning { observation: index })?;

    let mean = model.mean().values();
    let values = obs.values().values();
    let resid = DVector::from_iterator(n_obs, offsets.iter().map(|&t| values[t] - mean[t]));
    let alpha = chol.solve(&resid);

    let log_det: f64 = chol.l_dirty().map_diagonal(|d| d.ln()).sum() * 2.0;
    let ll = -0.5
        * (resid.dot(&alpha) + n_obs as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);

    // Conditional mean: M + Sigma . scatter(alpha), with the product against
    // the full covariance done as a Tucker multiplication by the factors.
    let mut scatter = MultiwayArray::zeros(shape.clone());
    for (a, &t) in offsets.iter().enumerate() {
        scatter.values_mut()[t] = alpha[a];
    }
    let mut correction = scatter;
    for (k, f) in cov.factors().iter().enumerate() {
        correction = mode_multiply(&correction, f.sigma(), k)?;
    }
    let mut imputed = model.mean().clone();
    for (slot, c) in imputed.values_mut().iter_mut().zip(correction.values()) {
        *slot += c;
    }
    // Observed cells pass through exactly.
    for &t in &offsets {
        imputed.values_mut()[t] = values[t];
    }

    let cond = want_cov.then(|| ObsConditioning {
        soo_inv: chol.inverse(),
        coords,
    });
    Ok((imputed, ll, cond))
}

/// Replaces the missing cells of one observation with their conditional
/// means under the model; observed cells are returned unchanged.
pub fn conditional_mean_impute(
    obs: &PartialArray,
    model: &ArrayNormalModel,
) -> Result<MultiwayArray> {
    observation_stats(obs, model, 0, false).map(|(imputed, _, _)| imputed)
}

/// Log likelihood of the observed cells of every observation under the
/// model, i.e. the sum of the marginal normal log densities of the observed
/// coordinates.
pub fn observed_loglik(sample: &PartialSample, model: &ArrayNormalModel) -> Result<f64> {
    let stats = e_step(sample, model, false)?;
    Ok(stats.1)
}

/// Imputes every observation in the sample under one model.
pub fn impute_all(sample: &PartialSample, model: &ArrayNormalModel) -> Result<Vec<MultiwayArray>> {
    Ok(e_step(sample, model, false)?.0)
}

/// Batch imputation plus total observed log likelihood, optionally with the
/// per-observation conditioning data for corrected factor updates. Work is
/// split per observation; results are reduced in observation order so the
/// sum is identical between parallel and sequential builds.
#[allow(clippy::type_complexity)]
pub(crate) fn e_step(
    sample: &PartialSample,
    model: &ArrayNormalModel,
    want_cov: bool,
) -> Result<(Vec<MultiwayArray>, f64, Vec<ObsConditioning>)> {
    let results = parallel::map_range(sample.len(), |l| {
        observation_stats(&sample.observations()[l], model, l, want_cov)
    });
    let mut imputed = Vec::with_capacity(sample.len());
    let mut conditionings = Vec::new();
    let mut total = 0.0;
    for r in results {
        let (x, ll, c) = r?;
        imputed.push(x);
        total += ll;
        if let Some(c) = c {
            conditionings.push(c);
        }
    }
    Ok((imputed, total, conditionings))
}

/// Mode-`k` partial trace of the summed conditional covariances after
/// whitening every mode except `k` with the freshest factors.
///
/// For one observation the conditional covariance of all cells is
/// `C = L - B inv(S_oo) B'` with `L` the model covariance at imputation
/// time, `B` its observed columns, and `S_oo` its observed block. Writing
/// the whitening map as `G = (x)_{j!=k} A_j^-1` (identity at mode `k`) and
/// contracting indices, the partial trace collapses to
///
/// `T_k(G C G') = t1 * S_k  -  S_k Acc S_k`
///
/// where `t1 = prod_{j!=k} tr(F_j^-1 S_j)`,
/// `Acc[u,v] = sum_{a,b} inv(S_oo)[a,b] * prod_{j!=k} P_j[a_j, b_j]` over
/// observed cells `a, b` with mode-`k` coordinates `u, v`, and
/// `P_j = S_j F_j^-1 S_j`. Here `S_j` are the factors at imputation time and
/// `F_j` the freshest factors. Only the observed blocks ever materialize, so
/// the cost per observation is quadratic in its observed-cell count.
pub(crate) fn conditional_trace_correction(
    conditionings: &[ObsConditioning],
    old: &KroneckerCovariance,
    fresh: &KroneckerCovariance,
    shape: &Shape,
    k: usize,
) -> Result<DMatrix<f64>> {
    let order = shape.order();
    let m_k = shape.dim(k);
    let mut t1 = 1.0;
    let mut p: Vec<DMatrix<f64>> = Vec::with_capacity(order);
    for j in 0..order {
        if j == k {
            p.push(DMatrix::zeros(0, 0));
            continue;
        }
        let old_sigma = old.factor(j).sigma();
        let root = fresh.factor(j).root();
        // inv(F_j) S_j via two triangular solves with the fresh root.
        let half = root
            .solve_lower_triangular(old_sigma)
            .ok_or_else(|| CoreError::NotPositiveDefinite {
                dimension: j,
                detail: "factor root is not invertible".into(),
            })?;
        let fresh_inv_old = root.transpose().solve_upper_triangular(&half).ok_or_else(|| {
            CoreError::NotPositiveDefinite {
                dimension: j,
                detail: "factor root is not invertible".into(),
            }
        })?;
        t1 *= fresh_inv_old.trace();
        p.push(old_sigma * fresh_inv_old);
    }

    let mut acc = DMatrix::zeros(m_k, m_k);
    for cond in conditionings {
        let n_obs = cond.coords.len();
        for a in 0..n_obs {
            let ca = &cond.coords[a];
            for b in 0..n_obs {
                let cb = &cond.coords[b];
                let mut w = cond.soo_inv[(a, b)];
                for j in 0..order {
                    if j != k {
                        w *= p[j][(ca[j], cb[j])];
                    }
                }
                acc[(ca[k], cb[k])] += w;
            }
        }
    }

    let old_k = old.factor(k).sigma();
    Ok(old_k * (conditionings.len() as f64 * t1) - old_k * acc * old_k)
}

/// Factor update consuming full conditional second moments: the fiber cross
/// products of the whitened imputations plus the mode-`k` partial trace of
/// the whitened conditional covariances.
pub(crate) fn sigma_update_corrected(
    whitened: &[MultiwayArray],
    conditionings: &[ObsConditioning],
    old: &KroneckerCovariance,
    fresh: &KroneckerCovariance,
    shape: &Shape,
    k: usize,
) -> Result<DMatrix<f64>> {
    let m_k = shape.dim(k);
    let columns = shape.codim(k) * whitened.len();
    if columns < m_k {
        return Err(CoreError::RankDeficient {
            mode: k,
            rows: m_k,
            columns,
        });
    }
    let mut s = DMatrix::zeros(m_k, m_k);
    for z in whitened {
        let zk = matricize(z, k)?;
        s += &zk * zk.transpose();
    }
    s += conditional_trace_correction(conditionings, old, fresh, shape, k)?;
    s /= columns as f64;
    let st = s.transpose();
    Ok((s + st) * 0.5)
}

/// Cellwise average of completed arrays.
pub fn update_mean(imputed: &[MultiwayArray]) -> Result<MultiwayArray> {
    let first = imputed
        .first()
        .ok_or_else(|| CoreError::domain("mean update needs at least one array"))?;
    let shape = first.shape().clone();
    let mut acc = vec![0.0; shape.len()];
    for x in imputed {
        if x.shape() != &shape {
            return Err(CoreError::shape("arrays differ in shape"));
        }
        for (a, v) in acc.iter_mut().zip(x.values()) {
            *a += v;
        }
    }
    let n = imputed.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    MultiwayArray::from_vec(shape, acc)
}

/// Centers each array by the model mean and applies the inverse factor roots
/// on every mode except `k`: the residuals that the dimension-`k` factor
/// update treats as i.i.d. columns.
pub fn whiten_except(
    arrays: &[MultiwayArray],
    model: &ArrayNormalModel,
    k: usize,
) -> Result<Vec<MultiwayArray>> {
    arrays
        .iter()
        .map(|x| {
            let centered = x.sub(model.mean())?;
            model.covariance().whiten_except(&centered, Some(k))
        })
        .collect()
}

/// Sample covariance of the mode-`k` fibers of whitened arrays: the average
/// of `Z_(k) Z_(k)'` over arrays, divided by the number of fiber columns.
pub fn update_sigma_k(whitened: &[MultiwayArray], k: usize) -> Result<DMatrix<f64>> {
    let first = whitened
        .first()
        .ok_or_else(|| CoreError::domain("covariance update needs at least one array"))?;
    let shape = first.shape().clone();
    if k >= shape.order() {
        return Err(CoreError::InvalidMode {
            mode: k,
            order: shape.order(),
        });
    }
    let m_k = shape.dim(k);
    let columns = shape.codim(k) * whitened.len();
    if columns < m_k {
        return Err(CoreError::RankDeficient {
            mode: k,
            rows: m_k,
            columns,
        });
    }
    let mut s = DMatrix::zeros(m_k, m_k);
    for z in whitened {
        if z.shape() != &shape {
            return Err(CoreError::shape("arrays differ in shape"));
        }
        let zk = matricize(z, k)?;
        s += &zk * zk.transpose();
    }
    s /= columns as f64;
    // The product is symmetric up to rounding; make it exact.
    let st = s.transpose();
    s = (s + st) * 0.5;
    Ok(s)
}

/// Rescales factors 1..i to have a leading diagonal entry of one, moving the
/// scale into factor 0. Leaves the full covariance unchanged.
fn normalize_scale(cov: &mut KroneckerCovariance) -> Result<()> {
    let order = cov.order();
    let mut carry = 1.0;
    for k in 1..order {
        let c = cov.factor(k).sigma()[(0, 0)];
        if !(c > 0.0) || !c.is_finite() {
            return Err(CoreError::NotPositiveDefinite {
                dimension: k,
                detail: format!("leading diagonal entry {c} during normalization"),
            });
        }
        cov.factors_mut()[k] = cov.factor(k).scaled(1.0 / c)?;
        carry *= c;
    }
    if (carry - 1.0).abs() > 0.0 {
        cov.factors_mut()[0] = cov.factor(0).scaled(carry)?;
    }
    Ok(())
}

/// Fits an array normal model to partially observed replicates by
/// alternating conditional-mean imputation with mean and per-dimension
/// covariance updates.
///
/// Each sweep imputes with the freshest parameters, then updates the mean
/// (unless disabled) and every covariance factor in dimension order, and
/// finally re-imputes and records the observed log likelihood. Factors for
/// dimensions 1.. are normalized to a leading diagonal entry of one after
/// each sweep, so the overall scale lives in the dimension-0 factor.
pub fn flip_flop_incomplete(sample: &PartialSample, config: &FitConfig) -> Result<FitReport> {
    let shape = sample.shape().clone();
    let mean0 = match config.init {
        InitPolicy::ObservedMean => sample.observed_cell_mean(),
        InitPolicy::Zero => MultiwayArray::zeros(shape.clone()),
    };
    let initial = ArrayNormalModel::new(mean0, KroneckerCovariance::identity(&shape))?;
    flip_flop_incomplete_from(sample, config, initial)
}

/// Same alternating fit as [`flip_flop_incomplete`], started from an
/// explicit model instead of the `init` policy in `config` (which is
/// ignored). Resuming from previously fitted parameters re-converges in a
/// sweep or two, so this doubles as a warm-start path.
pub fn flip_flop_incomplete_from(
    sample: &PartialSample,
    config: &FitConfig,
    initial: ArrayNormalModel,
) -> Result<FitReport> {
    let shape = sample.shape().clone();
    if initial.shape() != &shape {
        return Err(CoreError::shape(format!(
            "initial model has shape {:?} but the sample has {:?}",
            initial.shape().dims(),
            shape.dims()
        )));
    }
    let mut warnings = Vec::new();
    let never = sample.never_observed_cells();
    if !never.is_empty() {
        warnings.push(format!(
            "{} cell(s) observed in no replicate; their mean stays at the initial value",
            never.len()
        ));
    }
    if config.max_iterations == 0 {
        return Err(CoreError::domain("max_iterations must be at least 1"));
    }
    if !(config.rel_tol >= 0.0) {
        return Err(CoreError::domain("rel_tol must be non-negative"));
    }

    let any_missing = sample
        .observations()
        .iter()
        .any(|o| o.mask().missing_count() > 0);
    let want_cov = matches!(config.moments, MomentPolicy::MeanAndCovariance) && any_missing;

    let mut model = initial;

    let (mut imputed, mut prev_ll, mut conditionings) = e_step(sample, &model, want_cov)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iterations {
        iterations += 1;
        let mean = if config.estimate_mean {
            update_mean(&imputed)?
        } else {
            model.mean().clone()
        };
        let mut cov = model.covariance().clone();
        for k in 0..shape.order() {
            let current = ArrayNormalModel::new(mean.clone(), cov.clone())?;
            let whitened = whiten_except(&imputed, &current, k)?;
            let s = if conditionings.is_empty() {
                update_sigma_k(&whitened, k)?
            } else {
                sigma_update_corrected(
                    &whitened,
                    &conditionings,
                    model.covariance(),
                    current.covariance(),
                    &shape,
                    k,
                )?
            };
            cov.factors_mut()[k] = CovarianceFactor::new(s, k)?;
        }
        normalize_scale(&mut cov)?;
        model = ArrayNormalModel::new(mean, cov)?;

        let (new_imputed, ll, new_cond) = e_step(sample, &model, want_cov)?;
        imputed = new_imputed;
        conditionings = new_cond;
        trace.push(ll);
        if (ll - prev_ll).abs() <= config.rel_tol * prev_ll.abs().max(1.0) {
            prev_ll = ll;
            converged = true;
            break;
        }
        prev_ll = ll;
    }
    let _ = prev_ll;

    Ok(FitReport {
        model,
        loglik_trace: trace,
        iterations,
        converged,
        imputed,
        warnings,
    })
}
