//! Gaussian-process prior: Matérn-5/2 kernel, marginal-likelihood fitting,
//! conditioning on point observations and truncated Karhunen–Loève bases.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sorted_symmetric_eigen, symmetrize};
use crate::mesh::{distance, Mesh};
use crate::scalar::Real;
use crate::seed::{rng_for, stream};

/// Relative jitter added to observation covariance matrices.
pub const DEFAULT_RELATIVE_NUGGET: f64 = 1e-8;

/// Observation matrices worse conditioned than this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    pub sigma: T,
    pub length_scale: T,
    /// Jitter variance added to the observation covariance diagonal.
    pub nugget: T,
}

impl<T: Real> KernelParams<T> {
    /// Parameters with the default nugget `1e-8 σ²`.
    pub fn new(sigma: T, length_scale: T) -> Self {
        Self {
            sigma,
            length_scale,
            nugget: T::lit(DEFAULT_RELATIVE_NUGGET) * sigma * sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > T::zero()) || !(self.length_scale > T::zero()) {
            return Err(Error::invalid("kernel sigma and length scale must be positive"));
        }
        if !(self.nugget >= T::zero()) {
            return Err(Error::invalid("kernel nugget must be non-negative"));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> KernelParams<f64> {
        KernelParams {
            sigma: self.sigma.as_f64(),
            length_scale: self.length_scale.as_f64(),
            nugget: self.nugget.as_f64(),
        }
    }
}

/// Matérn-5/2 covariance at distance `d`.
pub fn matern52_distance<T: Real>(d: T, params: &KernelParams<T>) -> T {
    let r = T::lit(5f64.sqrt()) * d / params.length_scale;
    params.sigma * params.sigma * (T::one() + r + r * r / T::lit(3.0)) * (-r).exp()
}

/// `σ²(1 + √5 d/l + 5d²/(3l²)) exp(−√5 d/l)` with `d = ‖x − x′‖`.
pub fn matern52<T: Real>(x: &[T; 2], x_prime: &[T; 2], params: &KernelParams<T>) -> T {
    matern52_distance(distance(x, x_prime), params)
}

pub fn kernel_matrix<T: Real>(
    rows: &[[T; 2]],
    cols: &[[T; 2]],
    params: &KernelParams<T>,
) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        matern52(&rows[i], &cols[j], params)
    })
}

/// Point observations of a field, at most one per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations<T> {
    pub locations: Vec<[T; 2]>,
    pub values: Vec<T>,
    pub cell_indices: Vec<usize>,
}

impl<T: Real> Observations<T> {
    pub fn empty() -> Self {
        Self {
            locations: Vec::new(),
            values: Vec::new(),
            cell_indices: Vec::new(),
        }
    }

    /// Observes `field` at the centers of `cells`.
    pub fn from_cells(mesh: &Mesh<T>, cells: &[usize], field: &DVector<T>) -> Result<Self> {
        let obs = Self {
            locations: cells.iter().map(|&c| mesh.cell_centers[c]).collect(),
            values: cells.iter().map(|&c| field[c]).collect(),
            cell_indices: cells.to_vec(),
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.values.len();
        if self.locations.len() != n || self.cell_indices.len() != n {
            return Err(Error::invalid("observation arrays have different lengths"));
        }
        let mut cells = self.cell_indices.clone();
        cells.sort_unstable();
        if cells.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("more than one observation in a cell"));
        }
        if self.values.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite("observation values"));
        }
        Ok(())
    }
}

/// Search box for [`fit_hyperparameters`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub length_min: f64,
    pub length_max: f64,
    /// `σ` is kept within these multiples of the sample standard deviation.
    pub sigma_factor_min: f64,
    pub sigma_factor_max: f64,
    /// Log-spaced starting grid over the length scale.
    pub grid_points: usize,
    pub relative_nugget: f64,
}

impl HyperBounds {
    /// Length scale between the smallest cell spacing and the domain diagonal.
    pub fn for_mesh<T: Real>(mesh: &Mesh<T>) -> Self {
        Self::with_lengths(mesh.min_spacing().as_f64(), mesh.extent_diagonal().as_f64())
    }

    /// Length scale between the closest and farthest observation pairs.
    pub fn for_points<T: Real>(points: &[[T; 2]]) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let d = distance(&points[i], &points[j]).as_f64();
                if d > 0.0 {
                    lo = lo.min(d);
                }
                hi = hi.max(d);
            }
        }
        if !lo.is_finite() {
            lo = 1e-3;
            hi = 1.0;
        }
        Self::with_lengths(lo, hi.max(lo * 10.0))
    }

    pub fn with_lengths(length_min: f64, length_max: f64) -> Self {
        Self {
            length_min,
            length_max,
            sigma_factor_min: 1e-3,
            sigma_factor_max: 1e3,
            grid_points: 32,
            relative_nugget: DEFAULT_RELATIVE_NUGGET,
        }
    }
}

/// Outcome of a marginal-likelihood fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperFit<T> {
    pub params: KernelParams<T>,
    pub neg_log_likelihood: T,
    /// Set when the data carry no variance and `σ` was pinned to its bound.
    pub degenerate: bool,
}

struct Profile<T> {
    nll: T,
    d_nll: T,
    sigma: T,
}

/// Negative log marginal likelihood at `θ = ln l`, with `σ` at its profile
/// optimum `σ̂² = yᵀR⁻¹y / n` clamped to `[sigma_lo, sigma_hi]`, and its
/// derivative in `θ`.
fn profile_nll<T: Real>(
    dists: &DMatrix<T>,
    values: &DVector<T>,
    theta: T,
    relative_nugget: T,
    sigma_lo: T,
    sigma_hi: T,
) -> Option<Profile<T>> {
    let n = values.len();
    let nf = T::from_count(n);
    let l = theta.exp();
    let sqrt5 = T::lit(5f64.sqrt());
    let third = T::one() / T::lit(3.0);
    let mut corr = DMatrix::zeros(n, n);
    let mut d_corr = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let r = sqrt5 * dists[(i, j)] / l;
            let e = (-r).exp();
            corr[(i, j)] = (T::one() + r + r * r * third) * e;
            d_corr[(i, j)] = r * r * third * (T::one() + r) * e;
        }
        corr[(j, j)] += relative_nugget;
    }
    let chol = corr.cholesky()?;
    let alpha = chol.solve(values);
    let quad = values.dot(&alpha);
    let log_det = chol.l().diagonal().iter().fold(T::zero(), |s, &d| s + d.ln()) * T::lit(2.0);
    let sigma2_hat = quad / nf;
    let sigma = sigma2_hat.sqrt().max(sigma_lo).min(sigma_hi);
    let sigma2 = sigma * sigma;
    let half = T::lit(0.5);
    let nll = half * quad / sigma2
        + nf * sigma.ln()
        + half * log_det
        + half * nf * T::lit((2.0 * std::f64::consts::PI).ln());
    let inv = chol.inverse();
    let trace = inv.component_mul(&d_corr).sum();
    let quad_d = alpha.dot(&(&d_corr * &alpha));
    let d_nll = -half * quad_d / sigma2 + half * trace;
    Some(Profile { nll, d_nll, sigma })
}

/// Fits `(σ, l)` by minimizing the Gaussian-process negative log marginal
/// likelihood of `obs` under a zero-mean Matérn-5/2 prior with nugget.
///
/// `σ` is profiled out in closed form; `ln l` is searched on a log-spaced
/// grid and the best bracket refined by bisection on the derivative.
pub fn fit_hyperparameters<T: Real>(
    obs: &Observations<T>,
    bounds: &HyperBounds,
) -> Result<HyperFit<T>> {
    obs.validate()?;
    let n = obs.len();
    if n < 3 {
        return Err(Error::invalid("at least 3 observations are needed to fit a kernel"));
    }
    if !(bounds.length_min > 0.0 && bounds.length_max >= bounds.length_min) {
        return Err(Error::invalid("invalid length-scale bounds"));
    }
    let values = DVector::from_column_slice(&obs.values);
    let mean = values.mean();
    let std = (values.map(|v| (v - mean) * (v - mean)).sum() / T::from_count(n - 1)).sqrt();
    let theta_lo = bounds.length_min.ln();
    let theta_hi = bounds.length_max.ln();

    if std.as_f64() <= f64::EPSILON * mean.abs().as_f64().max(f64::MIN_POSITIVE) {
        let rms = values.norm() / T::from_count(n).sqrt();
        let scale = if rms > T::zero() { rms } else { T::one() };
        let sigma = scale * T::lit(bounds.sigma_factor_min);
        log::warn!("degenerate observations (all values equal); sigma pinned to its lower bound");
        let mut params = KernelParams::new(sigma, T::lit((0.5 * (theta_lo + theta_hi)).exp()));
        params.nugget = T::lit(bounds.relative_nugget) * sigma * sigma;
        return Ok(HyperFit {
            params,
            neg_log_likelihood: T::from_f64(f64::NAN).unwrap(),
            degenerate: true,
        });
    }

    let sigma_lo = std * T::lit(bounds.sigma_factor_min);
    let sigma_hi = std * T::lit(bounds.sigma_factor_max);
    let nugget = T::lit(bounds.relative_nugget);
    let dists = DMatrix::from_fn(n, n, |i, j| distance(&obs.locations[i], &obs.locations[j]));
    let eval = |theta: f64| profile_nll(&dists, &values, T::lit(theta), nugget, sigma_lo, sigma_hi);

    let m = bounds.grid_points.max(2);
    let grid: Vec<f64> = (0..m)
        .map(|k| theta_lo + (theta_hi - theta_lo) * k as f64 / (m - 1) as f64)
        .collect();
    let profiles: Vec<Option<Profile<T>>> = grid.iter().map(|&t| eval(t)).collect();
    let best = profiles
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.as_ref().map(|p| (k, p.nll)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::Singular("observation covariance not positive definite".into()))?;

    let mut theta = grid[best];
    let mut profile = profiles[best].as_ref().map(|p| (p.nll, p.sigma)).unwrap();
    // Refine inside the neighbouring grid cells where the derivative changes sign.
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(m - 1)];
    if let (Some(plo), Some(phi)) = (eval(lo), eval(hi)) {
        if plo.d_nll < T::zero() && phi.d_nll > T::zero() {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..60 {
                let mid = 0.5 * (a + b);
                match eval(mid) {
                    Some(p) if p.d_nll < T::zero() => a = mid,
                    Some(_) => b = mid,
                    None => break,
                }
                if b - a < 1e-10 {
                    break;
                }
            }
            let mid = 0.5 * (a + b);
            if let Some(p) = eval(mid) {
                if p.nll <= profile.0 {
                    theta = mid;
                    profile = (p.nll, p.sigma);
                }
            }
        }
    }
    let sigma = profile.1;
    Ok(HyperFit {
        params: KernelParams {
            sigma,
            length_scale: T::lit(theta.exp()),
            nugget: nugget * sigma * sigma,
        },
        neg_log_likelihood: profile.0,
        degenerate: false,
    })
}

/// Gaussian field conditioned on observations, evaluated at target points.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedGP<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
}

fn check_condition<T: Real>(m: &DMatrix<T>) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > T::zero() {
        (max / min).as_f64()
    } else {
        f64::INFINITY
    };
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned {
            condition: cond,
            hint: "increase the nugget or remove near-duplicate observations".into(),
        });
    }
    Ok(())
}

/// Schur-complement update shared by kernel and empirical conditioning.
fn condition_on<T: Real>(
    prior_mean: DVector<T>,
    prior_cov: DMatrix<T>,
    cross: &DMatrix<T>,
    obs_cov: DMatrix<T>,
    residual: &DVector<T>,
) -> Result<ConditionedGP<T>> {
    check_condition(&obs_cov)?;
    let chol = obs_cov
        .cholesky()
        .ok_or_else(|| Error::Singular("observation covariance not positive definite".into()))?;
    let weights = chol.solve(&cross.transpose());
    let mean = prior_mean + weights.transpose() * residual;
    let cov = prior_cov - cross * &weights;
    let (covariance, _) = symmetrize(&cov);
    Ok(ConditionedGP { mean, covariance })
}

/// Zero-mean GP regression: `mean = C*ˣ (Cˣˣ)⁻¹ y`,
/// `cov = C** − C*ˣ (Cˣˣ)⁻¹ Cˣ*`.
pub fn gpr_condition<T: Real>(
    params: &KernelParams<T>,
    obs: &Observations<T>,
    targets: &[[T; 2]],
) -> Result<ConditionedGP<T>> {
    params.validate()?;
    obs.validate()?;
    let prior_cov = kernel_matrix(targets, targets, params);
    if obs.is_empty() {
        return Ok(ConditionedGP {
            mean: DVector::zeros(targets.len()),
            covariance: prior_cov,
        });
    }
    let mut obs_cov = kernel_matrix(&obs.locations, &obs.locations, params);
    for i in 0..obs.len() {
        obs_cov[(i, i)] += params.nugget;
    }
    let cross = kernel_matrix(targets, &obs.locations, params);
    condition_on(
        DVector::zeros(targets.len()),
        prior_cov,
        &cross,
        obs_cov,
        &DVector::from_column_slice(&obs.values),
    )
}

/// Conditions an empirical cell-space Gaussian (mean, covariance) on
/// observations located by their cell indices. The nugget is
/// `relative_nugget` times the largest observed prior variance.
pub fn condition_empirical<T: Real>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    obs: &Observations<T>,
    relative_nugget: T,
) -> Result<ConditionedGP<T>> {
    obs.validate()?;
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "empirical covariance",
            expected: n,
            actual: cov.nrows(),
        });
    }
    if let Some(&bad) = obs.cell_indices.iter().find(|&&c| c >= n) {
        return Err(Error::invalid(format!("observation in missing cell {bad}")));
    }
    if obs.is_empty() {
        return Ok(ConditionedGP {
            mean: mean.clone(),
            covariance: cov.clone(),
        });
    }
    let idx = &obs.cell_indices;
    let m = idx.len();
    let mut obs_cov = DMatrix::from_fn(m, m, |a, b| cov[(idx[a], idx[b])]);
    let max_var = (0..m).map(|a| obs_cov[(a, a)]).fold(T::zero(), |x, y| x.max(y));
    let nugget = relative_nugget * if max_var > T::zero() { max_var } else { T::one() };
    for a in 0..m {
        obs_cov[(a, a)] += nugget;
    }
    let cross = DMatrix::from_fn(n, m, |i, b| cov[(i, idx[b])]);
    let residual = DVector::from_fn(m, |a, _| obs.values[a] - mean[idx[a]]);
    condition_on(mean.clone(), cov.clone(), &cross, obs_cov, &residual)
}

/// Symmetrizes `cov` and clips its negative eigenvalues to zero.
pub fn clip_to_psd<T: Real>(cov: &DMatrix<T>) -> DMatrix<T> {
    let (sym, _) = symmetrize(cov);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= T::zero()) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(T::zero()));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    symmetrize(&out).0
}

/// How many eigenpairs to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Smallest count whose eigenvalues sum to at least this fraction of the trace.
    Energy(f64),
    Terms(usize),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Energy(0.95)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedEig<T: Real> {
    pub eigenvalues: DVector<T>,
    pub eigenvectors: DMatrix<T>,
    pub n_terms: usize,
    /// Retained fraction of the total variance.
    pub energy_fraction: T,
}

/// Leading eigenpairs of a covariance matrix, sorted nonincreasing, with
/// negative eigenvalues clipped to zero.
pub fn truncated_eig<T: Real>(cov: &DMatrix<T>, truncation: Truncation) -> Result<TruncatedEig<T>> {
    let n = cov.nrows();
    if cov.ncols() != n || n == 0 {
        return Err(Error::invalid("covariance must be square and non-empty"));
    }
    if cov.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("covariance"));
    }
    let (sym, asym) = symmetrize(cov);
    if asym.as_f64() > 1e-10 {
        log::warn!("covariance asymmetric (relative {:e}); symmetrized", asym.as_f64());
    }
    let (values, vectors) = sorted_symmetric_eigen(&sym);
    let values = values.map(|v| v.max(T::zero()));
    let total = values.sum();
    let n_terms = match truncation {
        Truncation::Terms(k) => {
            if k == 0 || k > n {
                return Err(Error::invalid(format!("cannot keep {k} of {n} eigenpairs")));
            }
            k
        }
        Truncation::Energy(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid("energy fraction must be in (0, 1]"));
            }
            let target = T::lit(f) * total;
            let mut acc = T::zero();
            let mut k = n;
            for (i, &v) in values.iter().enumerate() {
                acc += v;
                if acc >= target {
                    k = i + 1;
                    break;
                }
            }
            k.max(1)
        }
    };
    let kept = values.rows(0, n_terms).into_owned();
    let energy_fraction = if total > T::zero() {
        kept.sum() / total
    } else {
        T::one()
    };
    Ok(TruncatedEig {
        eigenvalues: kept,
        eigenvectors: vectors.columns(0, n_terms).into_owned(),
        n_terms,
        energy_fraction,
    })
}

/// Where a basis came from; echoed into serialized artifacts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BasisProvenance {
    pub source: String,
    pub kernel: Option<KernelParams<f64>>,
    pub truncation: Option<Truncation>,
    pub seed: Option<u64>,
}

/// Conditional Karhunen–Loève expansion `mean + Σ √λ_i ψ_i ξ_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    into = "CkleBasisDoc<T>",
    try_from = "CkleBasisDoc<T>",
    bound = "T: Real"
)]
pub struct CkleBasis<T: Real> {
    mean: DVector<T>,
    eigenvalues: DVector<T>,
    eigenvectors: DMatrix<T>,
    energy_fraction: T,
    provenance: BasisProvenance,
    /// Columns `√λ_i ψ_i`.
    modes: DMatrix<T>,
}

impl<T: Real> CkleBasis<T> {
    pub fn new(
        mean: DVector<T>,
        eigenvalues: DVector<T>,
        eigenvectors: DMatrix<T>,
        energy_fraction: T,
        provenance: BasisProvenance,
    ) -> Result<Self> {
        let n = mean.len();
        let k = eigenvalues.len();
        if eigenvectors.nrows() != n || eigenvectors.ncols() != k {
            return Err(Error::invalid(format!(
                "eigenvector matrix is {}x{}, expected {n}x{k}",
                eigenvectors.nrows(),
                eigenvectors.ncols()
            )));
        }
        if eigenvalues.iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("negative eigenvalue in basis"));
        }
        if eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("basis eigenvalues must be nonincreasing"));
        }
        let mut modes = eigenvectors.clone();
        for (i, mut col) in modes.column_iter_mut().enumerate() {
            col *= eigenvalues[i].sqrt();
        }
        Ok(Self {
            mean,
            eigenvalues,
            eigenvectors,
            energy_fraction,
            provenance,
            modes,
        })
    }

    /// Basis from a covariance matrix and a mean.
    pub fn from_covariance(
        mean: DVector<T>,
        cov: &DMatrix<T>,
        truncation: Truncation,
        mut provenance: BasisProvenance,
    ) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                what: "covariance",
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        let eig = truncated_eig(cov, truncation)?;
        provenance.truncation = Some(truncation);
        Self::new(
            mean,
            eig.eigenvalues,
            eig.eigenvectors,
            eig.energy_fraction,
            provenance,
        )
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<T> {
        &self.eigenvectors
    }

    /// `n_cells × n_terms` matrix with columns `√λ_i ψ_i`.
    pub fn modes(&self) -> &DMatrix<T> {
        &self.modes
    }

    pub fn n_terms(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_cells(&self) -> usize {
        self.mean.len()
    }

    pub fn energy_fraction(&self) -> T {
        self.energy_fraction
    }

    pub fn provenance(&self) -> &BasisProvenance {
        &self.provenance
    }

    /// Same basis keeping only the leading `n_terms` modes.
    pub fn truncated(&self, n_terms: usize) -> Result<Self> {
        if n_terms == 0 || n_terms > self.n_terms() {
            return Err(Error::invalid(format!(
                "cannot keep {n_terms} of {} modes",
                self.n_terms()
            )));
        }
        let full = self.eigenvalues.sum();
        let kept = self.eigenvalues.rows(0, n_terms).into_owned();
        let fraction = if full > T::zero() {
            self.energy_fraction * kept.sum() / full
        } else {
            self.energy_fraction
        };
        let mut provenance = self.provenance.clone();
        provenance.truncation = Some(Truncation::Terms(n_terms));
        Self::new(
            self.mean.clone(),
            kept,
            self.eigenvectors.columns(0, n_terms).into_owned(),
            fraction,
            provenance,
        )
    }

    /// `mean + Σ_i √λ_i ψ_i ξ_i`.
    pub fn eval(&self, coeffs: &DVector<T>) -> Result<DVector<T>> {
        if coeffs.len() != self.n_terms() {
            return Err(Error::DimensionMismatch {
                what: "CKLE coefficients",
                expected: self.n_terms(),
                actual: coeffs.len(),
            });
        }
        Ok(self.eval_unchecked(coeffs))
    }

    pub(crate) fn eval_unchecked(&self, coeffs: &DVector<T>) -> DVector<T> {
        &self.mean + &self.modes * coeffs
    }

    /// Pointwise variance `Σ_i λ_i ψ_i²` of the expansion under standard-normal
    /// coefficients.
    pub fn pointwise_variance(&self) -> DVector<T> {
        DVector::from_fn(self.n_cells(), |i, _| {
            self.modes.row(i).iter().fold(T::zero(), |s, &v| s + v * v)
        })
    }

    /// `Σ_i λ_i ψ_i ψ_iᵀ`.
    pub fn covariance(&self) -> DMatrix<T> {
        &self.modes * self.modes.transpose()
    }
}

/// `ckle_eval` as a free function.
pub fn ckle_eval<T: Real>(basis: &CkleBasis<T>, coeffs: &DVector<T>) -> Result<DVector<T>> {
    basis.eval(coeffs)
}

/// Serialized form of a [`CkleBasis`]; eigenvectors are stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkleBasisDoc<T> {
    pub n_cells: usize,
    pub n_terms: usize,
    pub mean: Vec<T>,
    pub eigenvalues: Vec<T>,
    pub eigenvectors_row_major: Vec<T>,
    pub energy_fraction: T,
    pub provenance: BasisProvenance,
}

impl<T: Real> From<CkleBasis<T>> for CkleBasisDoc<T> {
    fn from(b: CkleBasis<T>) -> Self {
        let (n, k) = b.eigenvectors.shape();
        let mut rows = Vec::with_capacity(n * k);
        for i in 0..n {
            for j in 0..k {
                rows.push(b.eigenvectors[(i, j)]);
            }
        }
        Self {
            n_cells: n,
            n_terms: k,
            mean: b.mean.as_slice().to_vec(),
            eigenvalues: b.eigenvalues.as_slice().to_vec(),
            eigenvectors_row_major: rows,
            energy_fraction: b.energy_fraction,
            provenance: b.provenance,
        }
    }
}

impl<T: Real> TryFrom<CkleBasisDoc<T>> for CkleBasis<T> {
    type Error = Error;

    fn try_from(d: CkleBasisDoc<T>) -> Result<Self> {
        if d.mean.len() != d.n_cells
            || d.eigenvalues.len() != d.n_terms
            || d.eigenvectors_row_major.len() != d.n_cells * d.n_terms
        {
            return Err(Error::invalid("inconsistent basis document sizes"));
        }
        Self::new(
            DVector::from_vec(d.mean),
            DVector::from_vec(d.eigenvalues),
            DMatrix::from_row_slice(d.n_cells, d.n_terms, &d.eigenvectors_row_major),
            d.energy_fraction,
            d.provenance,
        )
    }
}

/// Draws a standard-normal coefficient vector.
pub fn standard_normal_vector<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<T> {
    DVector::from_fn(len, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

/// Ensemble statistics of a pushed-forward prior.
#[derive(Debug, Clone, PartialEq)]
pub struct McStatePrior<T: Real> {
    pub mean: DVector<T>,
    /// Unbiased (`n − 1`) sample covariance.
    pub covariance: DMatrix<T>,
    pub n_samples: usize,
    pub n_failed: usize,
}

/// Largest tolerated fraction of failed forward solves in a Monte Carlo prior.
pub const MAX_MC_FAILURE_RATE: f64 = 0.01;

/// Pushes `n_mc` standard-normal draws of `basis` through `forward` and
/// returns the ensemble mean and covariance. Draw `i` uses its own
/// counter-derived seed, so the result does not depend on the worker count.
pub fn mc_pushforward<T, F>(
    basis: &CkleBasis<T>,
    n_mc: usize,
    seed: u64,
    forward: F,
) -> Result<McStatePrior<T>>
where
    T: Real,
    F: Fn(&DVector<T>) -> Result<DVector<T>> + Sync,
{
    if n_mc < 2 {
        return Err(Error::invalid("Monte Carlo prior needs at least 2 draws"));
    }
    let outputs: Vec<Option<DVector<T>>> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, stream::MC_PRIOR, i as u64);
            let coeffs = standard_normal_vector(&mut rng, basis.n_terms());
            let field = basis.eval_unchecked(&coeffs);
            match forward(&field) {
                Ok(u) if u.iter().all(|v| v.is_finite_value()) => Some(u),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("forward solve {i} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let n_failed = outputs.iter().filter(|o| o.is_none()).count();
    if n_failed as f64 > MAX_MC_FAILURE_RATE * n_mc as f64 {
        return Err(Error::TooManyFailures {
            what: "Monte Carlo forward solves",
            failed: n_failed,
            total: n_mc,
        });
    }
    if n_failed > 0 {
        log::warn!("{n_failed} of {n_mc} Monte Carlo forward solves failed and were skipped");
    }
    let good: Vec<&DVector<T>> = outputs.iter().flatten().collect();
    let m = good.len();
    if m < 2 {
        return Err(Error::invalid("fewer than 2 successful Monte Carlo draws"));
    }
    let dim = good[0].len();
    let mut mean = DVector::zeros(dim);
    for u in &good {
        mean += *u;
    }
    mean /= T::from_count(m);
    let centered = DMatrix::from_fn(dim, m, |i, j| good[j][i] - mean[i]);
    let covariance = (&centered * centered.transpose()) / T::from_count(m - 1);
    Ok(McStatePrior {
        mean,
        covariance,
        n_samples: m,
        n_failed,
    })
}

/// Monte Carlo prior of the head: samples of `basis` solved through the
/// Darcy forward problem.
pub fn mc_state_prior<T: Real>(
    mesh: &Mesh<T>,
    y_basis: &CkleBasis<T>,
    bc: &crate::mesh::BoundaryConditions<T>,
    n_mc: usize,
    seed: u64,
) -> Result<McStatePrior<T>> {
    if y_basis.n_cells() != mesh.n_cells() {
        return Err(Error::DimensionMismatch {
            what: "y basis",
            expected: mesh.n_cells(),
            actual: y_basis.n_cells(),
        });
    }
    mc_pushforward(y_basis, n_mc, seed, |y| {
        crate::darcy::solve_forward(mesh, y, bc)
    })
}
