//! Posterior summaries, scoring against a reference, Laplace conditioning
//! and the closed-form linear-Gaussian posterior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gp::CkleBasis;
use crate::linalg::{sorted_symmetric_eigen, symmetrize};
use crate::model::{LinearModel, ResidualModel};
use crate::pickle::{CoefficientPair, LossParams};
use crate::scalar::Real;

/// Per-cell mean and unbiased standard deviation of `basis` evaluated at
/// each coefficient sample.
pub fn posterior_moments<T: Real>(
    coeffs: &[DVector<T>],
    basis: &CkleBasis<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    if coeffs.len() < 2 {
        return Err(Error::invalid(format!(
            "posterior moments need at least 2 samples, got {}",
            coeffs.len()
        )));
    }
    let fields = coeffs
        .iter()
        .map(|c| basis.eval(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(field_moments(&fields))
}

/// Sample mean and unbiased standard deviation of equally sized vectors.
pub fn field_moments<T: Real>(fields: &[DVector<T>]) -> (DVector<T>, DVector<T>) {
    let n = fields.len();
    let dim = fields.first().map_or(0, |f| f.len());
    let mut mean = DVector::zeros(dim);
    for f in fields {
        mean += f;
    }
    mean /= T::from_count(n);
    let mut var = DVector::zeros(dim);
    for f in fields {
        let d = f - &mean;
        var += d.component_mul(&d);
    }
    var /= T::from_count(n.max(2) - 1);
    (mean, var.map(|v| v.sqrt()))
}

/// Sample covariance (unbiased) of equally sized vectors.
pub fn sample_covariance<T: Real>(samples: &[DVector<T>]) -> (DVector<T>, DMatrix<T>) {
    let (mean, _) = field_moments(samples);
    let dim = mean.len();
    let centered = DMatrix::from_fn(dim, samples.len(), |i, j| samples[j][i] - mean[i]);
    let cov = &centered * centered.transpose() / T::from_count(samples.len().max(2) - 1);
    (mean, cov)
}

fn check_lengths<T: Real>(a: &DVector<T>, b: &DVector<T>, what: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what,
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// `−Σ_i [(μ_i − y_i)²/(2σ_i²) + ½ log(2πσ_i²)]` over `cells` (all when `None`).
pub fn lpp<T: Real>(
    mean: &DVector<T>,
    std: &DVector<T>,
    reference: &DVector<T>,
    cells: Option<&[usize]>,
) -> Result<T> {
    check_lengths(mean, std, "std field")?;
    check_lengths(mean, reference, "reference field")?;
    let all: Vec<usize>;
    let cells = match cells {
        Some(c) => c,
        None => {
            all = (0..mean.len()).collect();
            &all
        }
    };
    let zero: Vec<usize> = cells.iter().copied().filter(|&i| !(std[i] > T::zero())).collect();
    if !zero.is_empty() {
        return Err(Error::invalid(format!(
            "zero predictive variance at cells {zero:?}"
        )));
    }
    let two_pi = T::lit(2.0 * std::f64::consts::PI);
    let half = T::lit(0.5);
    Ok(cells.iter().fold(T::zero(), |acc, &i| {
        let var = std[i] * std[i];
        let d = mean[i] - reference[i];
        acc - (d * d / (T::lit(2.0) * var) + half * (two_pi * var).ln())
    }))
}

/// Two-sided standard-normal quantile for a central interval of `level`.
pub fn gaussian_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("coverage level must lie in (0, 1)"));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 * (1.0 + level)))
}

/// Fraction of cells with `|reference − mean| ≤ z(level)·std`.
pub fn coverage<T: Real>(
    mean: &DVector<T>,
    std: &DVector<T>,
    reference: &DVector<T>,
    level: f64,
) -> Result<f64> {
    check_lengths(mean, std, "std field")?;
    check_lengths(mean, reference, "reference field")?;
    let z = gaussian_z(level)?;
    if mean.is_empty() {
        return Ok(0.0);
    }
    let inside = (0..mean.len())
        .filter(|&i| (reference[i] - mean[i]).abs().as_f64() <= z * std[i].as_f64())
        .count();
    Ok(inside as f64 / mean.len() as f64)
}

/// Fraction of cells whose reference lies between the empirical
/// `(1 − level)/2` and `(1 + level)/2` quantiles of the sampled fields.
pub fn quantile_coverage<T: Real>(
    fields: &[DVector<T>],
    reference: &DVector<T>,
    level: f64,
) -> Result<f64> {
    gaussian_z(level)?;
    if fields.len() < 2 {
        return Err(Error::invalid("quantile coverage needs at least 2 samples"));
    }
    let n = reference.len();
    let mut inside = 0;
    for i in 0..n {
        let mut col: Vec<f64> = fields.iter().map(|f| f[i].as_f64()).collect();
        col.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&col, 0.5 * (1.0 - level));
        let hi = quantile_sorted(&col, 0.5 * (1.0 + level));
        let r = reference[i].as_f64();
        if lo <= r && r <= hi {
            inside += 1;
        }
    }
    Ok(inside as f64 / n.max(1) as f64)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(‖mean − ref‖₂/‖ref‖₂, max|mean − ref|)`.
pub fn error_norms<T: Real>(mean: &DVector<T>, reference: &DVector<T>) -> Result<(T, T)> {
    check_lengths(reference, mean, "mean field")?;
    let norm = reference.norm();
    if norm == T::zero() {
        return Err(Error::invalid("relative error undefined for a zero reference"));
    }
    let d = mean - reference;
    Ok((d.norm() / norm, d.amax()))
}

/// Running-statistic ratios against the statistic of the first `n_ens` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    /// `|mean(x₁..x_m)| / |mean(x₁..x_N)|`, absent when the full mean is 0
    /// and some partial mean is not.
    pub mean_ratio: Option<Vec<f64>>,
    pub std_ratio: Option<Vec<f64>>,
}

fn ratio_series(partial: &[f64], full: f64) -> Option<Vec<f64>> {
    let full = full.abs();
    partial
        .iter()
        .map(|&p| {
            let p = p.abs();
            if p == full {
                Some(1.0)
            } else if full == 0.0 {
                None
            } else {
                Some(p / full)
            }
        })
        .collect()
}

/// Ratios of running mean and standard deviation to their values over the
/// first `n_ens` entries, for `m = 1..=n_ens`. Identical statistics give a
/// ratio of 1 (including `0/0`); the standard deviation of one value is 0.
pub fn convergence_ratios<T: Real>(series: &[T], n_ens: usize) -> Result<ConvergenceCurve> {
    if n_ens == 0 || n_ens > series.len() {
        return Err(Error::invalid(format!(
            "reference size {n_ens} outside 1..={}",
            series.len()
        )));
    }
    let mut means = Vec::with_capacity(n_ens);
    let mut stds = Vec::with_capacity(n_ens);
    // Welford's running moments.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (k, x) in series[..n_ens].iter().enumerate() {
        let x = x.as_f64();
        let n = (k + 1) as f64;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
        means.push(mean);
        stds.push(if k == 0 { 0.0 } else { (m2 / (n - 1.0)).max(0.0).sqrt() });
    }
    let (full_mean, full_std) = (means[n_ens - 1], stds[n_ens - 1]);
    Ok(ConvergenceCurve {
        mean_ratio: ratio_series(&means, full_mean),
        std_ratio: ratio_series(&stds, full_std),
    })
}

/// Gaussian approximation at the MAP.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceApproximation<T: Real> {
    /// Hessian of `L/γ`.
    pub hessian: DMatrix<T>,
    pub covariance: DMatrix<T>,
    /// Covariance eigenvalues, nonincreasing.
    pub spectrum: DVector<T>,
    pub condition_number: T,
}

/// Hessian of the negative log posterior `L/γ` at `z`:
/// `Σ̂⁻¹ + (JᵀJ + Σ_n R_n ∇²R_n)/γ`.
pub fn posterior_hessian<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &DVector<T>,
) -> DMatrix<T> {
    let r = model.residual(z);
    let j = model.jacobian(z);
    let mut h = (j.tr_mul(&j) + model.curvature(z, &r)) / params.sigma_r_sq;
    let prec = params.prior_precision(model.n_xi(), model.n_eta());
    for k in 0..h.nrows() {
        h[(k, k)] += prec[k];
    }
    symmetrize(&h).0
}

/// Laplace covariance at `map_point` and its condition number
/// `λ_max/λ_min`.
pub fn laplace_posterior<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    map_point: &CoefficientPair<T>,
) -> Result<LaplaceApproximation<T>> {
    params.validate()?;
    let z = map_point.check(model)?;
    let hessian = posterior_hessian(model, params, &z);
    let (h_eig, vecs) = sorted_symmetric_eigen(&hessian);
    let min = h_eig[h_eig.len() - 1];
    if !(min > T::zero()) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min.as_f64(),
        });
    }
    // Covariance eigenpairs are the reciprocal Hessian eigenpairs.
    let inv = h_eig.map(|v| T::one() / v);
    let covariance = symmetrize(&(&vecs * DMatrix::from_diagonal(&inv) * vecs.transpose())).0;
    let spectrum = DVector::from_iterator(inv.len(), inv.iter().rev().copied());
    let condition_number = h_eig[0] / min;
    Ok(LaplaceApproximation {
        hessian,
        covariance,
        spectrum,
        condition_number,
    })
}

/// Exact posterior `(μ, Σ)` of the linear-Gaussian model `R = Aξ + Bη − c`.
pub fn linear_oracle<T: Real>(
    lm: &LinearModel<T>,
    params: &LossParams<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    params.validate()?;
    let g = lm.design();
    let inv_r = T::one() / params.sigma_r_sq;
    let mut precision = g.tr_mul(&g) * inv_r;
    let prec = params.prior_precision(lm.n_xi(), lm.n_eta());
    for k in 0..precision.nrows() {
        precision[(k, k)] += prec[k];
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("posterior precision is not positive definite".into()))?;
    let sigma = symmetrize(&chol.inverse()).0;
    let mu = chol.solve(&(g.tr_mul(&lm.c_vector) * inv_r));
    Ok((mu, sigma))
}

/// Serializable summary of one posterior at one residual variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub sampler: String,
    pub sigma_r_sq: f64,
    pub n_samples: usize,
    pub mean_field: Vec<f64>,
    pub std_field: Vec<f64>,
    pub lpp: Option<f64>,
    pub coverage: f64,
    pub quantile_coverage: Option<f64>,
    pub rel_l2: f64,
    pub l_inf: f64,
    pub u_rel_l2: Option<f64>,
    pub u_l_inf: Option<f64>,
    pub laplace_spectrum: Vec<f64>,
    pub condition_number: Option<f64>,
    pub acceptance_rate: Option<f64>,
    pub convergence_curves: Vec<CoordinateCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCurve {
    pub coordinate: usize,
    pub curve: ConvergenceCurve,
}
