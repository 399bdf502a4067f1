//! Randomize-then-optimize posterior sampling with an optional Metropolis
//! correction based on the Jacobian of the noise-to-sample map.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::standard_normal_vector;
use crate::linalg::log_abs_det;
use crate::model::ResidualModel;
use crate::optim::{minimize, OptimConfig};
use crate::pickle::{map_optimize, CoefficientPair, LossParams};
use crate::scalar::Real;
use crate::seed::{derive_seed, rng_for, stream};

/// Below this many coefficients Metropolization is on unless overridden.
pub const AUTO_METROPOLIS_LIMIT: usize = 100;

/// Largest tolerated fraction of failed minimizations in an ensemble.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// Perturbations `ω ~ N(0, σ_r² I)`, `α ~ N(0, σ_ξ² I)`, `β ~ N(0, σ_η² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct NoiseDraw<T: Real> {
    pub omega: DVector<T>,
    pub alpha: DVector<T>,
    pub beta: DVector<T>,
    pub seed: u64,
}

impl<T: Real> NoiseDraw<T> {
    pub fn zeros(n_residuals: usize, n_xi: usize, n_eta: usize) -> Self {
        Self {
            omega: DVector::zeros(n_residuals),
            alpha: DVector::zeros(n_xi),
            beta: DVector::zeros(n_eta),
            seed: 0,
        }
    }

    /// Draw `index` under `base_seed`.
    pub fn draw<M: ResidualModel<T> + ?Sized>(
        model: &M,
        params: &LossParams<T>,
        base_seed: u64,
        index: u64,
    ) -> Self {
        let seed = derive_seed(base_seed, stream::RPICKLE_NOISE, index);
        let mut rng = rng_for(base_seed, stream::RPICKLE_NOISE, index);
        let omega = standard_normal_vector(&mut rng, model.n_residuals()) * params.sigma_r_sq.sqrt();
        let alpha = standard_normal_vector(&mut rng, model.n_xi()) * params.sigma_xi_sq.sqrt();
        let beta = standard_normal_vector(&mut rng, model.n_eta()) * params.sigma_eta_sq.sqrt();
        Self {
            omega,
            alpha,
            beta,
            seed,
        }
    }

    fn check<M: ResidualModel<T> + ?Sized>(&self, model: &M) -> Result<()> {
        for (what, expected, actual) in [
            ("omega", model.n_residuals(), self.omega.len()),
            ("alpha", model.n_xi(), self.alpha.len()),
            ("beta", model.n_eta(), self.beta.len()),
        ] {
            if expected != actual {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    fn prior_shift(&self) -> DVector<T> {
        CoefficientPair {
            xi: self.alpha.clone(),
            eta: self.beta.clone(),
        }
        .stacked()
    }
}

/// Randomized loss and gradient over stacked `z`.
fn randomized_loss_and_grad<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    noise: &NoiseDraw<T>,
    shift: &DVector<T>,
    z: &DVector<T>,
) -> (T, DVector<T>) {
    let prec = params.prior_precision(model.n_xi(), model.n_eta());
    let inv_r = T::one() / params.sigma_r_sq;
    let d = model.residual(z) - &noise.omega;
    let dz = z - shift;
    let wdz = dz.component_mul(&prec);
    let half = T::lit(0.5);
    let value = half * inv_r * d.norm_squared() + half * dz.dot(&wdz);
    let grad = model.vjp(z, &(d * inv_r)) + wdz;
    (value, grad)
}

/// `½‖R(z) − ω‖²/σ_r² + ½‖ξ − α‖²/σ_ξ² + ½‖η − β‖²/σ_η²`.
pub fn randomized_loss<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &CoefficientPair<T>,
    noise: &NoiseDraw<T>,
) -> Result<T> {
    params.validate()?;
    noise.check(model)?;
    let zs = z.check(model)?;
    Ok(randomized_loss_and_grad(model, params, noise, &noise.prior_shift(), &zs).0)
}

/// One minimizer of the randomized loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PosteriorSample<T: Real> {
    /// Position of the proposal that produced this state.
    pub source_index: usize,
    pub seed: u64,
    pub z_star: CoefficientPair<T>,
    /// `R(z*) − ω`.
    pub delta: DVector<T>,
    pub loss: T,
    pub grad_norm: T,
    pub iterations: usize,
    pub log_det_j: Option<T>,
    pub accepted: bool,
    pub optimizer_converged: bool,
}

impl<T: Real> PosteriorSample<T> {
    /// Converged with finite loss (and finite log-det when present).
    pub fn is_usable(&self) -> bool {
        self.optimizer_converged
            && self.loss.is_finite_value()
            && self.log_det_j.is_none_or(|v| v.is_finite_value())
    }
}

/// Minimizes the randomized loss for `noise` starting from `init`.
pub fn sample_once<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    noise: &NoiseDraw<T>,
    init: &CoefficientPair<T>,
    config: &OptimConfig,
) -> Result<PosteriorSample<T>> {
    params.validate()?;
    noise.check(model)?;
    let z0 = init.check(model)?;
    Ok(sample_unchecked(model, params, noise, z0, config, 0))
}

fn sample_unchecked<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    noise: &NoiseDraw<T>,
    z0: DVector<T>,
    config: &OptimConfig,
    index: usize,
) -> PosteriorSample<T> {
    let shift = noise.prior_shift();
    let r = minimize(
        |z| randomized_loss_and_grad(model, params, noise, &shift, z),
        z0,
        config,
    );
    let delta = model.residual(&r.x) - &noise.omega;
    PosteriorSample {
        source_index: index,
        seed: noise.seed,
        z_star: CoefficientPair::from_stacked(&r.x, model.n_xi()),
        delta,
        loss: r.value,
        grad_norm: r.grad_norm(),
        iterations: r.iterations,
        log_det_j: None,
        accepted: true,
        optimizer_converged: r.converged,
    }
}

/// `log|det(I + Σ̂ Σ_n w_n ∇²R_n + Σ̂ JᵀJ/σ_r²)|` with `w = δ/σ_r²`;
/// `−∞` when the matrix is singular.
pub fn jacobian_logdet<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z_star: &CoefficientPair<T>,
    delta: &DVector<T>,
) -> Result<T> {
    params.validate()?;
    let z = z_star.check(model)?;
    if delta.len() != model.n_residuals() {
        return Err(Error::DimensionMismatch {
            what: "delta",
            expected: model.n_residuals(),
            actual: delta.len(),
        });
    }
    Ok(logdet_unchecked(model, params, &z, delta))
}

/// The matrix whose determinant [`jacobian_logdet`] takes.
pub(crate) fn jacobian_matrix<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &DVector<T>,
    delta: &DVector<T>,
) -> DMatrix<T> {
    let inv_r = T::one() / params.sigma_r_sq;
    let j = model.jacobian(z);
    let c = model.curvature(z, &(delta * inv_r));
    let mut m = c + j.tr_mul(&j) * inv_r;
    let n_xi = model.n_xi();
    for (k, mut row) in m.row_iter_mut().enumerate() {
        let var = if k < n_xi {
            params.sigma_xi_sq
        } else {
            params.sigma_eta_sq
        };
        row *= var;
    }
    for k in 0..m.nrows() {
        m[(k, k)] += T::one();
    }
    m
}

fn logdet_unchecked<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &DVector<T>,
    delta: &DVector<T>,
) -> T {
    let m = jacobian_matrix(model, params, z, delta);
    let (log, sign) = log_abs_det(&m);
    if sign == T::zero() || log.as_f64() < (1e-300f64).ln() {
        T::from_f64(f64::NEG_INFINITY).unwrap()
    } else {
        log
    }
}

/// Ordered posterior samples with acceptance metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PosteriorEnsemble<T: Real> {
    pub samples: Vec<PosteriorSample<T>>,
    pub sigma_r_sq: T,
    pub base_seed: u64,
    pub metropolized: bool,
    /// Fraction of proposals accepted by the Metropolis filter.
    pub acceptance_rate: Option<f64>,
    pub n_failed: usize,
}

impl<T: Real> PosteriorEnsemble<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples that enter moment estimates.
    pub fn usable(&self) -> impl Iterator<Item = &PosteriorSample<T>> {
        self.samples.iter().filter(|s| s.is_usable())
    }

    pub fn usable_xi(&self) -> Vec<DVector<T>> {
        self.usable().map(|s| s.z_star.xi.clone()).collect()
    }

    pub fn usable_eta(&self) -> Vec<DVector<T>> {
        self.usable().map(|s| s.z_star.eta.clone()).collect()
    }

    pub fn usable_stacked(&self) -> Vec<DVector<T>> {
        self.usable().map(|s| s.z_star.stacked()).collect()
    }
}

/// Sequential accept/reject pass over `proposals` with ratio
/// `min{1, exp(½(log det J_k − log det J_current))}`.
///
/// The first usable proposal is accepted outright. A rejected slot holds a
/// copy of the current state with `accepted = false`; unusable proposals are
/// always rejected.
pub fn metropolis_filter<T: Real, R: Rng + ?Sized>(
    proposals: Vec<PosteriorSample<T>>,
    rng: &mut R,
) -> Result<(Vec<PosteriorSample<T>>, f64)> {
    let weights = proposals
        .iter()
        .map(|p| {
            p.log_det_j.map(|v| T::lit(0.5) * v).ok_or_else(|| {
                Error::invalid(format!("proposal {} has no Jacobian log-determinant", p.source_index))
            })
        })
        .collect::<Result<Vec<T>>>()?;
    metropolis_filter_weighted(proposals, &weights, rng)
}

/// Independence Metropolis pass accepting with `min{1, exp(w_k − w_current)}`
/// for log weights `w`. Same first-sample and rejection rules as
/// [`metropolis_filter`]; a non-finite weight makes a proposal unusable.
pub fn metropolis_filter_weighted<T: Real, R: Rng + ?Sized>(
    proposals: Vec<PosteriorSample<T>>,
    log_weights: &[T],
    rng: &mut R,
) -> Result<(Vec<PosteriorSample<T>>, f64)> {
    if log_weights.len() != proposals.len() {
        return Err(Error::DimensionMismatch {
            what: "log weights",
            expected: proposals.len(),
            actual: log_weights.len(),
        });
    }
    let n = proposals.len();
    let mut out: Vec<PosteriorSample<T>> = Vec::with_capacity(n);
    let mut current: Option<(PosteriorSample<T>, f64)> = None;
    let mut accepted = 0usize;
    for (mut p, w) in proposals.into_iter().zip(log_weights.iter().map(|w| w.as_f64())) {
        let u: f64 = rng.random();
        let take = match &current {
            _ if !p.is_usable() || !w.is_finite() => false,
            None => true,
            Some((_, cur_w)) => {
                let log_ratio = w - cur_w;
                log_ratio >= 0.0 || u < log_ratio.exp()
            }
        };
        if take {
            p.accepted = true;
            accepted += 1;
            current = Some((p.clone(), w));
            out.push(p);
        } else if let Some((cur, _)) = &current {
            let mut held = cur.clone();
            held.accepted = false;
            out.push(held);
        } else {
            p.accepted = false;
            out.push(p);
        }
    }
    let rate = if n == 0 { 0.0 } else { accepted as f64 / n as f64 };
    Ok((out, rate))
}

/// How proposals are weighted by the Metropolis filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetropolisRule {
    /// `½ log|det J|`, the approximate ratio of [`metropolis_filter`].
    #[default]
    SqrtJacobian,
    /// Exact target-to-proposal weight of [`exact_log_weight`].
    ExactWeight,
}

/// Log of the exact posterior-to-proposal density ratio at a minimizer, up
/// to a constant:
/// `−log|det J| − ½ bᵀP⁻¹b + ½ log|I + Σ̂ GᵀG/σ_r²|` with `G = ∂R/∂z`,
/// `b = (R − Gz)/σ_r²` and `P = (I + G Σ̂ Gᵀ/σ_r²)/σ_r²`.
///
/// It follows from augmenting the posterior with the residual noise `ω` and
/// integrating `ω` out in closed form; for a linear residual every term is
/// constant. Evaluated in coefficient space through the Woodbury identity.
pub fn exact_log_weight<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z_star: &CoefficientPair<T>,
    delta: &DVector<T>,
) -> Result<T> {
    let ld = jacobian_logdet(model, params, z_star, delta)?;
    Ok(exact_weight_unchecked(model, params, &z_star.stacked(), ld))
}

fn exact_weight_unchecked<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &DVector<T>,
    log_det_j: T,
) -> T {
    let neg_inf = T::from_f64(f64::NEG_INFINITY).unwrap();
    if !log_det_j.is_finite_value() {
        return neg_inf;
    }
    let s2 = params.sigma_r_sq;
    let g = model.jacobian(z);
    let b = (model.residual(z) - &g * z) / s2;
    let gtb = g.tr_mul(&b);
    let gtg = g.tr_mul(&g);
    let prec = params.prior_precision(model.n_xi(), model.n_eta());
    // A = σ_r² Σ̂⁻¹ + GᵀG, so bᵀP⁻¹b = σ_r² (‖b‖² − (Gᵀb)ᵀA⁻¹(Gᵀb)).
    let mut a = gtg.clone();
    for k in 0..a.nrows() {
        a[(k, k)] += s2 * prec[k];
    }
    let Some(chol) = a.cholesky() else {
        return neg_inf;
    };
    let quad = s2 * (b.norm_squared() - gtb.dot(&chol.solve(&gtb)));
    // I + Σ̂GᵀG/σ_r² = Σ̂ A / σ_r², so its log-det is log|A| − Σ log(σ_r² Σ̂⁻¹).
    let log_a = chol.l().diagonal().iter().fold(T::zero(), |acc, d| acc + d.ln()) * T::lit(2.0);
    let log_s = prec.iter().fold(log_a, |acc, p| acc - (s2 * *p).ln());
    -log_det_j - T::lit(0.5) * quad + T::lit(0.5) * log_s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpickleConfig {
    pub n_ens: usize,
    pub seed: u64,
    /// `None` picks Metropolization for fewer than 100 coefficients.
    pub metropolize: Option<bool>,
    /// Start every minimization at the MAP point rather than the origin.
    pub warm_start: bool,
    pub metropolis_rule: MetropolisRule,
    pub optimizer: OptimConfig,
}

impl Default for RpickleConfig {
    fn default() -> Self {
        Self {
            n_ens: 10_000,
            seed: 0,
            metropolize: None,
            warm_start: true,
            metropolis_rule: MetropolisRule::default(),
            optimizer: OptimConfig::default(),
        }
    }
}

impl RpickleConfig {
    pub fn metropolize_for(&self, n_coeffs: usize) -> bool {
        self.metropolize.unwrap_or(n_coeffs < AUTO_METROPOLIS_LIMIT)
    }
}

/// Draws `n_ens` proposals in parallel, then filters them sequentially when
/// Metropolization is enabled. Output is independent of the worker count.
pub fn run_ensemble<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    config: &RpickleConfig,
) -> Result<PosteriorEnsemble<T>> {
    let start = if config.warm_start {
        let map = map_optimize(
            model,
            params,
            &CoefficientPair::zeros(model.n_xi(), model.n_eta()),
            &config.optimizer,
        )?;
        map.z.stacked()
    } else {
        DVector::zeros(model.n_coeffs())
    };
    run_ensemble_from(model, params, config, &start)
}

/// [`run_ensemble`] with an explicit starting point for every minimization.
pub fn run_ensemble_from<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    config: &RpickleConfig,
    start: &DVector<T>,
) -> Result<PosteriorEnsemble<T>> {
    params.validate()?;
    config.optimizer.validate()?;
    model.check_coeffs(start)?;
    if config.n_ens == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let metropolize = config.metropolize_for(model.n_coeffs());
    let (proposals, weights): (Vec<PosteriorSample<T>>, Vec<T>) = (0..config.n_ens)
        .into_par_iter()
        .map(|i| {
            let noise = NoiseDraw::draw(model, params, config.seed, i as u64);
            let mut s = sample_unchecked(model, params, &noise, start.clone(), &config.optimizer, i);
            let mut w = T::zero();
            if metropolize {
                let z = s.z_star.stacked();
                let ld = logdet_unchecked(model, params, &z, &s.delta);
                s.log_det_j = Some(ld);
                w = match config.metropolis_rule {
                    MetropolisRule::SqrtJacobian => T::lit(0.5) * ld,
                    MetropolisRule::ExactWeight => exact_weight_unchecked(model, params, &z, ld),
                };
            }
            (s, w)
        })
        .unzip();
    let n_failed = proposals.iter().filter(|s| !s.is_usable()).count();
    if n_failed as f64 > MAX_FAILURE_RATE * config.n_ens as f64 {
        let worst = proposals
            .iter()
            .filter(|s| !s.is_usable())
            .map(|s| s.grad_norm.as_f64())
            .fold(0.0f64, f64::max);
        log::error!("{n_failed} of {} minimizations failed; largest gradient norm {worst:e}", config.n_ens);
        return Err(Error::TooManyFailures {
            what: "randomized minimizations",
            failed: n_failed,
            total: config.n_ens,
        });
    }
    if n_failed > 0 {
        log::warn!("{n_failed} of {} minimizations failed and are excluded from moments", config.n_ens);
    }
    let (samples, acceptance_rate) = if metropolize {
        let mut rng = rng_for(config.seed, stream::METROPOLIS, 0);
        let (s, rate) = metropolis_filter_weighted(proposals, &weights, &mut rng)?;
        (s, Some(rate))
    } else {
        (proposals, None)
    };
    if config.n_ens < 2 {
        log::warn!("ensemble of one sample: posterior moments are undefined");
    }
    Ok(PosteriorEnsemble {
        samples,
        sigma_r_sq: params.sigma_r_sq,
        base_seed: config.seed,
        metropolized: metropolize,
        acceptance_rate,
        n_failed,
    })
}
