//! Hamiltonian Monte Carlo with identity mass matrix and dual-averaging
//! step-size adaptation.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::standard_normal_vector;
use crate::model::ResidualModel;
use crate::pickle::{loss_and_grad, CoefficientPair, LossParams};
use crate::scalar::Real;
use crate::seed::{derive_seed, rng_for, stream};

/// Differentiable unnormalized log density.
pub trait LogDensity<T: Real>: Sync {
    fn dim(&self) -> usize;

    /// Value and gradient; non-finite values mark an inadmissible point.
    fn log_density_and_grad(&self, z: &DVector<T>) -> (T, DVector<T>);
}

/// `−L(z)/γ`: the coefficient posterior up to a constant.
pub struct PosteriorDensity<'a, T: Real, M: ResidualModel<T> + ?Sized> {
    pub model: &'a M,
    pub params: LossParams<T>,
}

impl<T: Real, M: ResidualModel<T> + ?Sized> LogDensity<T> for PosteriorDensity<'_, T, M> {
    fn dim(&self) -> usize {
        self.model.n_coeffs()
    }

    fn log_density_and_grad(&self, z: &DVector<T>) -> (T, DVector<T>) {
        let (l, g) = loss_and_grad(self.model, &self.params, z);
        let s = -T::one() / self.params.sigma_r_sq;
        (l * s, g * s)
    }
}

/// Log posterior `−L(z)/γ` and its gradient.
pub fn log_posterior_and_grad<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &CoefficientPair<T>,
) -> Result<(T, CoefficientPair<T>)> {
    params.validate()?;
    let zs = z.check(model)?;
    let d = PosteriorDensity {
        model,
        params: *params,
    };
    let (v, g) = d.log_density_and_grad(&zs);
    Ok((v, CoefficientPair::from_stacked(&g, model.n_xi())))
}

/// Phase-space point with cached log density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint<T: Real> {
    pub z: DVector<T>,
    pub momentum: DVector<T>,
    pub log_density: T,
    pub grad: DVector<T>,
}

impl<T: Real> PhasePoint<T> {
    /// `−log π(z) + ½‖p‖²`.
    pub fn hamiltonian(&self) -> T {
        -self.log_density + T::lit(0.5) * self.momentum.norm_squared()
    }
}

/// `n_steps` leapfrog steps of size `step`; `None` if the trajectory leaves
/// the finite region.
pub fn leapfrog<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    start: &PhasePoint<T>,
    step: T,
    n_steps: usize,
) -> Option<PhasePoint<T>> {
    let half = T::lit(0.5) * step;
    let mut z = start.z.clone();
    let mut p = start.momentum.clone();
    let mut grad = start.grad.clone();
    let mut logp = start.log_density;
    for _ in 0..n_steps {
        p.axpy(half, &grad, T::one());
        z.axpy(step, &p, T::one());
        let (l, g) = density.log_density_and_grad(&z);
        if !l.is_finite_value() || g.iter().any(|v| !v.is_finite_value()) {
            return None;
        }
        logp = l;
        grad = g;
        p.axpy(half, &grad, T::one());
    }
    Some(PhasePoint {
        z,
        momentum: p,
        log_density: logp,
        grad,
    })
}

/// Nesterov dual averaging of `log ε` towards a target acceptance rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    pub target: f64,
    pub mu: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    m: u64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            target,
            mu: (10.0 * initial_step).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            h_bar: 0.0,
            log_step: initial_step.ln(),
            log_step_bar: 0.0,
            m: 0,
        }
    }

    /// Feeds one acceptance probability; returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.m += 1;
        let m = self.m as f64;
        let eta = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_step = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let w = m.powf(-self.kappa);
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar;
        self.log_step.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size used after adaptation.
    pub fn adapted(&self) -> f64 {
        if self.m == 0 {
            self.current()
        } else {
            self.log_step_bar.exp()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub n_chains: usize,
    /// Adaptation iterations per chain, discarded.
    pub burn_in: usize,
    /// Retained draws per chain.
    pub n_samples: usize,
    pub target_accept: f64,
    /// Maximum leapfrog steps per iteration.
    pub leapfrog_steps: usize,
    /// Draw the step count uniformly from `1..=leapfrog_steps` each
    /// iteration. A fixed path length can resonate with the posterior's
    /// scale and leave some directions nearly frozen.
    pub jitter_steps: bool,
    /// Initial step size; refined by a doubling search when adapting.
    pub step_size: f64,
    pub adapt: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            burn_in: 20_000,
            n_samples: 10_000,
            target_accept: 0.7,
            leapfrog_steps: 32,
            jitter_steps: true,
            step_size: 0.1,
            adapt: true,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target_accept must lie in (0, 1)"));
        }
        if self.n_chains == 0 || self.n_samples == 0 || self.leapfrog_steps == 0 {
            return Err(Error::invalid("chain count, sample count and leapfrog steps must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Chain<T: Real> {
    pub chain_id: usize,
    pub seed: u64,
    pub states: Vec<DVector<T>>,
    pub accept_flags: Vec<bool>,
    pub adapted_step_size: f64,
    /// Step size after each adaptation iteration.
    pub adaptation_trace: Vec<f64>,
    /// Proposals abandoned because the trajectory became non-finite.
    pub n_divergent: usize,
}

impl<T: Real> Chain<T> {
    pub fn acceptance_rate(&self) -> f64 {
        if self.accept_flags.is_empty() {
            return 0.0;
        }
        self.accept_flags.iter().filter(|&&a| a).count() as f64 / self.accept_flags.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HmcRun<T: Real> {
    pub chains: Vec<Chain<T>>,
    /// Split-chain potential scale reduction per coordinate.
    pub r_hat: Vec<f64>,
}

impl<T: Real> HmcRun<T> {
    /// All retained draws, chain by chain.
    pub fn pooled(&self) -> Vec<DVector<T>> {
        self.chains.iter().flat_map(|c| c.states.iter().cloned()).collect()
    }
}

struct Transition<T: Real> {
    point: PhasePoint<T>,
    accept_prob: f64,
    accepted: bool,
    divergent: bool,
}

fn transition<T: Real, D: LogDensity<T> + ?Sized, R: Rng + ?Sized>(
    density: &D,
    z: &DVector<T>,
    logp: T,
    grad: &DVector<T>,
    step: T,
    n_steps: usize,
    rng: &mut R,
) -> Transition<T> {
    let start = PhasePoint {
        z: z.clone(),
        momentum: standard_normal_vector(rng, z.len()),
        log_density: logp,
        grad: grad.clone(),
    };
    let u: f64 = rng.random();
    let proposal = leapfrog(density, &start, step, n_steps);
    let (accept_prob, divergent) = match &proposal {
        Some(end) => {
            let log_ratio = (start.hamiltonian() - end.hamiltonian()).as_f64();
            let a = if log_ratio.is_nan() { 0.0 } else { log_ratio.exp().min(1.0) };
            (a, false)
        }
        None => (0.0, true),
    };
    match proposal {
        Some(end) if u < accept_prob => Transition {
            point: end,
            accept_prob,
            accepted: true,
            divergent,
        },
        _ => Transition {
            point: start,
            accept_prob,
            accepted: false,
            divergent,
        },
    }
}

/// Doubles or halves `step` until a single leapfrog step crosses 50% acceptance.
fn initial_step<T: Real, D: LogDensity<T> + ?Sized, R: Rng + ?Sized>(
    density: &D,
    z: &DVector<T>,
    logp: T,
    grad: &DVector<T>,
    step: f64,
    rng: &mut R,
) -> f64 {
    let start = PhasePoint {
        z: z.clone(),
        momentum: standard_normal_vector(rng, z.len()),
        log_density: logp,
        grad: grad.clone(),
    };
    let log_accept = |eps: f64| match leapfrog(density, &start, T::lit(eps), 1) {
        Some(end) => (start.hamiltonian() - end.hamiltonian()).as_f64(),
        None => f64::NEG_INFINITY,
    };
    let mut eps = step;
    let grow = log_accept(eps) > 0.5f64.ln();
    for _ in 0..100 {
        let a = log_accept(eps);
        if grow != (a > 0.5f64.ln()) {
            break;
        }
        eps = if grow { eps * 2.0 } else { eps * 0.5 };
    }
    eps
}

fn path_steps<R: Rng + ?Sized>(config: &HmcConfig, rng: &mut R) -> usize {
    if config.jitter_steps {
        rng.random_range(1..=config.leapfrog_steps)
    } else {
        config.leapfrog_steps
    }
}

fn run_chain<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    config: &HmcConfig,
    seed: u64,
    chain_id: usize,
    init: DVector<T>,
) -> Result<Chain<T>> {
    let mut rng = rng_for(seed, stream::HMC_CHAIN, chain_id as u64);
    let (mut logp, mut grad) = density.log_density_and_grad(&init);
    if !logp.is_finite_value() || grad.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("log density at the chain's initial point"));
    }
    let mut z = init;
    let mut step = config.step_size;
    let mut trace = Vec::with_capacity(config.burn_in);
    let mut n_divergent = 0;
    if config.adapt && config.burn_in > 0 {
        step = initial_step(density, &z, logp, &grad, step, &mut rng);
    }
    let mut adapt = DualAveraging::new(step, config.target_accept);
    for _ in 0..config.burn_in {
        let n_steps = path_steps(config, &mut rng);
        let t = transition(density, &z, logp, &grad, T::lit(step), n_steps, &mut rng);
        n_divergent += t.divergent as usize;
        z = t.point.z;
        logp = t.point.log_density;
        grad = t.point.grad;
        if config.adapt {
            step = adapt.update(t.accept_prob);
            trace.push(step);
        }
    }
    if config.adapt && config.burn_in > 0 {
        step = adapt.adapted();
    }
    let mut states = Vec::with_capacity(config.n_samples);
    let mut flags = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let n_steps = path_steps(config, &mut rng);
        let t = transition(density, &z, logp, &grad, T::lit(step), n_steps, &mut rng);
        n_divergent += t.divergent as usize;
        flags.push(t.accepted);
        z = t.point.z;
        logp = t.point.log_density;
        grad = t.point.grad;
        states.push(z.clone());
    }
    Ok(Chain {
        chain_id,
        seed: derive_seed(seed, stream::HMC_CHAIN, chain_id as u64),
        states,
        accept_flags: flags,
        adapted_step_size: step,
        adaptation_trace: trace,
        n_divergent,
    })
}

/// Runs `config.n_chains` independent chains from standard-normal draws.
pub fn run_hmc_density<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    config: &HmcConfig,
    seed: u64,
) -> Result<HmcRun<T>> {
    config.validate()?;
    let chains: Vec<Chain<T>> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            // Initial points come from a stream separate from the transitions.
            let mut rng = rng_for(derive_seed(seed, stream::HMC_CHAIN, u64::MAX), stream::HMC_CHAIN, c as u64);
            let init = standard_normal_vector(&mut rng, density.dim());
            run_chain(density, config, seed, c, init)
        })
        .collect::<Result<_>>()?;
    let r_hat = (0..density.dim())
        .map(|k| {
            let series: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.states.iter().map(|s| s[k].as_f64()).collect())
                .collect();
            split_r_hat(&series)
        })
        .collect::<Vec<_>>();
    if let Some(worst) = r_hat.iter().cloned().filter(|v| v.is_finite()).reduce(f64::max) {
        if worst > 1.05 {
            log::warn!("split R-hat {worst:.3} exceeds 1.05; chains may not have mixed");
        }
    }
    Ok(HmcRun { chains, r_hat })
}

/// HMC targeting the coefficient posterior `exp(−L/γ)`.
pub fn run_hmc<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    config: &HmcConfig,
    seed: u64,
) -> Result<HmcRun<T>> {
    params.validate()?;
    let density = PosteriorDensity {
        model,
        params: *params,
    };
    run_hmc_density(&density, config, seed)
}

/// Split-chain potential scale reduction; `NaN` for chains shorter than 4.
pub fn split_r_hat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[c.len() - n..]])
        .collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
}
