//! HMC against known Gaussian targets and the closed-form linear posterior.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpickle::diagnostics::{linear_oracle, sample_covariance};
use rpickle::hmc::{run_hmc, run_hmc_density, HmcConfig, HmcRun, LogDensity};
use rpickle::linalg::rel_frobenius;
use rpickle::model::LinearModel;
use rpickle::pickle::LossParams;

use common::kernel_darcy;

/// Zero-mean Gaussian with the given precision.
struct Gaussian {
    precision: DMatrix<f64>,
}

impl LogDensity<f64> for Gaussian {
    fn dim(&self) -> usize {
        self.precision.nrows()
    }

    fn log_density_and_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let g = -(&self.precision * z);
        (0.5 * z.dot(&g), g)
    }
}

/// Standard error of the chain means from non-overlapping batch means.
fn batch_standard_error(run: &HmcRun<f64>, f: impl Fn(&DVector<f64>) -> f64) -> (f64, f64) {
    let mut batch_means = Vec::new();
    let mut all = Vec::new();
    for c in &run.chains {
        let values: Vec<f64> = c.states.iter().map(&f).collect();
        let size = values.len() / 25;
        for b in values.chunks_exact(size) {
            batch_means.push(b.iter().sum::<f64>() / size as f64);
        }
        all.extend(values);
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let k = batch_means.len() as f64;
    let var = batch_means.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[test]
fn standard_gaussian_posterior() {
    let zero = LinearModel::new(DMatrix::zeros(6, 3), DMatrix::zeros(6, 2), DVector::zeros(6)).unwrap();
    let config = HmcConfig {
        n_chains: 4,
        burn_in: 1000,
        n_samples: 2500,
        ..HmcConfig::default()
    };
    let run: HmcRun<f64> = run_hmc(&zero, &LossParams::new(1e6), &config, 60).unwrap();
    let samples: Vec<DVector<f64>> = run.pooled();
    assert_eq!(samples.len(), 10_000);
    let (mean, cov) = sample_covariance(&samples);
    for k in 0..5 {
        assert!(mean[k].abs() < 0.05, "mean {}", mean[k]);
        let sd = cov[(k, k)].sqrt();
        assert!((0.95..=1.05).contains(&sd), "std {sd}");
    }
    for c in &run.chains {
        let rate = c.acceptance_rate();
        assert!((0.6..=0.8).contains(&rate), "acceptance {rate}");
    }
}

#[test]
fn correlated_gaussian_covariance() {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.5]);
    let target = Gaussian {
        precision: cov.clone().try_inverse().unwrap(),
    };
    let config = HmcConfig {
        n_chains: 4,
        burn_in: 2000,
        n_samples: 12_500,
        ..HmcConfig::default()
    };
    let run = run_hmc_density(&target, &config, 61).unwrap();
    let (_, empirical) = sample_covariance(&run.pooled());
    let err = rel_frobenius(&empirical, &cov);
    assert!(err < 0.05, "relative error {err}");
}

#[test]
fn linear_posterior_moments_within_monte_carlo_error() {
    let lm = LinearModel::random(&mut ChaCha8Rng::seed_from_u64(62), 30, 5, 4);
    let params = LossParams::new(0.5);
    let (mu, sigma) = linear_oracle(&lm, &params).unwrap();
    let config = HmcConfig {
        n_chains: 4,
        burn_in: 2000,
        n_samples: 5000,
        ..HmcConfig::default()
    };
    let run = run_hmc(&lm, &params, &config, 62).unwrap();
    for k in 0..9 {
        let (m, se) = batch_standard_error(&run, |s| s[k]);
        assert!((m - mu[k]).abs() <= 3.0 * se, "coordinate {k}: mean {m} vs {} (se {se})", mu[k]);
        let (v, se_v) = batch_standard_error(&run, |s| (s[k] - mu[k]).powi(2));
        let var = sigma[(k, k)];
        assert!((v - var).abs() <= 3.0 * se_v, "coordinate {k}: variance {v} vs {var} (se {se_v})");
    }
}

#[test]
fn fixed_seed_gives_identical_chains() {
    let model = kernel_darcy(5, 3, 3);
    let params = LossParams::new(0.05);
    let config = HmcConfig {
        n_chains: 2,
        burn_in: 100,
        n_samples: 100,
        ..HmcConfig::default()
    };
    let a = run_hmc(&model, &params, &config, 63).unwrap();
    assert_eq!(a, run_hmc(&model, &params, &config, 63).unwrap());
    assert_ne!(a.chains[0].states, run_hmc(&model, &params, &config, 64).unwrap().chains[0].states);
}

#[test]
fn adapted_step_shrinks_with_residual_variance() {
    let model = kernel_darcy(6, 4, 4);
    let config = HmcConfig {
        n_chains: 2,
        burn_in: 1000,
        n_samples: 10,
        ..HmcConfig::default()
    };
    let steps: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&s| {
            let run = run_hmc(&model, &LossParams::new(s), &config, 65).unwrap();
            run.chains.iter().map(|c| c.adapted_step_size).sum::<f64>() / 2.0
        })
        .collect();
    assert!(steps[1] < steps[0] && steps[2] < steps[1], "{steps:?}");
}
