//! Scoring, convergence curves, Laplace conditioning and the closed-form
//! linear posterior.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rpickle::diagnostics::{
    convergence_ratios, coverage, gaussian_z, laplace_posterior, linear_oracle, lpp, posterior_moments, sample_covariance,
};
use rpickle::gp::{kernel_matrix, BasisProvenance, CkleBasis, KernelParams, Truncation};
use rpickle::hmc::{run_hmc, HmcConfig};
use rpickle::linalg::rel_frobenius;
use rpickle::mesh::{build_structured_mesh, SideKinds};
use rpickle::model::LinearModel;
use rpickle::optim::OptimConfig;
use rpickle::pickle::{map_optimize, CoefficientPair, LossParams};
use rpickle::rpickle::{run_ensemble, RpickleConfig};
use statrs::distribution::{Continuous, Normal};

use common::kernel_darcy;

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn lpp_equals_sum_of_gaussian_log_densities() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mean = normal_vector(&mut rng, 50);
    let std = normal_vector(&mut rng, 50).map(|v| 0.1 + v.abs());
    let reference = normal_vector(&mut rng, 50);
    let by_density: f64 = (0..50).map(|i| Normal::new(mean[i], std[i]).unwrap().ln_pdf(reference[i])).sum();
    let v = lpp(&mean, &std, &reference, None).unwrap();
    assert!((v - by_density).abs() <= 1e-12 * by_density.abs());
    let cells = [3usize, 17, 40];
    let subset: f64 = cells.iter().map(|&i| Normal::new(mean[i], std[i]).unwrap().ln_pdf(reference[i])).sum();
    assert!((lpp(&mean, &std, &reference, Some(&cells)).unwrap() - subset).abs() <= 1e-12 * subset.abs());
}

#[test]
fn coverage_is_calibrated_for_gaussian_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let n = 10_000;
    let mean = normal_vector(&mut rng, n);
    let std = normal_vector(&mut rng, n).map(|v| 0.2 + v.abs());
    let truth = DVector::from_fn(n, |i, _| mean[i] + std[i] * rng.sample::<f64, _>(StandardNormal));
    for level in [0.5, 0.9, 0.95] {
        let c = coverage(&mean, &std, &truth, level).unwrap();
        let se = (level * (1.0 - level) / n as f64).sqrt();
        assert!((c - level).abs() <= 3.0 * se, "level {level}: coverage {c}");
    }
    assert!((gaussian_z(0.95).unwrap() - 1.959964).abs() < 1e-6);
}

#[test]
fn std_ratio_settles_for_iid_series() {
    let n = 10_000;
    let good = (0..100u64)
        .filter(|&rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(7200 + rep);
            let series: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let curve = convergence_ratios(&series, n).unwrap();
            let std = curve.std_ratio.expect("nonzero spread");
            std[4999..].iter().all(|r| (0.97..=1.03).contains(r))
        })
        .count();
    assert!(good >= 95, "{good} of 100 repetitions settled");
}

#[test]
fn convergence_self_reference_and_constant_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let series: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
    let curve = convergence_ratios(&series, 300).unwrap();
    assert_eq!(curve.mean_ratio.unwrap()[299], 1.0);
    assert_eq!(curve.std_ratio.unwrap()[299], 1.0);
    let flat = convergence_ratios(&[2.5; 40], 40).unwrap();
    assert!(flat.mean_ratio.unwrap().iter().all(|&r| r == 1.0));
    assert!(flat.std_ratio.unwrap().iter().all(|&r| r == 1.0));
}

#[test]
fn prior_ensemble_variance_matches_expansion() {
    let mesh = build_structured_mesh::<f64>(6, 6, 1.0, 1.0, SideKinds::default()).unwrap();
    let cov = kernel_matrix(&mesh.cell_centers, &mesh.cell_centers, &KernelParams::new(0.8, 0.3));
    let basis = CkleBasis::from_covariance(DVector::zeros(36), &cov, Truncation::Terms(10), BasisProvenance::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let draws: Vec<DVector<f64>> = (0..100_000).map(|_| normal_vector(&mut rng, 10)).collect();
    let (_, std) = posterior_moments(&draws, &basis).unwrap();
    let exact = basis.pointwise_variance();
    for i in 0..36 {
        assert!((std[i] * std[i] - exact[i]).abs() <= 0.03 * exact[i], "cell {i}: {} vs {}", std[i] * std[i], exact[i]);
    }
}

#[test]
fn conjugate_identity_cases() {
    let params = LossParams::new(1.0);
    let zero_data = LinearModel::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 0), DVector::zeros(3)).unwrap();
    let (mu, sigma) = linear_oracle(&zero_data, &params).unwrap();
    assert!(mu.amax() < 1e-15);
    assert!((sigma - DMatrix::identity(3, 3) * 0.5).amax() < 1e-15);
    let c0 = DVector::from_vec(vec![1.0, -4.0, 0.5]);
    let data = LinearModel::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 0), c0.clone()).unwrap();
    let (mu, _) = linear_oracle(&data, &params).unwrap();
    assert!((mu - c0 / 2.0).amax() < 1e-15);
}

#[test]
fn oracle_covariance_is_symmetric_positive_definite_and_laplace_exact() {
    for seed in 0..5u64 {
        let lm = LinearModel::random(&mut ChaCha8Rng::seed_from_u64(75 + seed), 30, 5, 4);
        let params = LossParams::new(0.3);
        let (_, sigma) = linear_oracle(&lm, &params).unwrap();
        assert!((&sigma - sigma.transpose()).amax() <= 1e-10);
        assert!(sigma.clone().symmetric_eigen().eigenvalues.min() > 0.0);
        let map = map_optimize(&lm, &params, &CoefficientPair::zeros(5, 4), &OptimConfig::default()).unwrap();
        let lap = laplace_posterior(&lm, &params, &map.z).unwrap();
        assert!((lap.covariance - &sigma).amax() <= 1e-8 * sigma.amax());
    }
}

#[test]
fn condition_number_never_falls_as_residual_variance_shrinks() {
    let model = kernel_darcy(6, 5, 5);
    let grid = [1.0, 1e-1, 3e-2, 1e-2, 1e-3, 1e-4];
    let conds: Vec<f64> = grid
        .iter()
        .map(|&s| {
            let params = LossParams::new(s);
            let map = map_optimize(&model, &params, &CoefficientPair::zeros(5, 5), &OptimConfig::default()).unwrap();
            laplace_posterior(&model, &params, &map.z).unwrap().condition_number
        })
        .collect();
    assert!(conds.windows(2).all(|w| w[1] >= w[0]), "{conds:?}");
}

/// rPICKLE, HMC and the closed form agree on one linear instance.
#[test]
fn linear_sampler_triangle() {
    let lm = LinearModel::random(&mut ChaCha8Rng::seed_from_u64(76), 30, 5, 4);
    let params = LossParams::new(0.5);
    let (mu, sigma) = linear_oracle(&lm, &params).unwrap();
    let rp = run_ensemble(
        &lm,
        &params,
        &RpickleConfig {
            n_ens: 20_000,
            seed: 76,
            metropolize: Some(false),
            ..RpickleConfig::default()
        },
    )
    .unwrap()
    .usable_stacked();
    let hmc = run_hmc(
        &lm,
        &params,
        &HmcConfig {
            n_chains: 4,
            burn_in: 2000,
            n_samples: 5000,
            ..HmcConfig::default()
        },
        76,
    )
    .unwrap()
    .pooled();
    let (m_rp, c_rp): (DVector<f64>, DMatrix<f64>) = sample_covariance(&rp);
    let (m_hmc, c_hmc): (DVector<f64>, DMatrix<f64>) = sample_covariance(&hmc);
    for k in 0..9 {
        let sd: f64 = sigma[(k, k)].sqrt();
        // Independent draws for rPICKLE; HMC gets a looser bound for autocorrelation.
        assert!((m_rp[k] - mu[k]).abs() <= 3.0 * sd / (rp.len() as f64).sqrt(), "rPICKLE coordinate {k}");
        assert!((m_hmc[k] - mu[k]).abs() <= 0.05 * sd, "HMC coordinate {k}");
    }
    assert!(rel_frobenius(&c_rp, &sigma) < 0.05);
    assert!(rel_frobenius(&c_hmc, &sigma) < 0.05);
}
