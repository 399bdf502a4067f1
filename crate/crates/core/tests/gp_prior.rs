//! Kernel, hyperparameter recovery, conditioning and CKLE bases checked
//! against direct evaluation and Monte Carlo oracles.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rpickle::gp::{
    fit_hyperparameters, gpr_condition, kernel_matrix, matern52_distance, mc_pushforward, truncated_eig, BasisProvenance,
    CkleBasis, HyperBounds, KernelParams, Observations, Truncation,
};
use rpickle::linalg::rel_frobenius;
use rpickle::mesh::{build_structured_mesh, SideKinds};

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Lower Cholesky factor of `K + jitter·I`, for drawing exact GP samples.
fn sampling_factor(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    (k + DMatrix::identity(n, n) * 1e-10).cholesky().expect("kernel matrix factor").l()
}

fn grid_basis(n_terms: usize) -> (CkleBasis<f64>, DMatrix<f64>) {
    let mesh = build_structured_mesh::<f64>(8, 8, 1.0, 1.0, SideKinds::default()).unwrap();
    let cov = kernel_matrix(&mesh.cell_centers, &mesh.cell_centers, &KernelParams::new(1.0, 0.3));
    let mean = DVector::from_fn(64, |i, _| 0.1 * i as f64);
    let basis = CkleBasis::from_covariance(mean, &cov, Truncation::Terms(n_terms), BasisProvenance::default()).unwrap();
    (basis, cov)
}

#[test]
fn unit_kernel_at_unit_distance() {
    let s5 = 5f64.sqrt();
    let by_hand = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
    let v = matern52_distance(1.0, &KernelParams::new(1.0, 1.0));
    assert!((v - by_hand).abs() < 1e-15);
    assert!((v - 0.5240).abs() < 5e-5);
}

#[test]
fn length_scale_recovered_from_synthetic_draws() {
    let truth = KernelParams::new(1.0, 0.3);
    let mut estimates = Vec::new();
    for rep in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
        let points: Vec<[f64; 2]> = (0..200).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let l = sampling_factor(&kernel_matrix(&points, &points, &truth));
        let values = l * normal_vector(&mut rng, 200);
        let obs = Observations {
            locations: points.clone(),
            values: values.iter().copied().collect(),
            cell_indices: (0..200).collect(),
        };
        let fit = fit_hyperparameters(&obs, &HyperBounds::for_points(&points)).unwrap();
        estimates.push(fit.params.length_scale);
    }
    estimates.sort_by(f64::total_cmp);
    let median = 0.5 * (estimates[9] + estimates[10]);
    assert!((median - 0.3).abs() <= 0.3 * 0.3, "median length scale {median}");
}

#[test]
fn two_observations_match_hand_solution() {
    let params = KernelParams {
        nugget: 0.0,
        ..KernelParams::new(1.2, 0.5)
    };
    let (a, b, t) = ([0.0, 0.0], [0.4, 0.0], [0.1, 0.3]);
    let obs = Observations {
        locations: vec![a, b],
        values: vec![0.7, -0.3],
        cell_indices: vec![0, 1],
    };
    let gp = gpr_condition(&params, &obs, &[t]).unwrap();
    let k = |p: [f64; 2], q: [f64; 2]| matern52_distance(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(), &params);
    // Cramer's rule on the 2×2 system.
    let (kaa, kab, kbb) = (k(a, a), k(a, b), k(b, b));
    let det = kaa * kbb - kab * kab;
    let wa = (kbb * k(t, a) - kab * k(t, b)) / det;
    let wb = (kaa * k(t, b) - kab * k(t, a)) / det;
    let mean = wa * 0.7 + wb * -0.3;
    let var = k(t, t) - wa * k(t, a) - wb * k(t, b);
    assert!((gp.mean[0] - mean).abs() < 1e-12);
    assert!((gp.covariance[(0, 0)] - var).abs() < 1e-12);
}

#[test]
fn empirical_covariance_leading_eigenvalue() {
    let mesh = build_structured_mesh::<f64>(8, 8, 1.0, 1.0, SideKinds::default()).unwrap();
    let k = kernel_matrix(&mesh.cell_centers, &mesh.cell_centers, &KernelParams::new(1.0, 0.3));
    let l = sampling_factor(&k);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = DMatrix::from_columns(&(0..5000).map(|_| &l * normal_vector(&mut rng, 64)).collect::<Vec<_>>());
    let mean = draws.column_mean();
    let centered = DMatrix::from_fn(64, 5000, |i, j| draws[(i, j)] - mean[i]);
    let empirical = &centered * centered.transpose() / 4999.0;
    let exact = truncated_eig(&k, Truncation::Terms(1)).unwrap().eigenvalues[0];
    let sampled = truncated_eig(&empirical, Truncation::Terms(1)).unwrap().eigenvalues[0];
    assert!((sampled - exact).abs() <= 0.05 * exact, "{sampled} vs {exact}");
}

#[test]
fn expansion_variance_matches_monte_carlo() {
    let (basis, _) = grid_basis(12);
    let exact = basis.pointwise_variance();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let mut sum = DVector::zeros(64);
    let mut sq = DVector::zeros(64);
    for _ in 0..n {
        let f = basis.eval(&normal_vector(&mut rng, 12)).unwrap() - basis.mean();
        sum += &f;
        sq += f.component_mul(&f);
    }
    let nf = n as f64;
    for i in 0..64 {
        let m = sum[i] / nf;
        let var = (sq[i] - nf * m * m) / (nf - 1.0);
        let by_modes: f64 = (0..12).map(|k| basis.eigenvalues()[k] * basis.eigenvectors()[(i, k)].powi(2)).sum();
        assert!((exact[i] - by_modes).abs() < 1e-12);
        assert!((var - exact[i]).abs() <= 0.03 * exact[i], "cell {i}: {var} vs {}", exact[i]);
    }
}

#[test]
fn linear_pushforward_covariance() {
    let (basis, _) = grid_basis(10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = DMatrix::from_fn(6, 64, |_, _| rng.sample::<f64, _>(StandardNormal)) / 8.0;
    let offset = normal_vector(&mut rng, 6);
    let prior = mc_pushforward(&basis, 5000, 9, |y| Ok(&m * y + &offset)).unwrap();
    let exact = &m * basis.covariance() * m.transpose();
    let err = rel_frobenius(&prior.covariance, &exact);
    assert!(err <= 0.10, "relative error {err}");
    assert_eq!(prior.n_failed, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conditioning_never_raises_variance(
        cells in proptest::sample::subsequence((0..36usize).collect::<Vec<_>>(), 1..12),
        sigma in 0.3f64..2.0,
        length in 0.1f64..1.0,
        seed in any::<u64>(),
    ) {
        let mesh = build_structured_mesh::<f64>(6, 6, 1.0, 1.0, SideKinds::default()).unwrap();
        let params = KernelParams::new(sigma, length);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = normal_vector(&mut rng, 36);
        let obs = Observations::from_cells(&mesh, &cells, &field).unwrap();
        let gp = gpr_condition(&params, &obs, &mesh.cell_centers).unwrap();
        let prior = sigma * sigma;
        for i in 0..36 {
            prop_assert!(gp.covariance[(i, i)] <= prior * (1.0 + 1e-12));
        }
        for &c in &cells {
            prop_assert!((gp.mean[c] - field[c]).abs() <= 1e-4 * (1.0 + field.amax()));
        }
    }

    #[test]
    fn full_expansion_reconstructs_covariance(length in 0.05f64..1.5, sigma in 0.2f64..3.0) {
        let mesh = build_structured_mesh::<f64>(5, 5, 1.0, 1.0, SideKinds::default()).unwrap();
        let cov = kernel_matrix(&mesh.cell_centers, &mesh.cell_centers, &KernelParams::new(sigma, length));
        let eig = truncated_eig(&cov, Truncation::Terms(25)).unwrap();
        let v = &eig.eigenvectors;
        prop_assert!((v.transpose() * v - DMatrix::identity(25, 25)).amax() <= 1e-10);
        let recon = v * DMatrix::from_diagonal(&eig.eigenvalues) * v.transpose();
        prop_assert!(rel_frobenius(&recon, &cov) <= 1e-8);
    }

    #[test]
    fn expansion_is_affine_in_coefficients(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (basis, _) = grid_basis(7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (normal_vector(&mut rng, 7), normal_vector(&mut rng, 7));
        let centered = |c: &DVector<f64>| basis.eval(c).unwrap() - basis.mean();
        let lhs = centered(&(&x * a + &y * b));
        let rhs = centered(&x) * a + centered(&y) * b;
        prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + a.abs() + b.abs()) * basis.modes().amax() * 10.0);
    }
}
