//! Finite-volume residual and forward solver against independent dense
//! assemblies, finite differences and structural properties.

mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rpickle::darcy::{assemble_residual, face_transmissivity, residual_jacobians, solve_forward, system_matrix};
use rpickle::mesh::{build_structured_mesh, BcKind, BoundaryConditions, Mesh, SideKinds, SideValues};

use common::dense_tpfa;

fn mixed_sides() -> SideKinds {
    SideKinds {
        west: BcKind::Dirichlet,
        east: BcKind::Dirichlet,
        south: BcKind::Neumann,
        north: BcKind::Neumann,
    }
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn values(w: f64, e: f64, s: f64, n: f64) -> SideValues<f64> {
    SideValues {
        west: w,
        east: e,
        south: s,
        north: n,
    }
}

#[test]
fn manufactured_residual_matches_dense_assembly() {
    let (nx, ny) = (16, 16);
    let mesh = build_structured_mesh(nx, ny, 1.0, 1.0, mixed_sides()).unwrap();
    let bc = BoundaryConditions::from_side_values(&mesh, &values(0.3, -0.2, 0.1, -0.4));
    let pi = std::f64::consts::PI;
    let u = DVector::from_fn(mesh.n_cells(), |i, _| {
        let [x, y] = mesh.cell_centers[i];
        (pi * x).sin() * (pi * y).sin()
    });
    let y = DVector::from_fn(mesh.n_cells(), |i, _| mesh.cell_centers[i][0] + mesh.cell_centers[i][1]);
    let r = assemble_residual(&mesh, &y, &u, &bc).unwrap();
    let (k, b) = dense_tpfa(&mesh, nx, ny, 1.0, 1.0, &y, &bc);
    let oracle = b - k * &u;
    assert!((r.norm() - oracle.norm()).abs() <= 1e-12 * oracle.norm());
    assert!((&r - &oracle).amax() <= 1e-12 * oracle.amax());
}

fn finite_difference_columns(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> nalgebra::DMatrix<f64> {
    let n = x.len();
    let cols: Vec<DVector<f64>> = (0..n)
        .map(|k| {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect();
    nalgebra::DMatrix::from_columns(&cols)
}

#[test]
fn jacobians_match_central_differences_on_random_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let sides = SideKinds {
        north: BcKind::Dirichlet,
        ..mixed_sides()
    };
    let mesh = build_structured_mesh(5, 5, 1.3, 0.8, sides).unwrap();
    let bc = BoundaryConditions::from_side_values(&mesh, &values(1.0, -0.5, 0.2, 0.7));
    let y = normal_vector(&mut rng, 25) * 0.7;
    let u = normal_vector(&mut rng, 25);
    let (dy, du) = residual_jacobians(&mesh, &y, &u, &bc).unwrap();
    let fd_y = finite_difference_columns(|v| assemble_residual(&mesh, v, &u, &bc).unwrap(), &y);
    let fd_u = finite_difference_columns(|v| assemble_residual(&mesh, &y, v, &bc).unwrap(), &u);
    let rel = |a: nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>| (a - b).norm() / b.norm();
    assert!(rel(dy.to_dense(), &fd_y) < 1e-6, "dR/dy error {}", rel(dy.to_dense(), &fd_y));
    assert!(rel(du.to_dense(), &fd_u) < 1e-6, "dR/du error {}", rel(du.to_dense(), &fd_u));
}

#[test]
fn linear_profile_in_strip() {
    let mesh = build_structured_mesh(10, 1, 1.0, 0.2, mixed_sides()).unwrap();
    let bc = BoundaryConditions::from_side_values(&mesh, &values(1.0, 0.0, 0.0, 0.0));
    let u = solve_forward(&mesh, &DVector::from_element(10, -0.4), &bc).unwrap();
    for (c, v) in mesh.cell_centers.iter().zip(u.iter()) {
        assert!((v - (1.0 - c[0])).abs() < 1e-12);
    }
}

fn small_mesh() -> impl Strategy<Value = (Mesh<f64>, SideKinds)> {
    let kind = prop_oneof![Just(BcKind::Dirichlet), Just(BcKind::Neumann)];
    (2usize..7, 2usize..7, 0.5f64..2.0, 0.5f64..2.0, kind.clone(), kind.clone(), kind.clone())
        .prop_map(|(nx, ny, lx, ly, s, n, e)| {
            let sides = SideKinds {
                west: BcKind::Dirichlet,
                east: e,
                south: s,
                north: n,
            };
            (build_structured_mesh(nx, ny, lx, ly, sides).unwrap(), sides)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_counts(nx in 1usize..12, ny in 1usize..12, lx in 0.1f64..5.0, ly in 0.1f64..5.0) {
        prop_assume!(nx * ny >= 2);
        let mesh = build_structured_mesh::<f64>(nx, ny, lx, ly, SideKinds::default()).unwrap();
        prop_assert_eq!(mesh.n_cells(), nx * ny);
        prop_assert_eq!(mesh.interior_faces.len(), nx * (ny - 1) + ny * (nx - 1));
        prop_assert_eq!(mesh.boundary_faces.len(), 2 * (nx + ny));
        let area: f64 = mesh.cell_areas.iter().sum();
        prop_assert!((area - lx * ly).abs() < 1e-12 * lx * ly);
    }

    #[test]
    fn harmonic_mean_is_symmetric_and_bounded(a in -6.0f64..6.0, b in -6.0f64..6.0) {
        let t = face_transmissivity(a, b);
        prop_assert_eq!(t, face_transmissivity(b, a));
        let (lo, hi) = (a.min(b).exp(), a.max(b).exp());
        prop_assert!(t >= lo * (1.0 - 1e-14) && t <= hi * (1.0 + 1e-14));
    }

    #[test]
    fn forward_solution_zeroes_the_residual((mesh, _) in small_mesh(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = mesh.n_cells();
        let y = normal_vector(&mut rng, n);
        let bc = BoundaryConditions::from_side_values(&mesh, &values(1.0, -1.0, 0.3, -0.2));
        let u = solve_forward(&mesh, &y, &bc).unwrap();
        let r = assemble_residual(&mesh, &y, &u, &bc).unwrap();
        let scale = system_matrix(&mesh, &y).to_dense().amax() * u.amax().max(1.0);
        prop_assert!(r.amax() <= 1e-10 * scale, "residual {} at scale {}", r.amax(), scale);
    }

    #[test]
    fn residual_is_affine_in_head((mesh, _) in small_mesh(), seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = mesh.n_cells();
        let y = normal_vector(&mut rng, n);
        let (u1, u2) = (normal_vector(&mut rng, n), normal_vector(&mut rng, n));
        let bc = BoundaryConditions::from_side_values(&mesh, &values(0.5, 1.5, -0.3, 0.8));
        let r = |u: &DVector<f64>| assemble_residual(&mesh, &y, u, &bc).unwrap();
        let lhs = r(&(&u1 * a + &u2 * b));
        let rhs = r(&u1) * a + r(&u2) * b + r(&DVector::zeros(n)) * (1.0 - a - b);
        prop_assert!((&lhs - &rhs).amax() <= 1e-10 * (1.0 + rhs.amax()));
    }

    #[test]
    fn constant_shift_scales_head_jacobian((mesh, _) in small_mesh(), seed in any::<u64>(), c in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = normal_vector(&mut rng, mesh.n_cells());
        let base = system_matrix(&mesh, &y).to_dense();
        let shifted = system_matrix(&mesh, &y.add_scalar(c)).to_dense();
        prop_assert!((shifted - base.clone() * c.exp()).amax() <= 1e-12 * base.amax() * c.exp());
    }
}
