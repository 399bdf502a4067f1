//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rpickle::gp::{kernel_matrix, BasisProvenance, CkleBasis, KernelParams, Truncation};
use rpickle::mesh::{build_structured_mesh, BcKind, BoundaryConditions, Mesh, Side, SideKinds, SideValues};
use rpickle::model::DarcyResidualModel;
use rpickle::pipeline::{DarcyContext, Pipeline, RunConfig, Stage};
use serde_json::{json, Value};

/// Seed fixed for the designed Darcy case before any result was inspected.
pub const DESIGNED_SEED: u64 = 20240601;

/// 8×8 unit square, head 10 on the west side and 0 on the east side, no-flow
/// north and south. Ten sweeps of local averaging smooth the reference field.
pub fn designed_config(truncation: Value) -> Value {
    json!({
        "seed": DESIGNED_SEED,
        "problem": "darcy",
        "mesh": {
            "nx": 8, "ny": 8, "lx": 1.0, "ly": 1.0,
            "sides": {"west": "dirichlet", "east": "dirichlet", "south": "neumann", "north": "neumann"},
            "bc_values": {"west": 10.0, "east": 0.0, "south": 0.0, "north": 0.0}
        },
        "reference": {"sigma": 1.0, "length_scale": 0.3, "mean": 0.0},
        "kernel": {"fit": true},
        "truncation": truncation,
        "observations": {"n_y_obs": 12, "n_u_obs": 12},
        "smoothing_iterations": 10,
        "n_mc": 2000,
        "sigma_r_sq_grid": [1e-2],
        "sampler": "rpickle",
        "rpickle": {"n_ens": 1000}
    })
}

pub fn config(value: Value) -> RunConfig {
    RunConfig::from_json(&value.to_string()).expect("valid test config")
}

pub fn pipeline(value: Value, out: &Path, threads: Option<usize>) -> Pipeline {
    Pipeline::new(config(value), Some(out.to_path_buf()), None, threads).expect("pipeline")
}

/// Runs generate and build-prior and loads the resulting model.
pub fn build_darcy(value: Value, out: &Path) -> DarcyContext {
    let p = pipeline(value, out, None);
    p.run(Stage::Generate).expect("generate");
    p.run(Stage::BuildPrior).expect("build-prior");
    p.load_darcy().expect("load")
}

/// Darcy model on an `n × n` unit square with Matérn bases: `y` centered at
/// 0, `u` centered on the linear profile between heads 1 (west) and 0
/// (east). No data are involved, so the residual is genuinely nonlinear.
pub fn kernel_darcy(n: usize, n_xi: usize, n_eta: usize) -> DarcyResidualModel<f64> {
    let sides = SideKinds {
        west: BcKind::Dirichlet,
        east: BcKind::Dirichlet,
        south: BcKind::Neumann,
        north: BcKind::Neumann,
    };
    let mesh = build_structured_mesh(n, n, 1.0, 1.0, sides).expect("mesh");
    let bc = BoundaryConditions::from_side_values(
        &mesh,
        &SideValues {
            west: 1.0,
            east: 0.0,
            south: 0.0,
            north: 0.0,
        },
    );
    let cov = kernel_matrix(&mesh.cell_centers, &mesh.cell_centers, &KernelParams::new(0.5, 0.4));
    let cells = mesh.n_cells();
    let y_basis = CkleBasis::from_covariance(DVector::zeros(cells), &cov, Truncation::Terms(n_xi), BasisProvenance::default())
        .expect("y basis");
    let profile = DVector::from_fn(cells, |i, _| 1.0 - mesh.cell_centers[i][0]);
    let u_cov = &cov * 0.1;
    let u_basis = CkleBasis::from_covariance(profile, &u_cov, Truncation::Terms(n_eta), BasisProvenance::default())
        .expect("u basis");
    DarcyResidualModel::new(mesh, y_basis, u_basis, bc).expect("model")
}

/// Dense TPFA system assembled from cell geometry alone, independent of the
/// face lists the solver uses. Returns `(K, b)` with `K u = b`.
pub fn dense_tpfa(
    mesh: &Mesh<f64>,
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    y: &DVector<f64>,
    bc: &BoundaryConditions<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = nx * ny;
    let (dx, dy) = (lx / nx as f64, ly / ny as f64);
    // Locate cells by their centers rather than by an assumed ordering.
    let mut at = vec![usize::MAX; n];
    for (k, c) in mesh.cell_centers.iter().enumerate() {
        let i = (c[0] / dx).floor() as usize;
        let j = (c[1] / dy).floor() as usize;
        at[i + nx * j] = k;
    }
    let cell = |i: usize, j: usize| at[i + nx * j];
    let harmonic = |a: f64, b: f64| 2.0 / ((-a).exp() + (-b).exp());
    let mut k = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    let mut couple = |p: usize, q: usize, t: f64| {
        k[(p, p)] += t;
        k[(q, q)] += t;
        k[(p, q)] -= t;
        k[(q, p)] -= t;
    };
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                let (p, q) = (cell(i, j), cell(i + 1, j));
                couple(p, q, dy / dx * harmonic(y[p], y[q]));
            }
            if j + 1 < ny {
                let (p, q) = (cell(i, j), cell(i, j + 1));
                couple(p, q, dx / dy * harmonic(y[p], y[q]));
            }
        }
    }
    // Boundary faces: Dirichlet couples to the face value over half a cell.
    let mut d = 0;
    let mut nf = 0;
    for f in &mesh.boundary_faces {
        let p = f.cell;
        let (len, half) = if matches!(f.side, Side::West | Side::East) { (dy, dx / 2.0) } else { (dx, dy / 2.0) };
        match f.kind {
            BcKind::Dirichlet => {
                let t = len / half * y[p].exp();
                k[(p, p)] += t;
                b[p] += t * bc.dirichlet_values[d];
                d += 1;
            }
            BcKind::Neumann => {
                b[p] += len * bc.neumann_fluxes[nf];
                nf += 1;
            }
        }
    }
    (k, b)
}
