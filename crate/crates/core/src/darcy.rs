//! Two-point flux approximation of steady Darcy flow, `∇·(e^y ∇u) = 0`.
//!
//! The residual of cell `i` is the net inflow through its faces:
//!
//! ```text
//! R_i = Σ_faces g_f H(y_i, y_j) (u_j − u_i)
//!     + Σ_dirichlet g_b e^{y_i} (u_D − u_i)
//!     + Σ_neumann |f| q_N
//! ```
//!
//! where `g` is the geometric transmissibility and `H` the harmonic mean of
//! the two cell transmissivities.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pcg, BandedCholesky, CsrMatrix};
use crate::mesh::{BcKind, BoundaryConditions, Mesh};
use crate::scalar::Real;

/// Harmonic mean `2 e^{a} e^{b} / (e^{a} + e^{b})` with its first and second
/// derivatives in the log arguments.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicMean<T> {
    pub value: T,
    pub d_a: T,
    pub d_b: T,
    pub d_aa: T,
    pub d_ab: T,
    pub d_bb: T,
}

impl<T: Real> HarmonicMean<T> {
    pub fn new(ya: T, yb: T) -> Self {
        let two = T::lit(2.0);
        let a = (-ya).exp();
        let b = (-yb).exp();
        let s = a + b;
        let s2 = s * s;
        let s3 = s2 * s;
        Self {
            value: two / s,
            d_a: two * a / s2,
            d_b: two * b / s2,
            d_aa: two * a * (a - b) / s3,
            d_ab: T::lit(4.0) * a * b / s3,
            d_bb: two * b * (b - a) / s3,
        }
    }
}

/// Face transmissivity between two cells with log-transmissivities `ya`, `yb`.
pub fn face_transmissivity<T: Real>(ya: T, yb: T) -> T {
    T::lit(2.0) / ((-ya).exp() + (-yb).exp())
}

fn check_inputs<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    u: Option<&DVector<T>>,
    bc: &BoundaryConditions<T>,
) -> Result<()> {
    mesh.check_field(y, "log-transmissivity")?;
    if let Some(u) = u {
        mesh.check_field(u, "head")?;
    }
    bc.validate(mesh)
}

/// Per-cell TPFA residual.
pub fn assemble_residual<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    u: &DVector<T>,
    bc: &BoundaryConditions<T>,
) -> Result<DVector<T>> {
    check_inputs(mesh, y, Some(u), bc)?;
    Ok(residual_unchecked(mesh, y, u, bc))
}

pub(crate) fn residual_unchecked<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    u: &DVector<T>,
    bc: &BoundaryConditions<T>,
) -> DVector<T> {
    let mut r = DVector::zeros(mesh.n_cells());
    for f in &mesh.interior_faces {
        let [i, j] = f.cells;
        let flux = f.transmissibility * face_transmissivity(y[i], y[j]) * (u[j] - u[i]);
        r[i] += flux;
        r[j] -= flux;
    }
    for f in &mesh.boundary_faces {
        let i = f.cell;
        match f.kind {
            BcKind::Dirichlet => {
                let g = f.length / f.distance;
                r[i] += g * y[i].exp() * (bc.dirichlet_values[f.slot] - u[i]);
            }
            BcKind::Neumann => r[i] += f.length * bc.neumann_fluxes[f.slot],
        }
    }
    r
}

/// `∂R/∂u`, the TPFA system matrix. It does not depend on `u`.
pub fn system_matrix<T: Real>(mesh: &Mesh<T>, y: &DVector<T>) -> CsrMatrix<T> {
    let n = mesh.n_cells();
    let mut t = Vec::with_capacity(4 * mesh.interior_faces.len() + mesh.boundary_faces.len());
    for f in &mesh.interior_faces {
        let [i, j] = f.cells;
        let c = f.transmissibility * face_transmissivity(y[i], y[j]);
        t.push((i, i, -c));
        t.push((i, j, c));
        t.push((j, j, -c));
        t.push((j, i, c));
    }
    for f in &mesh.boundary_faces {
        if f.kind == BcKind::Dirichlet {
            let i = f.cell;
            t.push((i, i, -(f.length / f.distance) * y[i].exp()));
        }
    }
    CsrMatrix::from_triplets(n, n, t)
}

/// Exact `(∂R/∂y, ∂R/∂u)`.
pub fn residual_jacobians<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    u: &DVector<T>,
    bc: &BoundaryConditions<T>,
) -> Result<(CsrMatrix<T>, CsrMatrix<T>)> {
    check_inputs(mesh, y, Some(u), bc)?;
    Ok((dr_dy_unchecked(mesh, y, u, bc), system_matrix(mesh, y)))
}

pub(crate) fn dr_dy_unchecked<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    u: &DVector<T>,
    bc: &BoundaryConditions<T>,
) -> CsrMatrix<T> {
    let n = mesh.n_cells();
    let mut t = Vec::with_capacity(4 * mesh.interior_faces.len() + mesh.boundary_faces.len());
    for f in &mesh.interior_faces {
        let [i, j] = f.cells;
        let h = HarmonicMean::new(y[i], y[j]);
        let du = f.transmissibility * (u[j] - u[i]);
        t.push((i, i, du * h.d_a));
        t.push((i, j, du * h.d_b));
        t.push((j, i, -du * h.d_a));
        t.push((j, j, -du * h.d_b));
    }
    for f in &mesh.boundary_faces {
        if f.kind == BcKind::Dirichlet {
            let i = f.cell;
            let g = f.length / f.distance;
            t.push((i, i, g * y[i].exp() * (bc.dirichlet_values[f.slot] - u[i])));
        }
    }
    CsrMatrix::from_triplets(n, n, t)
}

/// Second derivatives of the residual contracted against cell weights:
/// the `(y, y)` and `(y, u)` blocks of `∇² Σ_n w_n R_n`. The `(u, u)` block
/// vanishes because the residual is linear in `u`.
pub fn weighted_residual_hessian<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    u: &DVector<T>,
    bc: &BoundaryConditions<T>,
    weights: &DVector<T>,
) -> (CsrMatrix<T>, CsrMatrix<T>) {
    let n = mesh.n_cells();
    let mut yy = Vec::with_capacity(4 * mesh.interior_faces.len() + n);
    let mut yu = Vec::with_capacity(4 * mesh.interior_faces.len() + n);
    for f in &mesh.interior_faces {
        let [i, j] = f.cells;
        let c = (weights[i] - weights[j]) * f.transmissibility;
        if c == T::zero() {
            continue;
        }
        let h = HarmonicMean::new(y[i], y[j]);
        let du = u[j] - u[i];
        yy.push((i, i, c * du * h.d_aa));
        yy.push((i, j, c * du * h.d_ab));
        yy.push((j, i, c * du * h.d_ab));
        yy.push((j, j, c * du * h.d_bb));
        yu.push((i, j, c * h.d_a));
        yu.push((i, i, -c * h.d_a));
        yu.push((j, j, c * h.d_b));
        yu.push((j, i, -c * h.d_b));
    }
    for f in &mesh.boundary_faces {
        if f.kind == BcKind::Dirichlet {
            let i = f.cell;
            let c = weights[i] * (f.length / f.distance) * y[i].exp();
            yy.push((i, i, c * (bc.dirichlet_values[f.slot] - u[i])));
            yu.push((i, i, -c));
        }
    }
    (
        CsrMatrix::from_triplets(n, n, yy),
        CsrMatrix::from_triplets(n, n, yu),
    )
}

/// Linear solver selection for [`solve_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardSolverConfig {
    /// Residual tolerance, relative to `‖A‖_∞ ‖u‖_∞ + ‖b‖_∞`.
    pub tolerance: f64,
    /// Meshes above this size use conjugate gradients instead of banded Cholesky.
    pub direct_limit: usize,
    pub max_cg_iterations: usize,
}

impl Default for ForwardSolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            direct_limit: 10_000,
            max_cg_iterations: 100_000,
        }
    }
}

/// Solves `R(y, u) = 0` for the head `u`.
pub fn solve_forward<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    bc: &BoundaryConditions<T>,
) -> Result<DVector<T>> {
    solve_forward_with(mesh, y, bc, &ForwardSolverConfig::default())
}

pub fn solve_forward_with<T: Real>(
    mesh: &Mesh<T>,
    y: &DVector<T>,
    bc: &BoundaryConditions<T>,
    config: &ForwardSolverConfig,
) -> Result<DVector<T>> {
    check_inputs(mesh, y, None, bc)?;
    if mesh.n_dirichlet() == 0 {
        return Err(Error::Singular(
            "no Dirichlet face: head is determined only up to a constant".into(),
        ));
    }
    // R(u) = A u + R(0) with A = ∂R/∂u negative definite; solve (−A) u = R(0).
    let zero = DVector::zeros(mesh.n_cells());
    let rhs = residual_unchecked(mesh, y, &zero, bc);
    let mut neg_a = system_matrix(mesh, y);
    neg_a.scale(-T::one());
    let u = if mesh.n_cells() <= config.direct_limit {
        BandedCholesky::factor(&neg_a)?.solve(&rhs)
    } else {
        pcg(
            &neg_a,
            &rhs,
            T::lit(config.tolerance * 1e-2),
            config.max_cg_iterations,
        )?
    };
    if u.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("forward solution"));
    }
    let res = residual_unchecked(mesh, y, &u, bc);
    let a_norm = (0..neg_a.nrows())
        .map(|i| neg_a.row(i).fold(T::zero(), |s, (_, v)| s + v.abs()))
        .fold(T::zero(), |a, b| a.max(b));
    let scale = a_norm * u.amax() + rhs.amax();
    let achieved = res.amax();
    let tol = config.tolerance.max(100.0 * T::EPS.as_f64());
    if achieved.as_f64() > tol * scale.as_f64().max(f64::MIN_POSITIVE) {
        return Err(Error::NotConverged {
            iterations: 1,
            residual: achieved.as_f64(),
        });
    }
    Ok(u)
}
