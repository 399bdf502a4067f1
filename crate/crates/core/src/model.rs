//! Residual operators `R(ξ, η)` over stacked CKLE coefficients `z = (ξ, η)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::darcy::{dr_dy_unchecked, residual_unchecked, system_matrix, weighted_residual_hessian};
use crate::error::{Error, Result};
use crate::gp::CkleBasis;
use crate::mesh::{BoundaryConditions, Mesh};
use crate::scalar::Real;

/// A residual vector as a smooth function of stacked coefficients.
///
/// Implementations may assume `z.len() == n_xi() + n_eta()`; callers check it.
pub trait ResidualModel<T: Real>: Sync {
    fn n_residuals(&self) -> usize;
    fn n_xi(&self) -> usize;
    fn n_eta(&self) -> usize;

    fn n_coeffs(&self) -> usize {
        self.n_xi() + self.n_eta()
    }

    fn residual(&self, z: &DVector<T>) -> DVector<T>;

    /// `∂R/∂z`, `n_residuals × n_coeffs`.
    fn jacobian(&self, z: &DVector<T>) -> DMatrix<T>;

    /// `(∂R/∂z)ᵀ v`.
    fn vjp(&self, z: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        self.jacobian(z).tr_mul(v)
    }

    /// `Σ_n w_n ∇²R_n`, `n_coeffs × n_coeffs`.
    fn curvature(&self, z: &DVector<T>, w: &DVector<T>) -> DMatrix<T>;

    fn check_coeffs(&self, z: &DVector<T>) -> Result<()> {
        if z.len() != self.n_coeffs() {
            return Err(Error::DimensionMismatch {
                what: "coefficient vector",
                expected: self.n_coeffs(),
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite("coefficients"));
        }
        Ok(())
    }
}

/// TPFA Darcy residual composed with CKLE bases for `y` and `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DarcyResidualModel<T: Real> {
    pub mesh: Mesh<T>,
    pub y_basis: CkleBasis<T>,
    pub u_basis: CkleBasis<T>,
    pub bc: BoundaryConditions<T>,
}

impl<T: Real> DarcyResidualModel<T> {
    pub fn new(
        mesh: Mesh<T>,
        y_basis: CkleBasis<T>,
        u_basis: CkleBasis<T>,
        bc: BoundaryConditions<T>,
    ) -> Result<Self> {
        mesh.validate()?;
        bc.validate(&mesh)?;
        for (what, b) in [("y basis", &y_basis), ("u basis", &u_basis)] {
            if b.n_cells() != mesh.n_cells() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: mesh.n_cells(),
                    actual: b.n_cells(),
                });
            }
        }
        Ok(Self {
            mesh,
            y_basis,
            u_basis,
            bc,
        })
    }

    /// `(ŷ(ξ), û(η))`.
    pub fn fields(&self, z: &DVector<T>) -> (DVector<T>, DVector<T>) {
        let nx = self.n_xi();
        let xi = z.rows(0, nx).into_owned();
        let eta = z.rows(nx, self.n_eta()).into_owned();
        (
            self.y_basis.eval_unchecked(&xi),
            self.u_basis.eval_unchecked(&eta),
        )
    }
}

impl<T: Real> ResidualModel<T> for DarcyResidualModel<T> {
    fn n_residuals(&self) -> usize {
        self.mesh.n_cells()
    }

    fn n_xi(&self) -> usize {
        self.y_basis.n_terms()
    }

    fn n_eta(&self) -> usize {
        self.u_basis.n_terms()
    }

    fn residual(&self, z: &DVector<T>) -> DVector<T> {
        let (y, u) = self.fields(z);
        residual_unchecked(&self.mesh, &y, &u, &self.bc)
    }

    fn jacobian(&self, z: &DVector<T>) -> DMatrix<T> {
        let (y, u) = self.fields(z);
        let jy = dr_dy_unchecked(&self.mesh, &y, &u, &self.bc).mul_dense(self.y_basis.modes());
        let ju = system_matrix(&self.mesh, &y).mul_dense(self.u_basis.modes());
        let mut j = DMatrix::zeros(self.n_residuals(), self.n_coeffs());
        j.columns_mut(0, self.n_xi()).copy_from(&jy);
        j.columns_mut(self.n_xi(), self.n_eta()).copy_from(&ju);
        j
    }

    fn vjp(&self, z: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        let (y, u) = self.fields(z);
        let gy = dr_dy_unchecked(&self.mesh, &y, &u, &self.bc).tr_mul_vec(v);
        let gu = system_matrix(&self.mesh, &y).tr_mul_vec(v);
        let mut out = DVector::zeros(self.n_coeffs());
        out.rows_mut(0, self.n_xi())
            .copy_from(&self.y_basis.modes().tr_mul(&gy));
        out.rows_mut(self.n_xi(), self.n_eta())
            .copy_from(&self.u_basis.modes().tr_mul(&gu));
        out
    }

    fn curvature(&self, z: &DVector<T>, w: &DVector<T>) -> DMatrix<T> {
        let (y, u) = self.fields(z);
        let (hyy, hyu) = weighted_residual_hessian(&self.mesh, &y, &u, &self.bc, w);
        let py = self.y_basis.modes();
        let pu = self.u_basis.modes();
        let cyy = py.tr_mul(&hyy.mul_dense(py));
        let cyu = py.tr_mul(&hyu.mul_dense(pu));
        let (nx, ne) = (self.n_xi(), self.n_eta());
        let mut c = DMatrix::zeros(nx + ne, nx + ne);
        c.view_mut((0, 0), (nx, nx)).copy_from(&cyy);
        c.view_mut((0, nx), (nx, ne)).copy_from(&cyu);
        c.view_mut((nx, 0), (ne, nx)).copy_from(&cyu.transpose());
        c
    }
}

/// `R = Aξ + Bη − c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LinearModel<T: Real> {
    pub a_matrix: DMatrix<T>,
    pub b_matrix: DMatrix<T>,
    pub c_vector: DVector<T>,
}

impl<T: Real> LinearModel<T> {
    pub fn new(a_matrix: DMatrix<T>, b_matrix: DMatrix<T>, c_vector: DVector<T>) -> Result<Self> {
        let n = c_vector.len();
        if a_matrix.nrows() != n || b_matrix.nrows() != n {
            return Err(Error::invalid(format!(
                "linear model rows disagree: A has {}, B has {}, c has {n}",
                a_matrix.nrows(),
                b_matrix.nrows()
            )));
        }
        if a_matrix.iter().chain(b_matrix.iter()).chain(c_vector.iter()).any(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite("linear model"));
        }
        Ok(Self {
            a_matrix,
            b_matrix,
            c_vector,
        })
    }

    /// Standard-normal `A`, `B` scaled by `1/√N` and standard-normal `c`.
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, n_xi: usize, n_eta: usize) -> Self {
        let scale = T::one() / T::from_count(n).sqrt();
        let mut draw = |r, c| {
            let m: DMatrix<T> = DMatrix::from_fn(r, c, |_, _| {
                crate::gp::standard_normal_vector::<T, R>(rng, 1)[0]
            });
            m
        };
        let a = draw(n, n_xi) * scale;
        let b = draw(n, n_eta) * scale;
        let c = draw(n, 1).column(0).into_owned();
        Self {
            a_matrix: a,
            b_matrix: b,
            c_vector: c,
        }
    }

    /// `[A B]`.
    pub fn design(&self) -> DMatrix<T> {
        let (nx, ne) = (self.a_matrix.ncols(), self.b_matrix.ncols());
        let mut g = DMatrix::zeros(self.c_vector.len(), nx + ne);
        g.columns_mut(0, nx).copy_from(&self.a_matrix);
        g.columns_mut(nx, ne).copy_from(&self.b_matrix);
        g
    }
}

impl<T: Real> ResidualModel<T> for LinearModel<T> {
    fn n_residuals(&self) -> usize {
        self.c_vector.len()
    }

    fn n_xi(&self) -> usize {
        self.a_matrix.ncols()
    }

    fn n_eta(&self) -> usize {
        self.b_matrix.ncols()
    }

    fn residual(&self, z: &DVector<T>) -> DVector<T> {
        let nx = self.n_xi();
        &self.a_matrix * z.rows(0, nx) + &self.b_matrix * z.rows(nx, self.n_eta()) - &self.c_vector
    }

    fn jacobian(&self, _z: &DVector<T>) -> DMatrix<T> {
        self.design()
    }

    fn vjp(&self, _z: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.n_coeffs());
        out.rows_mut(0, self.n_xi()).copy_from(&self.a_matrix.tr_mul(v));
        out.rows_mut(self.n_xi(), self.n_eta())
            .copy_from(&self.b_matrix.tr_mul(v));
        out
    }

    fn curvature(&self, _z: &DVector<T>, _w: &DVector<T>) -> DMatrix<T> {
        DMatrix::zeros(self.n_coeffs(), self.n_coeffs())
    }
}
