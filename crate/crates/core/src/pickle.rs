//! PICKLE loss, its gradient and the MAP estimate.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ResidualModel;
use crate::optim::{minimize, OptimConfig};
use crate::scalar::Real;

/// Residual and prior variances; `γ = sigma_r_sq`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams<T> {
    pub sigma_r_sq: T,
    pub sigma_xi_sq: T,
    pub sigma_eta_sq: T,
}

impl<T: Real> LossParams<T> {
    pub fn new(sigma_r_sq: T) -> Self {
        Self {
            sigma_r_sq,
            sigma_xi_sq: T::one(),
            sigma_eta_sq: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_r_sq", self.sigma_r_sq),
            ("sigma_xi_sq", self.sigma_xi_sq),
            ("sigma_eta_sq", self.sigma_eta_sq),
        ] {
            if !(v > T::zero()) || !v.is_finite_value() {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        Ok(())
    }

    /// Per-coordinate prior precision over stacked coefficients.
    pub(crate) fn prior_precision(&self, n_xi: usize, n_eta: usize) -> DVector<T> {
        DVector::from_fn(n_xi + n_eta, |k, _| {
            if k < n_xi {
                T::one() / self.sigma_xi_sq
            } else {
                T::one() / self.sigma_eta_sq
            }
        })
    }
}

/// CKLE coefficients of `y` (`xi`) and `u` (`eta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CoefficientPair<T: Real> {
    pub xi: DVector<T>,
    pub eta: DVector<T>,
}

impl<T: Real> CoefficientPair<T> {
    pub fn zeros(n_xi: usize, n_eta: usize) -> Self {
        Self {
            xi: DVector::zeros(n_xi),
            eta: DVector::zeros(n_eta),
        }
    }

    pub fn stacked(&self) -> DVector<T> {
        let mut z = DVector::zeros(self.xi.len() + self.eta.len());
        z.rows_mut(0, self.xi.len()).copy_from(&self.xi);
        z.rows_mut(self.xi.len(), self.eta.len()).copy_from(&self.eta);
        z
    }

    pub fn from_stacked(z: &DVector<T>, n_xi: usize) -> Self {
        Self {
            xi: z.rows(0, n_xi).into_owned(),
            eta: z.rows(n_xi, z.len() - n_xi).into_owned(),
        }
    }

    pub(crate) fn check<M: ResidualModel<T> + ?Sized>(&self, model: &M) -> Result<DVector<T>> {
        if self.xi.len() != model.n_xi() {
            return Err(Error::DimensionMismatch {
                what: "xi",
                expected: model.n_xi(),
                actual: self.xi.len(),
            });
        }
        if self.eta.len() != model.n_eta() {
            return Err(Error::DimensionMismatch {
                what: "eta",
                expected: model.n_eta(),
                actual: self.eta.len(),
            });
        }
        let z = self.stacked();
        model.check_coeffs(&z)?;
        Ok(z)
    }
}

/// `½‖R‖² + (γ/2)(‖ξ‖²/σ_ξ² + ‖η‖²/σ_η²)` and its gradient, over stacked `z`.
pub(crate) fn loss_and_grad<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &DVector<T>,
) -> (T, DVector<T>) {
    let r = model.residual(z);
    let prec = params.prior_precision(model.n_xi(), model.n_eta());
    let gamma = params.sigma_r_sq;
    let half = T::lit(0.5);
    let weighted = z.component_mul(&prec);
    let value = half * r.norm_squared() + half * gamma * z.dot(&weighted);
    let grad = model.vjp(z, &r) + weighted * gamma;
    (value, grad)
}

pub fn pickle_loss<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &CoefficientPair<T>,
) -> Result<T> {
    params.validate()?;
    let z = z.check(model)?;
    Ok(loss_and_grad(model, params, &z).0)
}

/// `∂L/∂z = (∂R/∂z)ᵀR + γ Σ̂⁻¹ z`.
pub fn pickle_grad<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    z: &CoefficientPair<T>,
) -> Result<CoefficientPair<T>> {
    params.validate()?;
    let zs = z.check(model)?;
    let g = loss_and_grad(model, params, &zs).1;
    Ok(CoefficientPair::from_stacked(&g, model.n_xi()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MapResult<T: Real> {
    pub z: CoefficientPair<T>,
    pub loss: T,
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes the PICKLE loss from `init`. Non-convergence is flagged, not an error.
pub fn map_optimize<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    params: &LossParams<T>,
    init: &CoefficientPair<T>,
    config: &OptimConfig,
) -> Result<MapResult<T>> {
    params.validate()?;
    config.validate()?;
    let z0 = init.check(model)?;
    let r = minimize(|z| loss_and_grad(model, params, z), z0, config);
    if !r.value.is_finite_value() {
        return Err(Error::NonFinite("PICKLE loss at the initial point"));
    }
    if !r.converged {
        log::warn!(
            "MAP optimization stopped after {} iterations with gradient norm {:e}",
            r.iterations,
            r.grad_norm().as_f64()
        );
    }
    Ok(MapResult {
        z: CoefficientPair::from_stacked(&r.x, model.n_xi()),
        loss: r.value,
        grad_norm: r.grad_norm(),
        iterations: r.iterations,
        converged: r.converged,
    })
}

/// MAP estimates over a grid of residual variances, computed in parallel.
pub fn map_sweep<T: Real, M: ResidualModel<T> + ?Sized>(
    model: &M,
    sigma_r_sq_grid: &[T],
    config: &OptimConfig,
) -> Result<Vec<MapResult<T>>> {
    let init = CoefficientPair::zeros(model.n_xi(), model.n_eta());
    sigma_r_sq_grid
        .par_iter()
        .map(|&s| map_optimize(model, &LossParams::new(s), &init, config))
        .collect()
}
