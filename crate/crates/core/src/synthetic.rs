//! Synthetic ground-truth experiments: reference fields, smoothing and well
//! selection.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::darcy::solve_forward;
use crate::error::{Error, Result};
use crate::gp::{standard_normal_vector, CkleBasis, Observations};
use crate::mesh::{BoundaryConditions, Mesh};
use crate::scalar::Real;
use crate::seed::{derive_seed, rng_for, stream};

/// Draws standard-normal coefficients and evaluates the expansion.
pub fn sample_reference_field<T: Real>(
    basis: &CkleBasis<T>,
    seed: u64,
) -> (DVector<T>, DVector<T>) {
    let mut rng = rng_for(seed, stream::REFERENCE_FIELD, 0);
    let coeffs = standard_normal_vector(&mut rng, basis.n_terms());
    let field = basis.eval_unchecked(&coeffs);
    (coeffs, field)
}

/// `k` Jacobi sweeps replacing each cell by the mean of its face neighbours.
pub fn local_average<T: Real>(mesh: &Mesh<T>, y: &DVector<T>, k: usize) -> Result<DVector<T>> {
    mesh.check_field(y, "field")?;
    let neighbors = mesh.neighbors();
    if k > 0 && neighbors.iter().any(|n| n.is_empty()) {
        return Err(Error::invalid("cell without neighbours cannot be averaged"));
    }
    let mut cur = y.clone();
    for _ in 0..k {
        cur = DVector::from_fn(cur.len(), |i, _| {
            let sum = neighbors[i].iter().fold(T::zero(), |s, &j| s + cur[j]);
            sum / T::from_count(neighbors[i].len())
        });
    }
    Ok(cur)
}

/// Uniform subset of `n_obs` distinct candidate cells, returned sorted.
pub fn select_wells(candidates: &[usize], n_obs: usize, seed: u64, stream_tag: u64) -> Result<Vec<usize>> {
    let mut unique = candidates.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if n_obs > unique.len() {
        return Err(Error::invalid(format!(
            "requested {n_obs} wells from {} candidate cells",
            unique.len()
        )));
    }
    let mut rng = rng_for(seed, stream_tag, 0);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, unique.len(), n_obs)
        .into_iter()
        .map(|k| unique[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseProvenance {
    pub seed: u64,
    pub smoothing_iterations: usize,
    pub reference_seed: u64,
}

/// Reference fields plus the observations drawn from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SyntheticCase<T: Real> {
    pub y_ref: DVector<T>,
    pub u_ref: DVector<T>,
    pub y_obs: Observations<T>,
    pub u_obs: Observations<T>,
    pub provenance: CaseProvenance,
}

/// Samples `y` from `prior`, smooths it `smoothing` times, solves for `u`
/// and observes both fields at independently chosen wells.
pub fn build_synthetic_case<T: Real>(
    mesh: &Mesh<T>,
    bc: &BoundaryConditions<T>,
    prior: &CkleBasis<T>,
    smoothing: usize,
    n_y_obs: usize,
    n_u_obs: usize,
    seed: u64,
) -> Result<SyntheticCase<T>> {
    if prior.n_cells() != mesh.n_cells() {
        return Err(Error::DimensionMismatch {
            what: "reference prior",
            expected: mesh.n_cells(),
            actual: prior.n_cells(),
        });
    }
    let (_, raw) = sample_reference_field(prior, seed);
    let y_ref = local_average(mesh, &raw, smoothing)?;
    let u_ref = solve_forward(mesh, &y_ref, bc)?;
    let all: Vec<usize> = (0..mesh.n_cells()).collect();
    let y_cells = select_wells(&all, n_y_obs, seed, stream::WELLS_Y)?;
    let u_cells = select_wells(&all, n_u_obs, seed, stream::WELLS_U)?;
    Ok(SyntheticCase {
        y_obs: Observations::from_cells(mesh, &y_cells, &y_ref)?,
        u_obs: Observations::from_cells(mesh, &u_cells, &u_ref)?,
        y_ref,
        u_ref,
        provenance: CaseProvenance {
            seed,
            smoothing_iterations: smoothing,
            reference_seed: derive_seed(seed, stream::REFERENCE_FIELD, 0),
        },
    })
}
