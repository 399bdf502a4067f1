pub mod darcy;
pub mod diagnostics;
pub mod error;
pub mod gp;
pub mod hmc;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pickle;
pub mod rpickle;
pub mod scalar;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision instantiations.
pub type Mesh64 = mesh::Mesh<f64>;
pub type BoundaryConditions64 = mesh::BoundaryConditions<f64>;
pub type CkleBasis64 = gp::CkleBasis<f64>;
pub type DarcyResidualModel64 = model::DarcyResidualModel<f64>;
pub type LinearModel64 = model::LinearModel<f64>;
pub type CoefficientPair64 = pickle::CoefficientPair<f64>;
pub type PosteriorEnsemble64 = rpickle::PosteriorEnsemble<f64>;

/// Single-precision instantiations. Optimizer tolerances tuned for `f64`
/// may be unreachable here.
pub type Mesh32 = mesh::Mesh<f32>;
pub type BoundaryConditions32 = mesh::BoundaryConditions<f32>;
pub type CkleBasis32 = gp::CkleBasis<f32>;
pub type DarcyResidualModel32 = model::DarcyResidualModel<f32>;
pub type LinearModel32 = model::LinearModel<f32>;
pub type CoefficientPair32 = pickle::CoefficientPair<f32>;
pub type PosteriorEnsemble32 = rpickle::PosteriorEnsemble<f32>;
