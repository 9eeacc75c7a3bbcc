//! Dense linear algebra and small-scale constrained optimization.
//!
//! Everything here operates on `nalgebra` dynamic matrices and is sized for
//! problems with at most a few tens of variables.

pub mod linalg;
pub mod nullspace;
pub mod qp;
pub mod riccati;

pub use linalg::{inf_norm, linear_solve, linear_solve_matrix, spectral_norm, spectral_radius, Lu};
pub use nullspace::nullspace_orthonormal;
pub use qp::{solve_qp, Activity, KktSolution, QpProblem, QuadConstraint, KKT_TOLERANCE};
pub use riccati::{solve_dare, DareSolution};
