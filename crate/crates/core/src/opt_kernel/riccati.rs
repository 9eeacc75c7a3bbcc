use nalgebra::DMatrix;

use super::linalg::{linear_solve_matrix, spectral_radius, symmetrize};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100_000;
const CHANGE_TOLERANCE: f64 = 1e-12;

/// Infinite-horizon discrete LQR solution.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    /// Feedback gain, `u = -K x`.
    pub gain: DMatrix<f64>,
    /// Stabilizing solution of the Riccati equation.
    pub cost_to_go: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Spectral radius of `A - B K`.
    pub closed_loop_radius: f64,
}

fn gain_for(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    linear_solve_matrix(&(r + &btp * b), &(btp * a))
}

/// `AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`, max-abs entry.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    let k = gain_for(a, b, r, p)?;
    let atpb = a.transpose() * p * b;
    let res = a.transpose() * p * a - p - atpb * k + q;
    Ok(res.amax())
}

/// Solves the discrete algebraic Riccati equation by fixed-point Riccati
/// iteration from `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let mut p = q.clone();
    for it in 1..=MAX_ITERATIONS {
        let k = gain_for(a, b, r, &p)?;
        let mut next = a.transpose() * &p * a - a.transpose() * &p * b * &k + q;
        symmetrize(&mut next);
        let change = (&next - &p).amax();
        p = next;
        if change <= CHANGE_TOLERANCE * p.amax().max(1.0) {
            let gain = gain_for(a, b, r, &p)?;
            let residual = dare_residual(a, b, q, r, &p)?;
            let closed_loop_radius = spectral_radius(&(a - b * &gain));
            log::debug!(
                "solve_dare: {it} iterations, residual {residual:.2e}, closed-loop radius {closed_loop_radius:.4}"
            );
            return Ok(DareSolution {
                gain,
                cost_to_go: p,
                iterations: it,
                residual,
                closed_loop_radius,
            });
        }
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
    })
}
