//! Euclidean projection onto `S(x)` and its parametric sensitivity.
//!
//! For a projection `u⊥ = argmin ½‖u − t‖² s.t. s(x, u) ≤ 0` with LICQ and
//! strict complementarity, the Jacobian of `u⊥` with respect to the target is
//!
//! ```text
//! M = N (Nᵀ H N)⁻¹ Nᵀ,   H = I + Σ_{i∈A} μ_i ∇²_u s_i
//! ```
//!
//! where `N` is an orthonormal basis of the null space of the strictly
//! active constraint gradients. A policy Jacobian `∇_θπ` (parameters by
//! inputs) therefore maps to `∇_θπ · M` after projection.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::opt_kernel::{linear_solve, linear_solve_matrix, nullspace_orthonormal, solve_qp, Activity};
use crate::safe_set::{Constraint, ConstraintSet};

/// Distance to the boundary below which a projected sample counts as
/// boundary mass.
pub const BOUNDARY_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOutcome {
    pub target: DVector<f64>,
    pub u_proj: DVector<f64>,
    /// One multiplier per constraint of the set, in set order.
    pub multipliers: DVector<f64>,
    pub activity: Vec<Activity>,
    /// Strictly active constraint indices.
    pub active_set: Vec<usize>,
    /// `I + Σ μ_i ∇²s_i` over the strictly active constraints.
    pub hessian: DMatrix<f64>,
    /// `None` when the active Jacobian is rank deficient.
    pub nullspace: Option<DMatrix<f64>>,
    /// `None` when the active Jacobian is rank deficient.
    pub correction: Option<DMatrix<f64>>,
    pub kkt_residual: f64,
    pub weak_activity: bool,
}

impl ProjectionOutcome {
    pub fn licq_holds(&self) -> bool {
        self.correction.is_some()
    }

    /// True when the projection is differentiable at this point.
    pub fn differentiable(&self) -> bool {
        self.licq_holds() && !self.weak_activity
    }

    pub fn any_active(&self) -> bool {
        !self.active_set.is_empty() || self.weak_activity
    }
}

/// `N (NᵀHN)⁻¹ Nᵀ`; zero when `N` has no columns.
pub fn correction_matrix(nullspace: &DMatrix<f64>, hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = nullspace.nrows();
    if nullspace.ncols() == 0 {
        return Ok(DMatrix::zeros(m, m));
    }
    let reduced = nullspace.transpose() * hessian * nullspace;
    let x = linear_solve_matrix(&reduced, &nullspace.transpose())?;
    let mut out = nullspace * x;
    crate::opt_kernel::linalg::symmetrize(&mut out);
    Ok(out)
}

/// Projects `target` onto `S(x)`.
pub fn project(set: &ConstraintSet, x: &DVector<f64>, target: &DVector<f64>) -> Result<ProjectionOutcome> {
    if !set.state_admissible(x) {
        return Err(Error::InfeasibleSafeSet);
    }
    let (qp, index_map) = set.projection_qp(x, target)?;
    let sol = solve_qp(&qp, target).map_err(|e| match e {
        Error::Infeasible { .. } => Error::InfeasibleSafeSet,
        other => other,
    })?;

    let mut multipliers = DVector::zeros(set.len());
    let mut activity = vec![Activity::Inactive; set.len()];
    for (qp_i, &set_i) in index_map.iter().enumerate() {
        multipliers[set_i] = sol.multipliers[qp_i];
        activity[set_i] = sol.activity[qp_i];
    }
    let active_set: Vec<usize> = (0..set.len())
        .filter(|&i| activity[i] == Activity::StrictlyActive)
        .collect();
    let weak_activity = activity.contains(&Activity::WeaklyActive);

    let m = set.input_dim();
    let u_proj = sol.primal;
    let jac = set.constraint_jacobian(x, &u_proj)?;
    let hessians = set.constraint_hessians();
    let mut hessian = DMatrix::identity(m, m);
    for &i in &active_set {
        hessian += &hessians[i] * multipliers[i];
    }
    let j_active = DMatrix::from_fn(active_set.len(), m, |r, c| jac[(active_set[r], c)]);
    let (nullspace, correction) = match nullspace_orthonormal(&j_active) {
        Ok(n) => {
            let mcorr = correction_matrix(&n, &hessian)?;
            (Some(n), Some(mcorr))
        }
        Err(Error::RankDeficient { .. }) => (None, None),
        Err(e) => return Err(e),
    };

    Ok(ProjectionOutcome {
        target: target.clone(),
        u_proj,
        multipliers,
        activity,
        active_set,
        hessian,
        nullspace,
        correction,
        kkt_residual: sol.kkt_residual,
        weak_activity,
    })
}

/// `∇_θπ⊥ = ∇_θπ · M` for a policy Jacobian laid out parameters × inputs.
pub fn policy_jacobian_projected(outcome: &ProjectionOutcome, dpi_dtheta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if outcome.weak_activity {
        return Err(Error::WeakActivity);
    }
    let m = outcome.correction.as_ref().ok_or(Error::LicqViolation)?;
    if dpi_dtheta.ncols() != m.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "policy Jacobian has {} columns, input dimension is {}",
            dpi_dtheta.ncols(),
            m.nrows()
        )));
    }
    Ok(dpi_dtheta * m)
}

fn strictly_feasible(set: &ConstraintSet, x: &DVector<f64>, u: &DVector<f64>) -> bool {
    set.constraints()
        .iter()
        .filter(|c| c.depends_on_input())
        .all(|c| c.value(x, u) < 0.0)
}

/// Log-barrier approximation of the projection,
/// `argmin ½‖u − t‖² − τ Σ log(−s_i(x, u))`, solved by damped Newton with
/// fraction-to-boundary clipping at 0.995.
pub fn project_interior_point(
    set: &ConstraintSet,
    x: &DVector<f64>,
    target: &DVector<f64>,
    tau: f64,
) -> Result<DVector<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("barrier weight must be positive, got {tau}")));
    }
    if !set.state_admissible(x) {
        return Err(Error::NoInteriorPoint);
    }
    let mut u = if strictly_feasible(set, x, target) {
        target.clone()
    } else {
        [1e-1, 3e-2, 1e-2, 1e-3, 1e-4, 1e-6]
            .iter()
            .filter_map(|&margin| project(&set.tightened(margin), x, target).ok())
            .map(|o| o.u_proj)
            .find(|u| strictly_feasible(set, x, u))
            .ok_or(Error::NoInteriorPoint)?
    };

    let constraints: Vec<&Constraint> = set.constraints().iter().filter(|c| c.depends_on_input()).collect();
    // Follow the central path from a coarse barrier weight; a cold start
    // next to a vertex can take hundreds of Newton steps.
    let mut weight = tau.max(PATH_START);
    loop {
        u = barrier_newton(&constraints, x, target, weight, u)?;
        if weight == tau {
            return Ok(u);
        }
        weight = (weight * PATH_SHRINK).max(tau);
    }
}

const PATH_START: f64 = 1e-1;
const PATH_SHRINK: f64 = 0.2;

fn barrier_newton(
    constraints: &[&Constraint],
    x: &DVector<f64>,
    target: &DVector<f64>,
    tau: f64,
    mut u: DVector<f64>,
) -> Result<DVector<f64>> {
    let m = target.len();
    let barrier = |u: &DVector<f64>| -> f64 {
        let mut f = 0.5 * (u - target).norm_squared();
        for c in constraints {
            let s = c.value(x, u);
            if s >= 0.0 {
                return f64::INFINITY;
            }
            f -= tau * (-s).ln();
        }
        f
    };

    for _ in 0..500 {
        let mut grad = &u - target;
        let mut hess = DMatrix::<f64>::identity(m, m);
        for c in constraints {
            let s = c.value(x, &u);
            let gs = c.input_gradient(x, &u);
            grad += &gs * (tau / -s);
            hess += (&gs * gs.transpose()) * (tau / (s * s)) + c.input_hessian(m) * (tau / -s);
        }
        if grad.amax() <= 1e-10 {
            return Ok(u);
        }
        let d = -linear_solve(&hess, &grad)?;
        // near the boundary the curvature amplifies roundoff in u into the
        // gradient, so stop on the Newton step instead
        if d.norm() <= 1e-10 {
            return Ok(u);
        }
        let slope = grad.dot(&d);

        let mut alpha_max = f64::INFINITY;
        for c in constraints {
            let s = c.value(x, &u);
            let a = c.input_gradient(x, &u).dot(&d);
            let q = 0.5 * d.dot(&(c.input_hessian(m) * &d));
            // smallest positive root of s + a α + q α² = 0
            let root = if q.abs() < 1e-300 {
                if a > 0.0 {
                    -s / a
                } else {
                    f64::INFINITY
                }
            } else {
                let disc = a * a - 4.0 * q * s;
                if disc < 0.0 {
                    f64::INFINITY
                } else {
                    let sq = disc.sqrt();
                    [(-a + sq) / (2.0 * q), (-a - sq) / (2.0 * q)]
                        .into_iter()
                        .filter(|r| *r > 0.0)
                        .fold(f64::INFINITY, f64::min)
                }
            };
            alpha_max = alpha_max.min(root);
        }
        let mut alpha = (0.995 * alpha_max).min(1.0);
        let f0 = barrier(&u);
        while barrier(&(&u + &d * alpha)) > f0 + 1e-4 * alpha * slope && alpha > 1e-16 {
            alpha *= 0.5;
        }
        let next = &u + &d * alpha;
        if next == u {
            return Ok(u);
        }
        u = next;
    }
    Err(Error::MaxIterations {
        iterations: 500,
        residual: f64::NAN,
    })
}

/// Regular 2-D grid for [`boundary_mass_histogram`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBins {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub counts: [usize; 2],
}

impl HistogramBins {
    fn index(&self, u: &DVector<f64>) -> Option<(usize, usize)> {
        let mut idx = [0usize; 2];
        for k in 0..2 {
            let w = (self.upper[k] - self.lower[k]) / self.counts[k] as f64;
            let f = ((u[k] - self.lower[k]) / w).floor();
            if f < 0.0 || f >= self.counts[k] as f64 {
                return None;
            }
            idx[k] = f as usize;
        }
        Some((idx[0], idx[1]))
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let w0 = (self.upper[0] - self.lower[0]) / self.counts[0] as f64;
        let w1 = (self.upper[1] - self.lower[1]) / self.counts[1] as f64;
        (self.lower[0] + (i as f64 + 0.5) * w0, self.lower[1] + (j as f64 + 0.5) * w1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryHistogram {
    pub bins: HistogramBins,
    /// Row-major `counts[0] × counts[1]` grid.
    pub counts: Vec<usize>,
    pub samples: usize,
    pub boundary_samples: usize,
    /// Samples falling outside the grid.
    pub outside: usize,
}

impl BoundaryHistogram {
    pub fn boundary_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.boundary_samples as f64 / self.samples as f64
        }
    }

    /// `u1_bin,u2_bin,count` for every non-empty bin followed by a
    /// `boundary_fraction=<value>` line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "u1_bin,u2_bin,count")?;
        for i in 0..self.bins.counts[0] {
            for j in 0..self.bins.counts[1] {
                let c = self.counts[i * self.bins.counts[1] + j];
                if c > 0 {
                    let (a, b) = self.bins.center(i, j);
                    writeln!(w, "{a},{b},{c}")?;
                }
            }
        }
        writeln!(w, "boundary_fraction={}", self.boundary_fraction())
    }
}

/// Projects `n` samples onto `S(x)` and bins the projected inputs. Samples
/// that land within [`BOUNDARY_TOLERANCE`] of an input constraint are counted
/// as boundary mass.
pub fn boundary_mass_histogram<R, F>(
    set: &ConstraintSet,
    x: &DVector<f64>,
    mut sampler: F,
    rng: &mut R,
    n: usize,
    bins: HistogramBins,
) -> Result<BoundaryHistogram>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> DVector<f64>,
{
    if set.input_dim() != 2 {
        return Err(Error::DimensionMismatch("histogram needs a 2-D input".into()));
    }
    if bins.counts.contains(&0) || (0..2).any(|k| !(bins.upper[k] > bins.lower[k])) {
        return Err(Error::InvalidParameter(format!("bad histogram grid {bins:?}")));
    }
    let mut hist = BoundaryHistogram {
        bins,
        counts: vec![0; bins.counts[0] * bins.counts[1]],
        samples: 0,
        boundary_samples: 0,
        outside: 0,
    };
    for _ in 0..n {
        let us = sampler(rng);
        let out = project(set, x, &us)?;
        hist.samples += 1;
        let on_boundary = set
            .constraints()
            .iter()
            .filter(|c| c.depends_on_input())
            .any(|c| c.value(x, &out.u_proj) >= -BOUNDARY_TOLERANCE);
        if on_boundary {
            hist.boundary_samples += 1;
        }
        match bins.index(&out.u_proj) {
            Some((i, j)) => hist.counts[i * bins.counts[1] + j] += 1,
            None => hist.outside += 1,
        }
    }
    Ok(hist)
}
