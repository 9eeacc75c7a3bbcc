//! Dense convex QP / QCQP solver.
//!
//! Affine-only problems go through a dual active-set method (Goldfarb and
//! Idnani): it starts from the unconstrained minimizer, adds one violated
//! constraint at a time and refactors the working-set system after every
//! change. It needs no feasible starting point and certifies infeasibility
//! when a violated constraint cannot be reached by any dual step.
//!
//! Quadratic constraints are handled by an SQP outer loop whose subproblems
//! are solved by the same routine. Constraint Hessians are constant, so the
//! Lagrangian Hessian is exact.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Thresholds used to classify constraint activity at a solution.
pub const ACTIVITY_TOLERANCE: f64 = 1e-7;
pub const MULTIPLIER_TOLERANCE: f64 = 1e-7;

/// Target KKT residual for every returned solution.
pub const KKT_TOLERANCE: f64 = 1e-8;

const SQP_MAX_ITERATIONS: usize = 200;

/// `uᵀ P u + qᵀ u + r ≤ 0` with `P` symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadConstraint {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
}

impl QuadConstraint {
    pub fn value(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.p * u)) + self.q.dot(u) + self.r
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        (&self.p * u) * 2.0 + &self.q
    }
}

/// `min ½ uᵀ H u + gᵀ u  s.t.  G u ≤ b,  uᵀ P_i u + q_iᵀ u + r_i ≤ 0`.
///
/// Multipliers are ordered with the affine rows first, then the quadratic
/// constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq_jacobian: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub quadratic: Vec<QuadConstraint>,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        QpProblem {
            hessian,
            linear,
            ineq_jacobian: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            quadratic: Vec::new(),
        }
    }

    pub fn with_affine(mut self, g: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.ineq_jacobian = g;
        self.ineq_rhs = b;
        self
    }

    pub fn with_quadratic(mut self, c: Vec<QuadConstraint>) -> Self {
        self.quadratic = c;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.ineq_rhs.len() + self.quadratic.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + self.linear.dot(u)
    }

    /// All constraint values `s_i(u)`, affine rows first.
    pub fn constraint_values(&self, u: &DVector<f64>) -> DVector<f64> {
        let affine = &self.ineq_jacobian * u - &self.ineq_rhs;
        let mut out = DVector::zeros(self.constraint_count());
        out.rows_mut(0, affine.len()).copy_from(&affine);
        for (i, c) in self.quadratic.iter().enumerate() {
            out[affine.len() + i] = c.value(u);
        }
        out
    }

    /// Constraint gradients stacked as rows.
    pub fn constraint_jacobian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let na = self.ineq_rhs.len();
        let mut j = DMatrix::zeros(self.constraint_count(), self.dim());
        j.rows_mut(0, na).copy_from(&self.ineq_jacobian);
        for (i, c) in self.quadratic.iter().enumerate() {
            j.row_mut(na + i).copy_from(&c.gradient(u).transpose());
        }
        j
    }

    /// Max of the stationarity, primal feasibility, complementarity and dual
    /// feasibility residuals.
    pub fn kkt_residual(&self, u: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let s = self.constraint_values(u);
        let j = self.constraint_jacobian(u);
        let stat = &self.hessian * u + &self.linear + j.transpose() * mu;
        let mut res = stat.amax();
        for i in 0..s.len() {
            res = res
                .max(s[i].max(0.0))
                .max((mu[i] * s[i]).abs())
                .max((-mu[i]).max(0.0));
        }
        res
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.hessian.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "Hessian is {:?}, expected {n}x{n}",
                self.hessian.shape()
            )));
        }
        if self.ineq_jacobian.ncols() != n || self.ineq_jacobian.nrows() != self.ineq_rhs.len() {
            return Err(Error::DimensionMismatch(format!(
                "affine constraints are {:?} with {} right-hand sides for {n} variables",
                self.ineq_jacobian.shape(),
                self.ineq_rhs.len()
            )));
        }
        for c in &self.quadratic {
            if c.p.shape() != (n, n) || c.q.len() != n {
                return Err(Error::DimensionMismatch(
                    "quadratic constraint size does not match the variable count".into(),
                ));
            }
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-12 * (1.0 + self.hessian.amax()) {
            return Err(Error::InvalidParameter(format!(
                "Hessian is not symmetric (asymmetry {asym:.2e})"
            )));
        }
        Ok(())
    }
}

/// Activity class of one constraint at a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Inactive,
    StrictlyActive,
    WeaklyActive,
}

impl Activity {
    pub fn classify(value: f64, multiplier: f64) -> Self {
        if value.abs() > ACTIVITY_TOLERANCE {
            Activity::Inactive
        } else if multiplier >= MULTIPLIER_TOLERANCE {
            Activity::StrictlyActive
        } else {
            Activity::WeaklyActive
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub primal: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub activity: Vec<Activity>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl KktSolution {
    pub fn strictly_active(&self) -> Vec<usize> {
        self.indices_of(Activity::StrictlyActive)
    }

    pub fn weakly_active(&self) -> Vec<usize> {
        self.indices_of(Activity::WeaklyActive)
    }

    fn indices_of(&self, class: Activity) -> Vec<usize> {
        self.activity
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Solves a convex QP or QCQP. `start` seeds the SQP loop when quadratic
/// constraints are present and is otherwise only checked for size.
pub fn solve_qp(problem: &QpProblem, start: &DVector<f64>) -> Result<KktSolution> {
    problem.validate()?;
    if start.len() != problem.dim() {
        return Err(Error::DimensionMismatch(format!(
            "start has {} entries, problem has {} variables",
            start.len(),
            problem.dim()
        )));
    }
    let (primal, multipliers, iterations) = if problem.quadratic.is_empty() {
        let (u, mu, it) = dual_active_set(
            &problem.hessian,
            &problem.linear,
            &problem.ineq_jacobian,
            &problem.ineq_rhs,
        )?;
        (u, mu, it)
    } else {
        sqp(problem, start)?
    };

    let values = problem.constraint_values(&primal);
    let violation = values.iter().fold(0.0f64, |a, v| a.max(*v));
    if violation > KKT_TOLERANCE {
        return Err(Error::Infeasible { violation });
    }
    let kkt_residual = problem.kkt_residual(&primal, &multipliers);
    if kkt_residual > KKT_TOLERANCE {
        return Err(Error::MaxIterations {
            iterations,
            residual: kkt_residual,
        });
    }
    let activity = values
        .iter()
        .zip(multipliers.iter())
        .map(|(s, m)| Activity::classify(*s, *m))
        .collect();
    Ok(KktSolution {
        primal,
        multipliers,
        activity,
        kkt_residual,
        iterations,
    })
}

fn factor_spd(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(h.clone())
        .ok_or_else(|| Error::InvalidParameter("Hessian is not positive definite".into()))
}

/// Working-set quantities for the current active set:
/// `z = H⁻¹g − H⁻¹N r`, `r = (NᵀH⁻¹N)⁻¹ NᵀH⁻¹ g`.
fn step_directions(
    chol: &Cholesky<f64, Dyn>,
    normals: &DMatrix<f64>,
    g: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let hinv_g = chol.solve(g);
    if normals.ncols() == 0 {
        return Ok((hinv_g, DVector::zeros(0)));
    }
    let hinv_n = chol.solve(normals);
    let s = normals.transpose() * &hinv_n;
    let s_chol = Cholesky::new(s).ok_or(Error::RankDeficient {
        rank: normals.ncols() - 1,
        rows: normals.ncols(),
    })?;
    let r = s_chol.solve(&(normals.transpose() * &hinv_g));
    let z = hinv_g - hinv_n * &r;
    Ok((z, r))
}

/// Goldfarb–Idnani dual active-set method for
/// `min ½uᵀHu + cᵀu  s.t.  G u ≤ b`. Returns primal, full multiplier vector
/// and the number of working-set changes.
pub(crate) fn dual_active_set(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, usize)> {
    let n = c.len();
    let m = b.len();
    let chol = factor_spd(h)?;
    let mut u = -chol.solve(c);
    let mut active: Vec<usize> = Vec::new();
    let mut mu_active: Vec<f64> = Vec::new();
    let row_norm: Vec<f64> = (0..m).map(|i| g.row(i).norm()).collect();
    let max_changes = 50 * (m + n + 1);
    let mut changes = 0usize;

    let feas_tol = |i: usize, u: &DVector<f64>| 1e-13 * (1.0 + b[i].abs() + row_norm[i] * u.amax());

    loop {
        // most violated constraint, normalized by its row norm
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m {
            if active.contains(&i) || row_norm[i] == 0.0 {
                if row_norm[i] == 0.0 && -b[i] > feas_tol(i, &u) {
                    return Err(Error::Infeasible { violation: -b[i] });
                }
                continue;
            }
            let viol = g.row(i).dot(&u.transpose()) - b[i];
            if viol > feas_tol(i, &u) {
                let score = viol / row_norm[i];
                if pick.is_none_or(|(_, s)| score > s) {
                    pick = Some((i, score));
                }
            }
        }
        let Some((p, _)) = pick else { break };
        let gp: DVector<f64> = g.row(p).transpose();
        let gp_hinv_gp = gp.dot(&chol.solve(&gp));
        let mut mu_p = 0.0;

        loop {
            changes += 1;
            if changes > max_changes {
                let viol = g.row(p).dot(&u.transpose()) - b[p];
                return Err(Error::MaxIterations {
                    iterations: changes,
                    residual: viol,
                });
            }
            let normals = DMatrix::from_fn(n, active.len(), |r, k| g[(active[k], r)]);
            let (z, r) = step_directions(&chol, &normals, &gp)?;

            let mut partial: Option<(usize, f64)> = None;
            for (k, rk) in r.iter().enumerate() {
                if *rk > 1e-14 * (1.0 + r.amax()) {
                    let t = mu_active[k] / rk;
                    if partial.is_none_or(|(_, tb)| t < tb) {
                        partial = Some((k, t));
                    }
                }
            }
            let gz = gp.dot(&z);
            let viol = gp.dot(&u) - b[p];
            let full = if gz > 1e-13 * gp_hinv_gp {
                Some(viol.max(0.0) / gz)
            } else {
                None
            };

            match (full, partial) {
                (None, None) => return Err(Error::Infeasible { violation: viol }),
                (None, Some((k, t))) => {
                    for (mk, rk) in mu_active.iter_mut().zip(r.iter()) {
                        *mk -= t * rk;
                    }
                    mu_p += t;
                    active.remove(k);
                    mu_active.remove(k);
                }
                (Some(tf), partial) => {
                    let (t, drop) = match partial {
                        Some((k, tp)) if tp < tf => (tp, Some(k)),
                        _ => (tf, None),
                    };
                    u -= &z * t;
                    for (mk, rk) in mu_active.iter_mut().zip(r.iter()) {
                        *mk -= t * rk;
                    }
                    mu_p += t;
                    match drop {
                        Some(k) => {
                            active.remove(k);
                            mu_active.remove(k);
                        }
                        None => {
                            active.push(p);
                            mu_active.push(mu_p);
                            break;
                        }
                    }
                }
            }
        }
    }

    // Re-solve the equality-constrained problem on the final working set to
    // remove drift accumulated over the dual steps.
    if !active.is_empty() {
        let normals = DMatrix::from_fn(n, active.len(), |r, k| g[(active[k], r)]);
        let b_act = DVector::from_iterator(active.len(), active.iter().map(|&i| b[i]));
        let hinv_n = chol.solve(&normals);
        let hinv_c = chol.solve(c);
        if let Some(s_chol) = Cholesky::new(normals.transpose() * &hinv_n) {
            let mu = -s_chol.solve(&(b_act + normals.transpose() * &hinv_c));
            if mu.iter().all(|v| *v >= -1e-12) {
                u = -(hinv_c + hinv_n * &mu);
                mu_active = mu.iter().map(|v| v.max(0.0)).collect();
            }
        }
    }

    let mut mu = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        mu[i] = mu_active[k];
    }
    Ok((u, mu, changes))
}

fn sqp(problem: &QpProblem, start: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, usize)> {
    let na = problem.ineq_rhs.len();
    let nc = problem.constraint_count();
    let mut u = start.clone();
    let mut mu = DVector::zeros(nc);
    let mut rho = 1.0f64;

    let merit = |u: &DVector<f64>, rho: f64| {
        let s = problem.constraint_values(u);
        problem.objective(u) + rho * s.iter().map(|v| v.max(0.0)).sum::<f64>()
    };

    for it in 0..SQP_MAX_ITERATIONS {
        let mut w = problem.hessian.clone();
        for (i, c) in problem.quadratic.iter().enumerate() {
            w += &c.p * (2.0 * mu[na + i]);
        }
        let grad = &problem.hessian * &u + &problem.linear;
        let s = problem.constraint_values(&u);
        let jac = problem.constraint_jacobian(&u);
        let rhs = -&s;

        let (d, mu_qp, _) = dual_active_set(&w, &grad, &jac, &rhs)?;
        let res_now = problem.kkt_residual(&u, &mu);
        let step_size = d.amax();
        if step_size <= 1e-14 * (1.0 + u.amax()) {
            return Ok((u, mu_qp, it + 1));
        }

        rho = rho.max(1.5 * mu_qp.amax() + 1.0);
        let phi0 = merit(&u, rho);
        let infeas: f64 = s.iter().map(|v| v.max(0.0)).sum();
        let slope = grad.dot(&d) - rho * infeas;

        let full = &u + &d;
        let accept_full = merit(&full, rho) <= phi0 + 1e-4 * slope
            || problem.kkt_residual(&full, &mu_qp) <= 0.5 * res_now;
        let mut alpha = 1.0;
        if !accept_full {
            loop {
                alpha *= 0.5;
                if alpha < 1e-10 {
                    break;
                }
                if merit(&(&u + &d * alpha), rho) <= phi0 + 1e-4 * alpha * slope {
                    break;
                }
            }
        }
        u += &d * alpha;
        mu = &mu + (&mu_qp - &mu) * alpha;

        if alpha == 1.0 && problem.kkt_residual(&u, &mu) <= 1e-13 * (1.0 + u.amax()) {
            return Ok((u, mu, it + 1));
        }
    }
    let residual = problem.kkt_residual(&u, &mu);
    let violation = problem
        .constraint_values(&u)
        .iter()
        .fold(0.0f64, |a, v| a.max(*v));
    if violation > KKT_TOLERANCE {
        return Err(Error::Infeasible { violation });
    }
    if residual <= KKT_TOLERANCE {
        return Ok((u, mu, SQP_MAX_ITERATIONS));
    }
    Err(Error::MaxIterations {
        iterations: SQP_MAX_ITERATIONS,
        residual,
    })
}
