//! Tube-based robust MPC used as an implicit safe set.
//!
//! The nominal model `x̄⁺ = Âx̄ + Bu` is propagated over a horizon of `N`
//! steps. True trajectories stay inside balls `B(x̄_k, r_k)` with
//! `r_0 = 0` and `r_{k+1} = c·r_k + w`, where `c` bounds how the error
//! grows from one step to the next and `w` bounds the per-step disturbance.
//! Keeping `‖x̄_k‖ ≤ 1 − r_k` then keeps the true state in the unit ball.
//!
//! The first planned input `u_0` acts as the projection of a target input:
//! it minimizes `½‖u_0 − t‖² + Σ_{k=1}^{N−1} γ^k L(x̄_k, u_k)` over all
//! feasible plans. The problem is condensed onto `U = (u_0, …, u_{N−1})` and
//! solved as a QCQP.

use nalgebra::{DMatrix, DVector};

use crate::env::{rotation, StageCost};
use crate::error::{Error, Result};
use crate::opt_kernel::{
    linear_solve_matrix, nullspace_orthonormal, solve_dare, solve_qp, spectral_norm, Activity, QpProblem,
    QuadConstraint,
};

/// Which matrix and norm drive the radius recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TubeNorm {
    /// `‖Â − BK^S‖₂`, the induced norm of the ancillary closed loop.
    ClosedLoopTwo,
    /// `‖Â‖_∞` of the open-loop model.
    OpenLoopInf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeParams {
    pub a_hat: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub horizon: usize,
    pub gamma: f64,
    pub cost: StageCost,
    /// Bound on the additive noise.
    pub noise_bound: f64,
    /// Extra per-step disturbance covering model error on the unit ball.
    pub mismatch_bound: f64,
    pub norm: TubeNorm,
}

impl TubeParams {
    /// `Â = scale·R(angle)`, `B = I`, 2-D.
    pub fn rotation_model(angle_deg: f64, scale: f64, horizon: usize, gamma: f64, cost: StageCost) -> Self {
        TubeParams {
            a_hat: rotation(angle_deg) * scale,
            b: DMatrix::identity(2, 2),
            horizon,
            gamma,
            cost,
            noise_bound: 0.1,
            mismatch_bound: 0.0,
            norm: TubeNorm::ClosedLoopTwo,
        }
    }
}

/// `r_0 = 0`, `r_{k+1} = c·r_k + w` for `k < horizon`.
pub fn radii_recursion(contraction: f64, disturbance: f64, horizon: usize) -> Vec<f64> {
    let mut radii = vec![0.0];
    for k in 0..horizon {
        radii.push(contraction * radii[k] + disturbance);
    }
    radii
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeMpcProblem {
    pub a_hat: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub aux_gain: DMatrix<f64>,
    pub horizon: usize,
    pub gamma: f64,
    pub cost: StageCost,
    pub norm: TubeNorm,
    pub contraction: f64,
    pub disturbance_bound: f64,
    /// `r_0, …, r_N`.
    pub radii: Vec<f64>,
    // x̄_k = F_k x + G_k U
    free: Vec<DMatrix<f64>>,
    forced: Vec<DMatrix<f64>>,
}

/// Computes the auxiliary gain, the contraction factor and the radii, and
/// precomputes the condensed prediction matrices.
pub fn build_tube(params: &TubeParams) -> Result<TubeMpcProblem> {
    let n = params.a_hat.nrows();
    let m = params.b.ncols();
    if params.a_hat.ncols() != n || params.b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "A {:?}, B {:?}",
            params.a_hat.shape(),
            params.b.shape()
        )));
    }
    if params.horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    if !(params.gamma > 0.0 && params.gamma <= 1.0) {
        return Err(Error::InvalidParameter(format!("discount must lie in (0, 1], got {}", params.gamma)));
    }
    if !(params.noise_bound > 0.0 && params.noise_bound.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise bound must be positive, got {}", params.noise_bound)));
    }
    if !(params.mismatch_bound >= 0.0 && params.mismatch_bound.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "mismatch bound must be non-negative, got {}",
            params.mismatch_bound
        )));
    }
    if params.horizon > 1 && !(params.cost.input_weight > 0.0) {
        return Err(Error::InvalidParameter(
            "tail inputs need a positive input weight when the horizon exceeds 1".into(),
        ));
    }
    params.cost.check_dims(n, m)?;

    let dare = solve_dare(&params.a_hat, &params.b, &DMatrix::identity(n, n), &DMatrix::identity(m, m))?;
    let contraction = match params.norm {
        TubeNorm::ClosedLoopTwo => spectral_norm(&(&params.a_hat - &params.b * &dare.gain)),
        TubeNorm::OpenLoopInf => crate::opt_kernel::inf_norm(&params.a_hat),
    };
    let disturbance_bound = params.noise_bound + params.mismatch_bound;
    let radii = radii_recursion(contraction, disturbance_bound, params.horizon);
    if let Some((step, &radius)) = radii.iter().enumerate().find(|(_, r)| **r >= 1.0) {
        return Err(Error::TubeInfeasible { step, radius });
    }
    log::debug!("tube contraction {contraction:.4}, radii {radii:?}");

    let big = params.horizon * m;
    let mut free = vec![DMatrix::identity(n, n)];
    let mut forced = vec![DMatrix::zeros(n, big)];
    for k in 0..params.horizon {
        free.push(&params.a_hat * &free[k]);
        let mut g = &params.a_hat * &forced[k];
        g.view_mut((0, k * m), (n, m)).copy_from(&params.b);
        forced.push(g);
    }

    Ok(TubeMpcProblem {
        a_hat: params.a_hat.clone(),
        b: params.b.clone(),
        aux_gain: dare.gain,
        horizon: params.horizon,
        gamma: params.gamma,
        cost: params.cost.clone(),
        norm: params.norm,
        contraction,
        disturbance_bound,
        radii,
        free,
        forced,
    })
}

impl TubeMpcProblem {
    pub fn state_dim(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Tightened bound `1 − r_k` on `‖x̄_k‖`.
    pub fn tightened_radius(&self, k: usize) -> f64 {
        1.0 - self.radii[k]
    }

    fn selector(&self, k: usize) -> DMatrix<f64> {
        let m = self.input_dim();
        let mut e = DMatrix::zeros(m, self.horizon * m);
        e.view_mut((0, k * m), (m, m)).fill_with_identity();
        e
    }

    fn condensed(&self, x: &DVector<f64>, target: &DVector<f64>) -> QpProblem {
        let big = self.horizon * self.input_dim();
        let e0 = self.selector(0);
        let mut h = e0.transpose() * &e0;
        let mut g = -(e0.transpose() * target);
        let wx = self.cost.state_weight;
        let wu = self.cost.input_weight;
        for k in 1..self.horizon {
            let disc = self.gamma.powi(k as i32);
            let gk = &self.forced[k];
            let offset = &self.free[k] * x - &self.cost.x_ref;
            h += gk.transpose() * gk * (2.0 * disc * wx);
            g += gk.transpose() * offset * (2.0 * disc * wx);
            let ek = self.selector(k);
            h += ek.transpose() * &ek * (2.0 * disc * wu);
            g -= ek.transpose() * &self.cost.u_ref * (2.0 * disc * wu);
        }
        let quad = (1..=self.horizon)
            .map(|k| {
                let gk = &self.forced[k];
                let fx = &self.free[k] * x;
                let rho = self.tightened_radius(k);
                QuadConstraint {
                    p: gk.transpose() * gk,
                    q: gk.transpose() * &fx * 2.0,
                    r: fx.norm_squared() - rho * rho,
                }
            })
            .collect();
        crate::opt_kernel::linalg::symmetrize(&mut h);
        QpProblem::new(h, g)
            .with_affine(DMatrix::zeros(0, big), DVector::zeros(0))
            .with_quadratic(quad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub inputs: Vec<DVector<f64>>,
    /// `x̄_0, …, x̄_N`.
    pub states: Vec<DVector<f64>>,
    /// One multiplier per tightened constraint `k = 1..N`.
    pub multipliers: DVector<f64>,
    pub activity: Vec<Activity>,
    /// Indices `k` of strictly active tightened constraints.
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
    pub weak_activity: bool,
    /// `∂u_0/∂t`, `None` when LICQ fails.
    pub first_input_sensitivity: Option<DMatrix<f64>>,
}

impl MpcSolution {
    pub fn first_input(&self) -> &DVector<f64> {
        &self.inputs[0]
    }

    /// Largest `‖x̄_k‖ − (1 − r_k)` over `k = 1..N`.
    pub fn max_tightening_excess(&self, problem: &TubeMpcProblem) -> f64 {
        (1..self.states.len())
            .map(|k| self.states[k].norm() - problem.tightened_radius(k))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Solves the tube MPC projection of `u_target` at state `x`.
pub fn solve_projection_mpc(problem: &TubeMpcProblem, x: &DVector<f64>, u_target: &DVector<f64>) -> Result<MpcSolution> {
    let (n, m) = (problem.state_dim(), problem.input_dim());
    if x.len() != n || u_target.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries and target {}, expected {n} and {m}",
            x.len(),
            u_target.len()
        )));
    }
    let excess = x.norm_squared() - 1.0;
    if excess > 1e-9 {
        return Err(Error::Infeasible { violation: excess });
    }
    let qp = problem.condensed(x, u_target);
    let start = crate::opt_kernel::linear_solve(&qp.hessian, &(-&qp.linear))?;
    let sol = solve_qp(&qp, &start)?;

    let u = &sol.primal;
    let inputs: Vec<_> = (0..problem.horizon).map(|k| u.rows(k * m, m).into_owned()).collect();
    let states: Vec<_> = (0..=problem.horizon)
        .map(|k| &problem.free[k] * x + &problem.forced[k] * u)
        .collect();
    let active_set: Vec<usize> = sol.strictly_active().into_iter().map(|i| i + 1).collect();
    let weak_activity = !sol.weakly_active().is_empty();

    let jac = qp.constraint_jacobian(u);
    let j_active = DMatrix::from_fn(active_set.len(), jac.ncols(), |r, c| jac[(active_set[r] - 1, c)]);
    let mut w = qp.hessian.clone();
    for &k in &active_set {
        w += &qp.quadratic[k - 1].p * (2.0 * sol.multipliers[k - 1]);
    }
    let first_input_sensitivity = match nullspace_orthonormal(&j_active) {
        Ok(basis) if basis.ncols() == 0 => Some(DMatrix::zeros(m, m)),
        Ok(basis) => {
            let e0 = problem.selector(0);
            let e0n = &e0 * &basis;
            let reduced = basis.transpose() * &w * &basis;
            let mut s = &e0n * linear_solve_matrix(&reduced, &e0n.transpose())?;
            crate::opt_kernel::linalg::symmetrize(&mut s);
            Some(s)
        }
        Err(Error::RankDeficient { .. }) => None,
        Err(e) => return Err(e),
    };

    Ok(MpcSolution {
        inputs,
        states,
        multipliers: sol.multipliers.clone(),
        activity: sol.activity.clone(),
        active_set,
        kkt_residual: sol.kkt_residual,
        weak_activity,
        first_input_sensitivity,
    })
}

/// `∇_θu_0 = ∇_θπ · ∂u_0/∂t` for a target `t = π_θ(x)`.
pub fn mpc_first_input_sensitivity(solution: &MpcSolution, dpi_dtheta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if solution.weak_activity {
        return Err(Error::WeakActivity);
    }
    let s = solution.first_input_sensitivity.as_ref().ok_or(Error::LicqViolation)?;
    if dpi_dtheta.ncols() != s.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "policy Jacobian has {} columns, input dimension is {}",
            dpi_dtheta.ncols(),
            s.nrows()
        )));
    }
    Ok(dpi_dtheta * s)
}

/// First input of the tube MPC with the sampled input as target.
pub fn mpc_stochastic_projection(problem: &TubeMpcProblem, x: &DVector<f64>, u_s: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(solve_projection_mpc(problem, x, u_s)?.inputs.swap_remove(0))
}
