//! Safe Q-learning with a Q-function that is quadratic in `z = (x, u)`.
//!
//! The policy is either the constrained minimizer of `Q(x, ·)` over `S(x)`,
//! or the projection of the unconstrained minimizer. The first is optimal
//! for the model Q; the second can be strictly worse whenever the
//! curvature in `u` is not isotropic.

use nalgebra::{DMatrix, DVector};

use crate::critic::{lstd_solve, FeatureMap, LstdFit, QuadraticFeatures};
use crate::error::{Error, Result};
use crate::opt_kernel::{linear_solve, solve_qp};
use crate::projection::project;
use crate::safe_set::ConstraintSet;

/// Smallest admissible eigenvalue of `∂²Q/∂u²`.
pub const MIN_CURVATURE: f64 = 1e-9;

/// `Q(x, u) = θ_Qᵀ φ(z)` over [`QuadraticFeatures`] of `z = (x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticQ {
    pub state_dim: usize,
    pub input_dim: usize,
    pub weights: DVector<f64>,
}

impl QuadraticQ {
    pub fn from_weights(state_dim: usize, input_dim: usize, weights: DVector<f64>) -> Result<Self> {
        let basis = QuadraticFeatures {
            input_dim: state_dim + input_dim,
        };
        if weights.len() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for a {}-feature basis",
                weights.len(),
                basis.dim()
            )));
        }
        Ok(QuadraticQ {
            state_dim,
            input_dim,
            weights,
        })
    }

    /// State-independent `½uᵀHu + hᵀu + c`.
    pub fn from_input_form(state_dim: usize, hessian: &DMatrix<f64>, linear: &DVector<f64>, offset: f64) -> Result<Self> {
        let m = linear.len();
        if hessian.shape() != (m, m) {
            return Err(Error::DimensionMismatch(format!("Hessian is {:?} for {m} inputs", hessian.shape())));
        }
        let basis = QuadraticFeatures {
            input_dim: state_dim + m,
        };
        let mut w = DVector::zeros(basis.dim());
        w[0] = offset;
        for a in 0..m {
            w[1 + state_dim + a] = linear[a];
            w[basis.pair_index(state_dim + a, state_dim + a)] = 0.5 * hessian[(a, a)];
            for b in a + 1..m {
                w[basis.pair_index(state_dim + a, state_dim + b)] = 0.5 * (hessian[(a, b)] + hessian[(b, a)]);
            }
        }
        QuadraticQ::from_weights(state_dim, m, w)
    }

    fn basis(&self) -> QuadraticFeatures {
        QuadraticFeatures {
            input_dim: self.state_dim + self.input_dim,
        }
    }

    fn joint(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.state_dim + self.input_dim);
        z.rows_mut(0, self.state_dim).copy_from(x);
        z.rows_mut(self.state_dim, self.input_dim).copy_from(u);
        z
    }

    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.weights.dot(&self.basis().features(&self.joint(x, u)))
    }

    /// `∂²Q/∂u²`, independent of `x`.
    pub fn input_hessian(&self) -> DMatrix<f64> {
        let basis = self.basis();
        let n = self.state_dim;
        DMatrix::from_fn(self.input_dim, self.input_dim, |a, b| {
            let w = self.weights[basis.pair_index(n + a, n + b)];
            if a == b {
                2.0 * w
            } else {
                w
            }
        })
    }

    /// `∂Q/∂u` at `u = 0`.
    pub fn input_linear(&self, x: &DVector<f64>) -> DVector<f64> {
        let basis = self.basis();
        let n = self.state_dim;
        DVector::from_fn(self.input_dim, |a, _| {
            let mut g = self.weights[1 + n + a];
            for i in 0..n {
                g += self.weights[basis.pair_index(i, n + a)] * x[i];
            }
            g
        })
    }

    pub fn min_curvature(&self) -> f64 {
        self.input_hessian().symmetric_eigenvalues().min()
    }

    fn check_convex(&self) -> Result<()> {
        let min = self.min_curvature();
        if min < MIN_CURVATURE {
            return Err(Error::NotConvex { min_eigenvalue: min });
        }
        Ok(())
    }

    pub fn unconstrained_argmin(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_convex()?;
        linear_solve(&self.input_hessian(), &(-self.input_linear(x)))
    }
}

/// `argmin_u Q(x, u)` subject to `u ∈ S(x)`.
pub fn extract_safe_policy(q: &QuadraticQ, set: &ConstraintSet, x: &DVector<f64>) -> Result<DVector<f64>> {
    let start = q.unconstrained_argmin(x)?;
    if !set.state_admissible(x) {
        return Err(Error::InfeasibleSafeSet);
    }
    let (qp, _) = set.min_quadratic_qp(x, &q.input_hessian(), &q.input_linear(x))?;
    let sol = solve_qp(&qp, &start).map_err(|e| match e {
        Error::Infeasible { .. } => Error::InfeasibleSafeSet,
        other => other,
    })?;
    Ok(sol.primal)
}

/// Projection of the unconstrained minimizer onto `S(x)`.
pub fn extract_projected_policy(q: &QuadraticQ, set: &ConstraintSet, x: &DVector<f64>) -> Result<DVector<f64>> {
    let free = q.unconstrained_argmin(x)?;
    Ok(project(set, x, &free)?.u_proj)
}

/// `(x, u, L, x⁺, u⁺)` with `u⁺` drawn from the evaluated policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SarsaTransition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub cost: f64,
    pub x_next: DVector<f64>,
    pub u_next: DVector<f64>,
}

/// LSTDQ on an arbitrary basis of `z = (x, u)`.
pub fn lstdq_weights<F: FeatureMap + ?Sized>(
    batch: &[SarsaTransition],
    features: &F,
    gamma: f64,
    ridge: f64,
) -> Result<LstdFit> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = features.dim();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let stack = |x: &DVector<f64>, u: &DVector<f64>| {
        DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
    };
    for tr in batch {
        let phi = features.features(&stack(&tr.x, &tr.u));
        let next = features.features(&stack(&tr.x_next, &tr.u_next));
        a += &phi * (&phi - next * gamma).transpose();
        b += &phi * tr.cost;
    }
    let n = batch.len() as f64;
    lstd_solve(a / n, &(b / n), ridge)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFit {
    pub q: QuadraticQ,
    pub residual: f64,
    pub condition: f64,
}

/// SARSA-style LSTDQ on the quadratic basis.
pub fn fit_q_lstdq(batch: &[SarsaTransition], gamma: f64, ridge: f64) -> Result<QFit> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let (n, m) = (first.x.len(), first.u.len());
    let fit = lstdq_weights(batch, &QuadraticFeatures { input_dim: n + m }, gamma, ridge)?;
    Ok(QFit {
        q: QuadraticQ::from_weights(n, m, fit.weights)?,
        residual: fit.residual,
        condition: fit.condition,
    })
}
