//! LSTD critics: a linear-in-features value function and the compatible
//! advantage `A_w(x, u_s) = wᵀψ(x, u_s)` with `ψ = ∇_θ log π_θ(u_s|x)`.
//!
//! Every solve goes through [`lstd_solve`], which adds an optional ridge
//! `λI`, rejects numerically singular systems and reports the relative
//! residual of the solved system.

use nalgebra::{DMatrix, DVector};

use crate::env::Transition;
use crate::error::{Error, Result};
use crate::opt_kernel::linear_solve;
use crate::policy_grad::{score, GaussianPolicy};

/// Systems whose singular values spread further than this are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

pub trait FeatureMap {
    fn dim(&self) -> usize;
    fn features(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `[1, x_1, …, x_d, x_i x_j (i ≤ j)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadraticFeatures {
    pub input_dim: usize,
}

impl QuadraticFeatures {
    /// Position of `x_i x_j` (`i ≤ j`) in the feature vector.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let d = self.input_dim;
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        1 + d + i * d - i * (i + 1) / 2 + j
    }
}

impl FeatureMap for QuadraticFeatures {
    fn dim(&self) -> usize {
        let d = self.input_dim;
        1 + d + d * (d + 1) / 2
    }

    fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.input_dim;
        let mut f = Vec::with_capacity(self.dim());
        f.push(1.0);
        f.extend(x.iter());
        for i in 0..d {
            for j in i..d {
                f.push(x[i] * x[j]);
            }
        }
        DVector::from_vec(f)
    }
}

/// Features from a closure.
pub struct FnFeatures<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> FeatureMap for FnFeatures<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
}

/// `c + pᵀx + xᵀPx`, read off [`QuadraticFeatures`] weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub constant: f64,
    pub linear: DVector<f64>,
    pub quadratic: DMatrix<f64>,
}

impl QuadraticValue {
    pub fn from_weights(dim: usize, weights: &DVector<f64>) -> Result<Self> {
        let basis = QuadraticFeatures { input_dim: dim };
        if weights.len() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for a {}-feature basis",
                weights.len(),
                basis.dim()
            )));
        }
        let mut quadratic = DMatrix::zeros(dim, dim);
        let mut k = 1 + dim;
        for i in 0..dim {
            for j in i..dim {
                if i == j {
                    quadratic[(i, i)] = weights[k];
                } else {
                    quadratic[(i, j)] = 0.5 * weights[k];
                    quadratic[(j, i)] = 0.5 * weights[k];
                }
                k += 1;
            }
        }
        Ok(QuadraticValue {
            constant: weights[0],
            linear: weights.rows(1, dim).into_owned(),
            quadratic,
        })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.linear.dot(x) + x.dot(&(&self.quadratic * x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstdFit {
    pub weights: DVector<f64>,
    /// `‖Aw − b‖_∞ / max(1, ‖b‖_∞)` on the solved system.
    pub residual: f64,
    pub condition: f64,
}

impl LstdFit {
    pub fn value<F: FeatureMap + ?Sized>(&self, features: &F, x: &DVector<f64>) -> f64 {
        self.weights.dot(&features.features(x))
    }
}

/// Solves `(A + λI) w = b`, failing with `SingularGram` when the system is
/// numerically singular. The LSTD systems below are batch averages, so the
/// ridge does not scale with the batch size.
pub fn lstd_solve(mut a: DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<LstdFit> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidParameter(format!("ridge must be non-negative, got {ridge}")));
    }
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(smax > 0.0) || condition > CONDITION_LIMIT {
        return Err(Error::SingularGram(format!(
            "condition number {condition:.3e} over {} features",
            a.nrows()
        )));
    }
    log::debug!("LSTD system condition {condition:.3e}");
    let weights = linear_solve(&a, b).map_err(|e| Error::SingularGram(e.to_string()))?;
    let residual = (&a * &weights - b).amax() / b.amax().max(1.0);
    Ok(LstdFit {
        weights,
        residual,
        condition,
    })
}

/// LSTD(0) for the value of the behaviour policy:
/// `Σ φ(x)(φ(x) − γφ(x⁺))ᵀ w = Σ φ(x) L`.
pub fn lstd_v<F: FeatureMap + ?Sized>(batch: &[Transition], features: &F, gamma: f64, ridge: f64) -> Result<LstdFit> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = features.dim();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for tr in batch {
        let phi = features.features(&tr.x);
        let next = features.features(&tr.x_next);
        a += &phi * (&phi - next * gamma).transpose();
        b += &phi * tr.cost;
    }
    let n = batch.len() as f64;
    lstd_solve(a / n, &(b / n), ridge)
}

/// Relative eigenvalue cutoff for the rank of the score Gram matrix.
const RANK_TOLERANCE: f64 = 1e-10;

fn symmetric_rank(a: &DMatrix<f64>) -> usize {
    let ev = a.clone().symmetric_eigenvalues();
    let top = ev.amax();
    ev.iter().filter(|e| **e > RANK_TOLERANCE * top).count()
}

/// Least-squares fit of `δ = L + γV̂(x⁺) − V̂(x)` onto the score at the
/// unprojected sample.
///
/// The parameters `(û, x̂, K)` are redundant (`û + Kx̂` is what matters), so
/// the score Gram matrix is singular in the directions no score can ever
/// take. Those directions are removed by an eigen-decomposition and the
/// minimum-norm solution is returned. The batch counts as under-excited when
/// the Gram rank falls short of the rank of `Σ ∇_θπ̄ ∇_θπ̄ᵀ`, the span the
/// scores would cover with enough samples.
pub fn lstd_compatible_advantage<F: FeatureMap + ?Sized>(
    batch: &[Transition],
    value: &LstdFit,
    features: &F,
    policy: &GaussianPolicy,
    gamma: f64,
    ridge: f64,
) -> Result<LstdFit> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidParameter(format!("ridge must be non-negative, got {ridge}")));
    }
    let p = policy.mean.param_count();
    let mut gram = DMatrix::zeros(p, p);
    let mut span = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for tr in batch {
        let psi = score(policy, &tr.x, &tr.u_s);
        let jac = policy.mean.jacobian(&tr.x);
        let delta = tr.cost + gamma * value.value(features, &tr.x_next) - value.value(features, &tr.x);
        gram += &psi * psi.transpose();
        span += &jac * jac.transpose();
        rhs += psi * delta;
    }
    let n = batch.len() as f64;
    gram /= n;
    rhs /= n;
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let needed = symmetric_rank(&span);
    let eig = gram.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let kept: Vec<usize> = (0..p).filter(|&i| eig.eigenvalues[i] > RANK_TOLERANCE * top).collect();
    if kept.len() < needed || kept.is_empty() {
        return Err(Error::SingularGram(format!(
            "score Gram rank {} below the {needed} directions the policy can excite",
            kept.len()
        )));
    }
    let mut weights = DVector::zeros(p);
    let mut smallest = f64::INFINITY;
    for &i in &kept {
        let v = eig.eigenvectors.column(i);
        weights += v * (v.dot(&rhs) / eig.eigenvalues[i]);
        smallest = smallest.min(eig.eigenvalues[i]);
    }
    let residual = (&gram * &weights - &rhs).amax() / rhs.amax().max(1.0);
    let condition = top / smallest;
    log::debug!("advantage regression: rank {} of {p}, condition {condition:.3e}", kept.len());
    Ok(LstdFit {
        weights,
        residual,
        condition,
    })
}

/// `wᵀψ(x, u_s)`.
pub fn advantage_estimate(weights: &DVector<f64>, policy: &GaussianPolicy, x: &DVector<f64>, u_s: &DVector<f64>) -> f64 {
    weights.dot(&score(policy, x, u_s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticWeights {
    pub value: LstdFit,
    pub advantage: LstdFit,
}
