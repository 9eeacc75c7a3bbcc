//! Affine Gaussian policies and policy-gradient estimators.
//!
//! Two pairs of estimators are provided. The corrected ones account for the
//! projection onto the safe set, the naive ones do not and are kept to
//! demonstrate the resulting bias.
//!
//! * deterministic: `∇_θπ · M · ∇_uA` against `∇_θπ · ∇_uA`
//! * stochastic: `∇_θ log π(u_s|x) · A` with the score taken at the sampled
//!   input `u_s` against the score taken at the projected input

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::projection::{policy_jacobian_projected, ProjectionOutcome};

/// Mean map `π̄_θ(x) = û − K(x − x̂)`.
///
/// The flat parameter vector is ordered `[û (m), x̂ (n), K (m×n, row-major)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub u_ref: DVector<f64>,
    pub x_ref: DVector<f64>,
    pub gain: DMatrix<f64>,
}

impl AffinePolicy {
    pub fn new(u_ref: DVector<f64>, x_ref: DVector<f64>, gain: DMatrix<f64>) -> Result<Self> {
        if gain.shape() != (u_ref.len(), x_ref.len()) {
            return Err(Error::DimensionMismatch(format!(
                "gain is {:?}, expected {}x{}",
                gain.shape(),
                u_ref.len(),
                x_ref.len()
            )));
        }
        Ok(AffinePolicy { u_ref, x_ref, gain })
    }

    pub fn from_params(state_dim: usize, input_dim: usize, theta: &DVector<f64>) -> Result<Self> {
        let (n, m) = (state_dim, input_dim);
        if theta.len() != m + n + m * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                m + n + m * n,
                theta.len()
            )));
        }
        Ok(AffinePolicy {
            u_ref: theta.rows(0, m).into_owned(),
            x_ref: theta.rows(m, n).into_owned(),
            gain: DMatrix::from_row_slice(m, n, &theta.as_slice()[m + n..]),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.x_ref.len()
    }

    pub fn input_dim(&self) -> usize {
        self.u_ref.len()
    }

    pub fn param_count(&self) -> usize {
        let (n, m) = (self.state_dim(), self.input_dim());
        m + n + m * n
    }

    pub fn params(&self) -> DVector<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        theta.extend(self.u_ref.iter());
        theta.extend(self.x_ref.iter());
        for i in 0..self.input_dim() {
            theta.extend(self.gain.row(i).iter());
        }
        DVector::from_vec(theta)
    }

    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.u_ref - &self.gain * (x - &self.x_ref)
    }

    /// `∇_θπ̄_θ(x)`, parameters by inputs.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut jac = DMatrix::zeros(self.param_count(), m);
        for i in 0..m {
            jac[(i, i)] = 1.0;
        }
        // ∂π̄/∂x̂ = K, laid out as ∂π̄_i/∂x̂_j in row m + j
        for j in 0..n {
            for i in 0..m {
                jac[(m + j, i)] = self.gain[(i, j)];
            }
        }
        let dx = x - &self.x_ref;
        for i in 0..m {
            for j in 0..n {
                jac[(m + n + i * n + j, i)] = -dx[j];
            }
        }
        jac
    }
}

/// Isotropic Gaussian around an affine mean; `sigma` is the standard
/// deviation of each input coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: AffinePolicy,
    pub sigma: f64,
}

impl GaussianPolicy {
    pub fn new(mean: AffinePolicy, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        Ok(GaussianPolicy { mean, sigma })
    }

    pub fn with_params(&self, theta: &DVector<f64>) -> Result<Self> {
        Ok(GaussianPolicy {
            mean: AffinePolicy::from_params(self.mean.state_dim(), self.mean.input_dim(), theta)?,
            sigma: self.sigma,
        })
    }

    pub fn log_density(&self, x: &DVector<f64>, u_s: &DVector<f64>) -> f64 {
        let m = u_s.len() as f64;
        let r2 = (u_s - self.mean.mean(x)).norm_squared();
        -0.5 * r2 / (self.sigma * self.sigma) - m * (self.sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// `u_s = π̄_θ(x) + σ z` with `z` standard normal.
pub fn sample_action<R: Rng + ?Sized>(policy: &GaussianPolicy, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let mean = policy.mean.mean(x);
    DVector::from_fn(mean.len(), |i, _| {
        let z: f64 = StandardNormal.sample(rng);
        mean[i] + policy.sigma * z
    })
}

/// `∇_θ log π_θ(u_s|x) = ∇_θπ̄ (u_s − π̄) / σ²`.
pub fn score(policy: &GaussianPolicy, x: &DVector<f64>, u_s: &DVector<f64>) -> DVector<f64> {
    let resid = u_s - policy.mean.mean(x);
    policy.mean.jacobian(x) * resid / (policy.sigma * policy.sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub gradient: DVector<f64>,
    pub standard_error: DVector<f64>,
    pub samples: usize,
    /// Samples excluded because a constraint was weakly active.
    pub dropped: usize,
    /// All per-sample terms coincide, so the spread carries no information.
    pub degenerate: bool,
}

impl GradientEstimate {
    fn from_terms(terms: &[DVector<f64>], p: usize, dropped: usize) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = terms.len() as f64;
        let mut mean = DVector::zeros(p);
        for t in terms {
            mean += t;
        }
        mean /= n;
        let mut var = DVector::zeros(p);
        for t in terms {
            var += (t - &mean).map(|d| d * d);
        }
        let standard_error = if terms.len() > 1 {
            var.map(|v| (v / (n - 1.0) / n).sqrt())
        } else {
            DVector::from_element(p, f64::INFINITY)
        };
        let degenerate = terms.len() > 1 && terms.iter().all(|t| (t - &terms[0]).amax() <= 1e-12 * (1.0 + t.amax()));
        Ok(GradientEstimate {
            gradient: mean,
            standard_error,
            samples: terms.len(),
            dropped,
            degenerate,
        })
    }
}

/// One state of a deterministic batch.
#[derive(Debug, Clone)]
pub struct DetSample {
    pub x: DVector<f64>,
    pub outcome: ProjectionOutcome,
    /// `∇_uA` evaluated at the projected input.
    pub advantage_gradient: DVector<f64>,
}

fn det_terms(policy: &AffinePolicy, batch: &[DetSample], corrected: bool) -> Result<GradientEstimate> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut dropped = 0;
    for s in batch {
        if s.outcome.weak_activity {
            dropped += 1;
            continue;
        }
        let jac = policy.jacobian(&s.x);
        let jac = if corrected {
            policy_jacobian_projected(&s.outcome, &jac)?
        } else {
            jac
        };
        terms.push(jac * &s.advantage_gradient);
    }
    if dropped > 0 {
        log::debug!("dropped {dropped} weakly active samples of {}", batch.len());
    }
    GradientEstimate::from_terms(&terms, policy.param_count(), dropped)
}

/// Mean of `∇_θπ_θ(x) · M(x) · ∇_uA`. Weakly active samples are dropped and
/// counted.
pub fn det_policy_gradient_corrected(policy: &AffinePolicy, batch: &[DetSample]) -> Result<GradientEstimate> {
    det_terms(policy, batch, true)
}

/// Same as [`det_policy_gradient_corrected`] with `M` left out. The same
/// samples are dropped so the two estimates stay comparable.
pub fn det_policy_gradient_naive(policy: &AffinePolicy, batch: &[DetSample]) -> Result<GradientEstimate> {
    det_terms(policy, batch, false)
}

/// One draw of a stochastic batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StochSample {
    pub x: DVector<f64>,
    pub u_s: DVector<f64>,
    pub u_proj: DVector<f64>,
    pub advantage: f64,
}

/// Mean of `∇_θ log π_θ(u_s|x) · A` with the score at the unprojected sample.
pub fn stoch_policy_gradient_corrected(policy: &GaussianPolicy, batch: &[StochSample]) -> Result<GradientEstimate> {
    let terms: Vec<_> = batch.iter().map(|s| score(policy, &s.x, &s.u_s) * s.advantage).collect();
    GradientEstimate::from_terms(&terms, policy.mean.param_count(), 0)
}

/// Score taken at the projected input instead. Biased whenever projection
/// moves samples.
pub fn stoch_policy_gradient_naive(policy: &GaussianPolicy, batch: &[StochSample]) -> Result<GradientEstimate> {
    let terms: Vec<_> = batch.iter().map(|s| score(policy, &s.x, &s.u_proj) * s.advantage).collect();
    GradientEstimate::from_terms(&terms, policy.mean.param_count(), 0)
}

/// `θ − step·g`. The estimators return gradients of a cost, so this is a
/// descent step.
pub fn ascend(theta: &DVector<f64>, estimate: &GradientEstimate, step_size: f64) -> Result<DVector<f64>> {
    if !(step_size >= 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidParameter(format!("step size must be non-negative, got {step_size}")));
    }
    if estimate.gradient.len() != theta.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries, θ has {}",
            estimate.gradient.len(),
            theta.len()
        )));
    }
    if estimate.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(theta - &estimate.gradient * step_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;
    use crate::safe_set::ConstraintSet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn policy() -> GaussianPolicy {
        let mean = AffinePolicy::new(v(&[0.3, -0.2]), v(&[0.1, 0.5]), DMatrix::from_row_slice(2, 2, &[0.4, -0.1, 0.2, 0.7]))
            .unwrap();
        GaussianPolicy::new(mean, 0.3).unwrap()
    }

    #[test]
    fn params_round_trip() {
        let p = policy().mean;
        let back = AffinePolicy::from_params(2, 2, &p.params()).unwrap();
        assert_eq!(back, p);
        assert!(AffinePolicy::from_params(2, 2, &v(&[1.0])).is_err());
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(theta in prop::collection::vec(-2.0f64..2.0, 8), x in prop::collection::vec(-2.0f64..2.0, 2)) {
            let theta = DVector::from_vec(theta);
            let x = DVector::from_vec(x);
            let p = AffinePolicy::from_params(2, 2, &theta).unwrap();
            let jac = p.jacobian(&x);
            let h = 1e-6;
            for k in 0..8 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let d = (AffinePolicy::from_params(2, 2, &tp).unwrap().mean(&x)
                    - AffinePolicy::from_params(2, 2, &tm).unwrap().mean(&x)) / (2.0 * h);
                for i in 0..2 {
                    prop_assert!((d[i] - jac[(k, i)]).abs() <= 1e-7);
                }
            }
        }

        #[test]
        fn score_matches_finite_differences(us in prop::collection::vec(-2.0f64..2.0, 2), x in prop::collection::vec(-2.0f64..2.0, 2)) {
            let pol = policy();
            let x = DVector::from_vec(x);
            let us = DVector::from_vec(us);
            let s = score(&pol, &x, &us);
            let theta = pol.mean.params();
            let h = 1e-5;
            for k in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let d = (pol.with_params(&tp).unwrap().log_density(&x, &us)
                    - pol.with_params(&tm).unwrap().log_density(&x, &us)) / (2.0 * h);
                prop_assert!((d - s[k]).abs() <= 1e-6 * (1.0 + d.abs()));
            }
            let mirrored = pol.mean.mean(&x) * 2.0 - &us;
            prop_assert!((score(&pol, &x, &mirrored) + &s).amax() < 1e-10);
        }
    }

    #[test]
    fn score_vanishes_at_mean() {
        let pol = policy();
        let x = v(&[0.4, -0.3]);
        assert_eq!(score(&pol, &x, &pol.mean.mean(&x)), DVector::zeros(8));
    }

    #[test]
    fn sampling_is_centered_and_reproducible() {
        let pol = policy();
        let x = v(&[1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = DVector::zeros(2);
        let mut score_sum = DVector::zeros(8);
        let mut score_sq = DVector::zeros(8);
        for _ in 0..n {
            let u = sample_action(&pol, &x, &mut rng);
            let s = score(&pol, &x, &u);
            score_sq += s.map(|e| e * e);
            score_sum += s;
            sum += u;
        }
        let mean = sum / n as f64;
        let se = pol.sigma / (n as f64).sqrt();
        assert!((mean - pol.mean.mean(&x)).amax() < 4.0 * se);
        for k in 0..8 {
            let m = score_sum[k] / n as f64;
            let sd = (score_sq[k] / n as f64 - m * m).sqrt();
            assert!(m.abs() < 4.0 * sd / (n as f64).sqrt() + 1e-12, "coordinate {k}");
        }

        let a = sample_action(&pol, &x, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_action(&pol, &x, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_sigma_returns_the_mean() {
        let mut pol = policy();
        pol.sigma = 1e-14;
        let x = v(&[0.2, 0.2]);
        let u = sample_action(&pol, &x, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((u - pol.mean.mean(&x)).amax() < 1e-12);
        assert!(GaussianPolicy::new(pol.mean.clone(), 0.0).is_err());
    }

    fn scalar_policy(theta: f64) -> AffinePolicy {
        AffinePolicy::new(v(&[theta]), v(&[0.0]), DMatrix::zeros(1, 1)).unwrap()
    }

    fn det_sample(theta: f64) -> DetSample {
        // u⊥ = min(θ, 1), A(u) = (u − 3)²
        let set = ConstraintSet::new(1, 1).with_halfspace(&[1.0], 1.0).unwrap();
        let x = v(&[0.0]);
        let outcome = project(&set, &x, &v(&[theta])).unwrap();
        let u = outcome.u_proj[0];
        DetSample {
            x,
            outcome,
            advantage_gradient: v(&[2.0 * (u - 3.0)]),
        }
    }

    #[test]
    fn one_dimensional_clipping() {
        for theta in [0.2, 0.7] {
            let p = scalar_policy(theta);
            let b = [det_sample(theta)];
            let c = det_policy_gradient_corrected(&p, &b).unwrap();
            let n = det_policy_gradient_naive(&p, &b).unwrap();
            assert!((c.gradient[0] - 2.0 * (theta - 3.0)).abs() < 1e-12);
            assert_eq!(c.gradient, n.gradient);
        }
        let p = scalar_policy(1.5);
        let b = [det_sample(1.5)];
        assert_eq!(det_policy_gradient_corrected(&p, &b).unwrap().gradient[0], 0.0);
        assert!((det_policy_gradient_naive(&p, &b).unwrap().gradient[0] - 2.0 * (1.0 - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn mixed_batch_decomposes() {
        let thetas = [0.1, 0.5, 1.3, 2.0];
        let p = scalar_policy(0.0);
        let batch: Vec<_> = thetas.iter().map(|&t| det_sample(t)).collect();
        let c = det_policy_gradient_corrected(&p, &batch).unwrap();
        let n = det_policy_gradient_naive(&p, &batch).unwrap();
        // only the two clipped samples differ, each by A'(1) / 4
        assert!((n.gradient[0] - c.gradient[0] - 2.0 * (-4.0) / 4.0).abs() < 1e-12);

        let mut shuffled = batch.clone();
        shuffled.reverse();
        let c2 = det_policy_gradient_corrected(&p, &shuffled).unwrap();
        assert!((c2.gradient - c.gradient).amax() < 1e-15);
    }

    #[test]
    fn weak_samples_are_dropped_and_counted() {
        let p = scalar_policy(1.0);
        let batch = [det_sample(1.0), det_sample(0.5)];
        assert!(batch[0].outcome.weak_activity);
        let c = det_policy_gradient_corrected(&p, &batch).unwrap();
        assert_eq!((c.samples, c.dropped), (1, 1));
        assert_eq!(det_policy_gradient_corrected(&p, &[]), Err(Error::EmptyBatch));
    }

    #[test]
    fn stochastic_estimators() {
        let pol = policy();
        let x = v(&[0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<_> = (0..50)
            .map(|_| {
                let u = sample_action(&pol, &x, &mut rng);
                StochSample {
                    x: x.clone(),
                    u_s: u.clone(),
                    u_proj: u.clone(),
                    advantage: u.norm(),
                }
            })
            .collect();
        let c = stoch_policy_gradient_corrected(&pol, &batch).unwrap();
        let n = stoch_policy_gradient_naive(&pol, &batch).unwrap();
        assert_eq!(c, n);
        assert!(!c.degenerate);

        let zero: Vec<_> = batch.iter().map(|s| StochSample { advantage: 0.0, ..s.clone() }).collect();
        assert_eq!(stoch_policy_gradient_corrected(&pol, &zero).unwrap().gradient, DVector::zeros(8));

        let pinned: Vec<_> = batch.iter().map(|s| StochSample { u_proj: v(&[1.0, 1.0]), advantage: 1.0, ..s.clone() }).collect();
        assert!(stoch_policy_gradient_naive(&pol, &pinned).unwrap().degenerate);
        assert!(!stoch_policy_gradient_corrected(&pol, &pinned).unwrap().degenerate);
    }

    #[test]
    fn step_rules() {
        let theta = v(&[1.0, 2.0]);
        let est = |g: &[f64]| GradientEstimate {
            gradient: v(g),
            standard_error: v(&[0.0, 0.0]),
            samples: 1,
            dropped: 0,
            degenerate: false,
        };
        assert_eq!(ascend(&theta, &est(&[0.0, 0.0]), 0.5).unwrap(), theta);
        let g = est(&[1.0, -1.0]);
        let once = ascend(&theta, &g, 0.2).unwrap();
        let twice = ascend(&once, &g, 0.2).unwrap();
        assert!((twice - ascend(&theta, &g, 0.4).unwrap()).amax() < 1e-15);
        assert_eq!(ascend(&theta, &est(&[f64::NAN, 0.0]), 0.1), Err(Error::NonFiniteGradient));
        assert!(ascend(&theta, &g, -1.0).is_err());
    }
}
