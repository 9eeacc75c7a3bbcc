//! Oracles shared by the integration tests. Nothing here calls the solvers
//! under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use safeproj::safe_set::ConstraintSet;

/// Input-space instance: halfspaces `aᵢᵀu ≤ bᵢ` and at most one ball.
#[derive(Debug, Clone)]
pub struct Instance {
    pub halfspaces: Vec<(DVector<f64>, f64)>,
    pub ball: Option<(DVector<f64>, f64)>,
    pub target: DVector<f64>,
}

impl Instance {
    pub fn dim(&self) -> usize {
        self.target.len()
    }

    /// The instance as a set whose constraints ignore a state of size `state_dim`.
    pub fn to_set(&self, state_dim: usize) -> ConstraintSet {
        let mut set = ConstraintSet::new(state_dim, self.dim());
        for (a, b) in &self.halfspaces {
            set = set.with_halfspace(a.as_slice(), *b).unwrap();
        }
        if let Some((c, r)) = &self.ball {
            set = set.with_ball(c.as_slice(), *r).unwrap();
        }
        set
    }

    pub fn feasible(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.halfspaces.iter().all(|(a, b)| a.dot(u) <= b + tol)
            && self.ball.as_ref().is_none_or(|(c, r)| (u - c).norm() <= r + tol)
    }
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Random instance with a strictly feasible point and a target that is
/// usually outside the set.
pub fn random_instance<R: Rng>(rng: &mut R, dim: usize, halfspaces: usize, with_ball: bool) -> Instance {
    let interior = gaussian_vec(rng, dim) * 0.3;
    let hs = (0..halfspaces)
        .map(|_| {
            let a = gaussian_vec(rng, dim).normalize();
            let b = a.dot(&interior) + rng.random_range(0.05..1.0);
            (a, b)
        })
        .collect();
    let ball = with_ball.then(|| {
        let c = &interior + gaussian_vec(rng, dim) * 0.2;
        let r = (&interior - &c).norm() + rng.random_range(0.3..1.5);
        (c, r)
    });
    Instance {
        halfspaces: hs,
        ball,
        target: gaussian_vec(rng, dim) * 2.0,
    }
}

/// Closest point to `t` on `{u : Au = b}` (rows of `a` independent).
fn affine_projection(a: &DMatrix<f64>, b: &DVector<f64>, t: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return Some(t.clone());
    }
    let gram = a * a.transpose();
    let chol = gram.cholesky()?;
    let lambda = chol.solve(&(a * t - b));
    Some(t - a.transpose() * lambda)
}

/// Projection by enumerating every candidate active set. Each candidate is
/// the nearest point to the target on the face it defines (with the ball
/// taken as its sphere); the answer is the nearest feasible candidate.
/// Exponential in the number of constraints, fine up to a dozen.
pub fn brute_force_projection(inst: &Instance, tol: f64) -> DVector<f64> {
    let n = inst.dim();
    let k = inst.halfspaces.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let ball_options: &[bool] = if inst.ball.is_some() { &[false, true] } else { &[false] };
    for mask in 0u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        for &use_ball in ball_options {
            if idx.len() + use_ball as usize > n {
                continue;
            }
            let a = DMatrix::from_fn(idx.len(), n, |r, c| inst.halfspaces[idx[r]].0[c]);
            let b = DVector::from_fn(idx.len(), |r, _| inst.halfspaces[idx[r]].1);
            let Some(t_face) = affine_projection(&a, &b, &inst.target) else {
                continue;
            };
            let candidate = if use_ball {
                let (c, r) = inst.ball.as_ref().unwrap();
                // Centre of the circle cut from the sphere by the face.
                let c_face = affine_projection(&a, &b, c).unwrap();
                let d2 = (&c_face - c).norm_squared();
                if d2 >= r * r {
                    continue;
                }
                let rho = (r * r - d2).sqrt();
                let dir = &t_face - &c_face;
                if dir.norm() < 1e-12 {
                    continue;
                }
                &c_face + dir.normalize() * rho
            } else {
                t_face
            };
            if !inst.feasible(&candidate, tol) {
                continue;
            }
            let d = (&candidate - &inst.target).norm();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, candidate));
            }
        }
    }
    best.expect("feasible instance has a projection").1
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical value of the one-sample KS statistic at level 0.001.
pub fn ks_critical(n: usize) -> f64 {
    1.95 / (n as f64).sqrt()
}

pub fn central_difference(f: impl Fn(&DVector<f64>) -> DVector<f64>, theta: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..theta.len())
        .map(|k| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            (f(&tp) - f(&tm)) / (2.0 * h)
        })
        .collect();
    // Rows are parameters, matching the layout of `policy_jacobian_projected`.
    DMatrix::from_fn(theta.len(), cols[0].len(), |r, c| cols[r][c])
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}
