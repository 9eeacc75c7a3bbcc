//! Small self-contained demonstrations, each producing CSV tables.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::env::{rotation, stream_rng, StageCost};
use crate::error::{Error, Result};
use crate::policy_grad::{
    det_policy_gradient_corrected, det_policy_gradient_naive, sample_action, stoch_policy_gradient_corrected,
    stoch_policy_gradient_naive, AffinePolicy, DetSample, GaussianPolicy, GradientEstimate, StochSample,
};
use crate::projection::{boundary_mass_histogram, project, HistogramBins};
use crate::q_safe::{extract_projected_policy, extract_safe_policy, QuadraticQ};
use crate::safe_set::ConstraintSet;

pub const DEMOS: [&str; 4] = ["fig1", "fig2", "bias-det", "bias-stoch"];

/// A named CSV artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub csv: String,
}

pub fn run_demo(name: &str, seed: u64) -> Result<Vec<Artifact>> {
    match name {
        "fig1" => fig1(),
        "fig2" => fig2(seed),
        "bias-det" => bias_det(),
        "bias-stoch" => bias_stoch(seed),
        other => Err(Error::UnknownDemo(other.to_string())),
    }
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

/// `Q(u) = (u₁ − 2)² + 10u₂²` over `u₁ + u₂ ≤ 0`.
pub fn fig1_instance() -> Result<(QuadraticQ, ConstraintSet)> {
    let q = QuadraticQ::from_input_form(1, &DMatrix::from_diagonal(&v(&[2.0, 20.0])), &v(&[-4.0, 0.0]), 4.0)?;
    let set = ConstraintSet::new(1, 2).with_halfspace(&[1.0, 1.0], 0.0)?;
    Ok((q, set))
}

fn fig1() -> Result<Vec<Artifact>> {
    let (q, set) = fig1_instance()?;
    let x = v(&[0.0]);
    let mut csv = String::from("policy,u1,u2,qvalue\n");
    for (label, u) in [
        ("safe", extract_safe_policy(&q, &set, &x)?),
        ("projected", extract_projected_policy(&q, &set, &x)?),
    ] {
        writeln!(csv, "{label},{},{},{}", u[0], u[1], q.value(&x, &u)).unwrap();
    }
    Ok(vec![Artifact {
        name: "fig1.csv".into(),
        csv,
    }])
}

fn fig2(seed: u64) -> Result<Vec<Artifact>> {
    let set = ConstraintSet::new(2, 2).with_ball(&[0.0, 0.0], 1.0)?;
    let x = v(&[0.0, 0.0]);
    let bins = HistogramBins {
        lower: [-1.2, -1.2],
        upper: [1.2, 1.2],
        counts: [48, 48],
    };
    let mut out = Vec::new();
    for (name, mean, stream) in [("fig2_far.csv", [2.0, 0.0], 0), ("fig2_centered.csv", [0.0, 0.0], 1)] {
        let policy = GaussianPolicy::new(AffinePolicy::new(v(&mean), v(&[0.0, 0.0]), DMatrix::zeros(2, 2))?, 0.3)?;
        let mut rng = stream_rng(seed, stream);
        let hist = boundary_mass_histogram(&set, &x, |r: &mut ChaCha8Rng| sample_action(&policy, &x, r), &mut rng, 20_000, bins)?;
        let mut buf = Vec::new();
        hist.write_csv(&mut buf)?;
        out.push(Artifact {
            name: name.into(),
            csv: String::from_utf8(buf).expect("CSV is ASCII"),
        });
    }
    Ok(out)
}

/// Noise-free plant `x⁺ = R(a)x + u` under a deterministic affine policy
/// projected onto a fixed input set, with the return truncated at `horizon`.
#[derive(Debug, Clone)]
pub struct DetBiasProblem {
    pub dynamics: DMatrix<f64>,
    pub set: ConstraintSet,
    pub cost: StageCost,
    pub gamma: f64,
    pub horizon: usize,
    pub x0: DVector<f64>,
}

impl DetBiasProblem {
    pub fn standard() -> Result<Self> {
        Ok(DetBiasProblem {
            dynamics: rotation(20.0),
            set: ConstraintSet::new(2, 2).with_halfspace(&[1.0, 1.0], 0.1)?,
            cost: StageCost::new(v(&[0.8, 0.5]), v(&[0.3, 0.2]), 1e-2, 1.0),
            gamma: 0.9,
            horizon: 30,
            x0: v(&[0.0, 1.0]),
        })
    }

    pub fn standard_policy() -> AffinePolicy {
        AffinePolicy::new(v(&[0.3, 0.2]), v(&[0.0, 0.0]), DMatrix::identity(2, 2) * 0.2).expect("consistent shapes")
    }

    pub fn discounted_return(&self, policy: &AffinePolicy) -> Result<f64> {
        let mut x = self.x0.clone();
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..self.horizon {
            let u = project(&self.set, &x, &policy.mean(&x))?.u_proj;
            total += disc * self.cost.eval(&x, &u);
            disc *= self.gamma;
            x = &self.dynamics * &x + u;
        }
        Ok(total)
    }

    /// One sample per time step carrying `γ^t ∇_uQ_t`, where `∇_uQ_t` comes
    /// from a backward pass through the projected closed loop. `horizon`
    /// times the batch mean of the corrected estimator is the exact gradient
    /// of the truncated return.
    pub fn samples(&self, policy: &AffinePolicy) -> Result<Vec<DetSample>> {
        let mut xs = Vec::with_capacity(self.horizon);
        let mut outcomes = Vec::with_capacity(self.horizon);
        let mut x = self.x0.clone();
        for _ in 0..self.horizon {
            let out = project(&self.set, &x, &policy.mean(&x))?;
            let next = &self.dynamics * &x + &out.u_proj;
            xs.push(x);
            outcomes.push(out);
            x = next;
        }
        let n = self.x0.len();
        let mut costate = DVector::zeros(n);
        let mut grads = vec![DVector::zeros(0); self.horizon];
        for t in (0..self.horizon).rev() {
            let out = &outcomes[t];
            let m = out.correction.as_ref().ok_or(Error::LicqViolation)?;
            let du_dx = m * -&policy.gain;
            let lx = (&xs[t] - &self.cost.x_ref) * (2.0 * self.cost.state_weight);
            let lu = (&out.u_proj - &self.cost.u_ref) * (2.0 * self.cost.input_weight);
            let q = lu + &costate * self.gamma;
            costate = lx + self.dynamics.transpose() * &costate * self.gamma + du_dx.transpose() * &q;
            grads[t] = q;
        }
        let mut disc = 1.0;
        let mut samples = Vec::with_capacity(self.horizon);
        for ((x, outcome), q) in xs.into_iter().zip(outcomes).zip(grads) {
            samples.push(DetSample {
                x,
                outcome,
                advantage_gradient: q * disc,
            });
            disc *= self.gamma;
        }
        Ok(samples)
    }

    /// `(corrected, naive)` gradients of the truncated return.
    pub fn gradients(&self, policy: &AffinePolicy) -> Result<(DVector<f64>, DVector<f64>)> {
        let samples = self.samples(policy)?;
        let scale = |e: GradientEstimate| e.gradient * e.samples as f64;
        Ok((
            scale(det_policy_gradient_corrected(policy, &samples)?),
            scale(det_policy_gradient_naive(policy, &samples)?),
        ))
    }
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

fn bias_det() -> Result<Vec<Artifact>> {
    let problem = DetBiasProblem::standard()?;
    let policy = DetBiasProblem::standard_policy();
    let (corrected, naive) = problem.gradients(&policy)?;
    let theta = policy.params();
    let h = 1e-6;
    let fd = DVector::from_fn(theta.len(), |k, _| {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[k] += h;
        tm[k] -= h;
        let f = |t: &DVector<f64>| {
            AffinePolicy::from_params(2, 2, t)
                .and_then(|p| problem.discounted_return(&p))
                .unwrap_or(f64::NAN)
        };
        (f(&tp) - f(&tm)) / (2.0 * h)
    });
    let header: Vec<String> = (1..=theta.len()).map(|i| format!("g{i}")).collect();
    let mut csv = format!("estimator,{},angle_to_fd_deg,relative_error\n", header.join(","));
    for (label, g) in [("finite_difference", &fd), ("corrected", &corrected), ("naive", &naive)] {
        let entries: Vec<String> = g.iter().map(|e| e.to_string()).collect();
        writeln!(
            csv,
            "{label},{},{},{}",
            entries.join(","),
            angle_deg(g, &fd),
            (g - &fd).norm() / fd.norm()
        )
        .unwrap();
    }
    Ok(vec![Artifact {
        name: "bias_det.csv".into(),
        csv,
    }])
}

/// One-step problem `u = min(u_s, 1)`, `u_s ~ N(θ, σ²)`, cost `(u − c)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationProblem {
    pub theta: f64,
    pub sigma: f64,
    pub target: f64,
    pub bound: f64,
}

impl TruncationProblem {
    pub fn standard() -> Self {
        TruncationProblem {
            theta: 0.8,
            sigma: 0.5,
            target: 2.0,
            bound: 1.0,
        }
    }

    /// Share of the sampling density beyond the bound.
    pub fn clipped_mass(&self) -> f64 {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        1.0 - n.cdf((self.bound - self.theta) / self.sigma)
    }

    /// `dJ/dθ = 2(θ − c)Φ(b) − 2σφ(b)` with `b = (bound − θ)/σ`; clipped
    /// samples contribute nothing since their input no longer moves.
    pub fn exact_gradient(&self) -> f64 {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let b = (self.bound - self.theta) / self.sigma;
        2.0 * (self.theta - self.target) * n.cdf(b) - 2.0 * self.sigma * n.pdf(b)
    }

    fn policy(&self) -> Result<GaussianPolicy> {
        GaussianPolicy::new(AffinePolicy::new(v(&[self.theta]), v(&[0.0]), DMatrix::zeros(1, 1))?, self.sigma)
    }

    /// Corrected and naive estimates from `n` samples, using the sample
    /// mean of the cost as baseline. Only the `û` entry of the gradient is
    /// non-zero.
    pub fn estimates(&self, n: usize, seed: u64) -> Result<(GradientEstimate, GradientEstimate)> {
        let policy = self.policy()?;
        let set = ConstraintSet::new(1, 1).with_halfspace(&[1.0], self.bound)?;
        let x = v(&[0.0]);
        const CHUNK: usize = 50_000;
        let chunks = n.div_ceil(CHUNK);
        let draws: Vec<(DVector<f64>, DVector<f64>)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let len = CHUNK.min(n - c * CHUNK);
                (0..len)
                    .map(|_| {
                        let u_s = sample_action(&policy, &x, &mut rng);
                        let u = project(&set, &x, &u_s)?.u_proj;
                        Ok((u_s, u))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let cost = |u: &DVector<f64>| (u[0] - self.target).powi(2);
        let baseline = draws.iter().map(|(_, u)| cost(u)).sum::<f64>() / draws.len() as f64;
        let batch: Vec<StochSample> = draws
            .into_iter()
            .map(|(u_s, u)| StochSample {
                x: x.clone(),
                advantage: cost(&u) - baseline,
                u_s,
                u_proj: u,
            })
            .collect();
        Ok((
            stoch_policy_gradient_corrected(&policy, &batch)?,
            stoch_policy_gradient_naive(&policy, &batch)?,
        ))
    }
}

fn bias_stoch(seed: u64) -> Result<Vec<Artifact>> {
    let problem = TruncationProblem::standard();
    let (corrected, naive) = problem.estimates(1_000_000, seed)?;
    let exact = problem.exact_gradient();
    let mut csv = String::from("estimator,gradient,standard_error,reference,z_score\n");
    for (label, e) in [("corrected", &corrected), ("naive", &naive)] {
        let (g, se) = (e.gradient[0], e.standard_error[0]);
        writeln!(csv, "{label},{g},{se},{exact},{}", (g - exact) / se).unwrap();
    }
    writeln!(csv, "clipped_mass,{},,,", problem.clipped_mass()).unwrap();
    Ok(vec![Artifact {
        name: "bias_stoch.csv".into(),
        csv,
    }])
}
