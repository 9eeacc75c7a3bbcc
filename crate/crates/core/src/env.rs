//! Simulated plant `x⁺ = R(a)x + u + n` with truncated Gaussian noise,
//! rollouts and Monte-Carlo returns.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy_grad::{sample_action, GaussianPolicy};
use crate::projection::project;
use crate::safe_set::ConstraintSet;
use crate::tube_mpc::{solve_projection_mpc, TubeMpcProblem};

/// Rotation by `deg` degrees, mapping `(0, 1)` to `(sin a, cos a)`.
pub fn rotation(deg: f64) -> DMatrix<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, s, -s, c])
}

/// `L(x, u) = w_x‖x − x_ref‖² + w_u‖u − u_ref‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub state_weight: f64,
    pub input_weight: f64,
}

impl StageCost {
    pub fn new(x_ref: DVector<f64>, u_ref: DVector<f64>, state_weight: f64, input_weight: f64) -> Self {
        StageCost {
            x_ref,
            u_ref,
            state_weight,
            input_weight,
        }
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.state_weight * (x - &self.x_ref).norm_squared() + self.input_weight * (u - &self.u_ref).norm_squared()
    }

    pub(crate) fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        if self.x_ref.len() != n || self.u_ref.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "cost references have {} and {} entries, expected {n} and {m}",
                self.x_ref.len(),
                self.u_ref.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub angle_deg: f64,
    /// Per-coordinate variance before truncation.
    pub noise_variance: f64,
    pub noise_radius: f64,
    pub noise_enabled: bool,
    pub cost: StageCost,
}

impl PlantModel {
    pub fn new(angle_deg: f64, cost: StageCost) -> Self {
        PlantModel {
            angle_deg,
            noise_variance: 0.1,
            noise_radius: 0.1,
            noise_enabled: true,
            cost,
        }
    }

    pub fn dynamics(&self) -> DMatrix<f64> {
        rotation(self.angle_deg)
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        if self.noise_enabled {
            sample_truncated_normal(self.noise_variance.sqrt(), self.noise_radius, rng)
        } else {
            DVector::zeros(2)
        }
    }
}

/// 2-D isotropic normal with standard deviation `std` conditioned on
/// `‖n‖ ≤ radius`: the radius is drawn from a truncated Rayleigh law by
/// inverting its CDF, the angle uniformly.
pub fn sample_truncated_normal<R: Rng + ?Sized>(std: f64, radius: f64, rng: &mut R) -> DVector<f64> {
    let s2 = 2.0 * std * std;
    let mass = -(-radius * radius / s2).exp_m1();
    let v: f64 = rng.random();
    let r = (-s2 * (-v * mass).ln_1p()).sqrt().min(radius);
    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    DVector::from_row_slice(&[r * phi.cos(), r * phi.sin()])
}

/// Same law by rejection, in any dimension.
pub fn sample_truncated_normal_rejection<R: Rng + ?Sized>(dim: usize, std: f64, radius: f64, rng: &mut R) -> DVector<f64> {
    loop {
        let n = DVector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        });
        if n.norm() <= radius {
            return n;
        }
    }
}

/// One plant step; returns the next state and the stage cost of `(x, u)`.
pub fn step<R: Rng + ?Sized>(plant: &PlantModel, x: &DVector<f64>, u: &DVector<f64>, rng: &mut R) -> (DVector<f64>, f64) {
    let cost = plant.cost.eval(x, u);
    let next = plant.dynamics() * x + u + plant.noise(rng);
    (next, cost)
}

/// What sits between the policy and the plant.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SafetyLayer {
    Raw,
    Projected(ConstraintSet),
    Mpc(TubeMpcProblem),
}

#[derive(Debug, Clone)]
pub struct Composition {
    pub policy: GaussianPolicy,
    /// Sample from the policy, or apply its mean.
    pub stochastic: bool,
    pub layer: SafetyLayer,
}

impl Composition {
    /// Returns the policy output `u_s`, the input actually applied and, for
    /// the MPC layer, the largest excess of the nominal plan over its
    /// tightened constraints.
    pub fn act<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>, Option<f64>)> {
        let u_s = if self.stochastic {
            sample_action(&self.policy, x, rng)
        } else {
            self.policy.mean.mean(x)
        };
        let (u, excess) = match &self.layer {
            SafetyLayer::Raw => (u_s.clone(), None),
            SafetyLayer::Projected(set) => (project(set, x, &u_s)?.u_proj, None),
            SafetyLayer::Mpc(problem) => {
                let sol = solve_projection_mpc(problem, x, &u_s)?;
                let excess = sol.max_tightening_excess(problem);
                (sol.inputs[0].clone(), Some(excess))
            }
        };
        Ok((u_s, u, excess))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: usize,
    pub t: usize,
    pub x: DVector<f64>,
    pub u_s: DVector<f64>,
    pub u: DVector<f64>,
    pub cost: f64,
    pub x_next: DVector<f64>,
    /// See [`Composition::act`]. Not part of the CSV log.
    pub plan_excess: Option<f64>,
}

/// Independent stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn rollout<R: Rng + ?Sized>(
    plant: &PlantModel,
    composition: &Composition,
    x0: &DVector<f64>,
    length: usize,
    episode: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(length);
    let mut x = x0.clone();
    for t in 0..length {
        let (u_s, u, plan_excess) = composition.act(&x, rng)?;
        let (x_next, cost) = step(plant, &x, &u, rng);
        out.push(Transition {
            episode,
            t,
            x: x.clone(),
            u_s,
            u,
            cost,
            x_next: x_next.clone(),
            plan_excess,
        });
        x = x_next;
    }
    Ok(out)
}

/// `episode,t,x1,x2,us1,us2,u1,u2,cost,x1next,x2next` with a header row.
pub fn write_transitions_csv<W: Write>(mut w: W, transitions: &[Transition]) -> std::io::Result<()> {
    writeln!(w, "episode,t,x1,x2,us1,us2,u1,u2,cost,x1next,x2next")?;
    for tr in transitions {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            tr.episode, tr.t, tr.x[0], tr.x[1], tr.u_s[0], tr.u_s[1], tr.u[0], tr.u[1], tr.cost, tr.x_next[0], tr.x_next[1]
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub episodes: usize,
    /// `γ^T · max L / (1 − γ)` over the observed stage costs.
    pub tail_bound: f64,
    /// Largest `xᵀx` over every visited state.
    pub max_state_norm_sq: f64,
}

/// Monte-Carlo estimate of the discounted return truncated at `horizon`.
/// Episode `e` uses stream `e` under `seed`; episodes run in parallel and
/// are reduced in episode order.
pub fn evaluate_return(
    plant: &PlantModel,
    composition: &Composition,
    x0: &DVector<f64>,
    gamma: f64,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<ReturnEstimate> {
    if episodes == 0 {
        return Err(Error::EmptyBatch);
    }
    let per_episode: Vec<(f64, f64, f64)> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = stream_rng(seed, e as u64);
            let traj = rollout(plant, composition, x0, horizon, e, &mut rng)?;
            let mut ret = 0.0;
            let mut disc = 1.0;
            let mut worst = 0.0f64;
            let mut norm = x0.norm_squared();
            for tr in &traj {
                ret += disc * tr.cost;
                disc *= gamma;
                worst = worst.max(tr.cost);
                norm = norm.max(tr.x_next.norm_squared());
            }
            Ok((ret, worst, norm))
        })
        .collect::<Result<_>>()?;
    let n = episodes as f64;
    let mean = per_episode.iter().map(|p| p.0).sum::<f64>() / n;
    let var = if episodes > 1 {
        per_episode.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let worst = per_episode.iter().map(|p| p.1).fold(0.0, f64::max);
    let tail_bound = if gamma < 1.0 {
        gamma.powi(horizon as i32) * worst / (1.0 - gamma)
    } else {
        f64::INFINITY
    };
    Ok(ReturnEstimate {
        mean,
        standard_error: (var / n).sqrt(),
        episodes,
        tail_bound,
        max_state_norm_sq: per_episode.iter().map(|p| p.2).fold(0.0, f64::max),
    })
}
