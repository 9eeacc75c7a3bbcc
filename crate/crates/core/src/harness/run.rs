//! Stochastic actor-critic learning through the tube MPC projection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::critic::{advantage_estimate, lstd_compatible_advantage, lstd_v, QuadraticFeatures};
use crate::env::{evaluate_return, rollout, stream_rng, write_transitions_csv, Composition, ReturnEstimate, SafetyLayer, Transition};
use crate::error::{Error, Result};
use crate::policy_grad::{ascend, stoch_policy_gradient_corrected, GaussianPolicy, GradientEstimate, StochSample};

/// States with `xᵀx` above `1 + SAFETY_TOLERANCE` count as violations.
pub const SAFETY_TOLERANCE: f64 = 1e-9;

/// Offset separating the evaluation seed from the learning seed.
const EVAL_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub batch: usize,
    /// Parameters used to collect this batch.
    pub theta: DVector<f64>,
    pub grad_norm: f64,
    pub j: ReturnEstimate,
    pub j_normalized: f64,
    pub safety_violations: usize,
    pub dropped: usize,
    /// Largest excess of any nominal plan over its tightened constraints.
    pub max_plan_excess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<BatchRecord>,
    pub final_theta: DVector<f64>,
    pub final_j: ReturnEstimate,
    pub first_batch: Vec<Transition>,
    pub last_batch: Vec<Transition>,
}

impl RunLog {
    pub fn initial_j(&self) -> f64 {
        self.records[0].j.mean
    }

    /// `J(θ_final) / J(θ_0)`.
    pub fn final_normalized_j(&self) -> f64 {
        self.final_j.mean / self.initial_j()
    }

    pub fn safety_violations(&self) -> usize {
        let eval = |j: &ReturnEstimate| (j.max_state_norm_sq > 1.0 + SAFETY_TOLERANCE) as usize;
        self.records.iter().map(|r| r.safety_violations + eval(&r.j)).sum::<usize>() + eval(&self.final_j)
    }

    pub fn max_plan_excess(&self) -> f64 {
        self.records.iter().map(|r| r.max_plan_excess).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Normalized J for batches `0..=B`, the last entry being the final
    /// parameters.
    pub fn normalized_curve(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.records.iter().map(|r| r.j_normalized).collect();
        c.push(self.final_normalized_j());
        c
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let p = self.final_theta.len();
        let theta_cols: Vec<String> = (1..=p).map(|i| format!("theta{i}")).collect();
        writeln!(
            w,
            "batch,{},grad_norm,j,j_se,j_normalized,safety_violations,dropped,max_plan_excess",
            theta_cols.join(",")
        )?;
        for r in &self.records {
            let theta: Vec<String> = r.theta.iter().map(|t| t.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.batch,
                theta.join(","),
                r.grad_norm,
                r.j.mean,
                r.j.standard_error,
                r.j_normalized,
                r.safety_violations,
                r.dropped,
                r.max_plan_excess
            )?;
        }
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "quantity,value")?;
        writeln!(w, "batches,{}", self.records.len())?;
        writeln!(w, "initial_j,{}", self.initial_j())?;
        writeln!(w, "final_j,{}", self.final_j.mean)?;
        writeln!(w, "final_j_se,{}", self.final_j.standard_error)?;
        writeln!(w, "final_j_normalized,{}", self.final_normalized_j())?;
        writeln!(w, "safety_violations,{}", self.safety_violations())?;
        writeln!(w, "max_plan_excess,{}", self.max_plan_excess())?;
        for (i, t) in self.final_theta.iter().enumerate() {
            writeln!(w, "final_theta{},{t}", i + 1)?;
        }
        Ok(())
    }
}

fn evaluate(cfg: &ExperimentConfig, composition: &Composition, seed: u64) -> Result<ReturnEstimate> {
    evaluate_return(
        &cfg.plant_model(),
        composition,
        &cfg.x0(),
        cfg.cost.gamma,
        cfg.learning.eval_horizon,
        cfg.learning.eval_episodes,
        seed.wrapping_add(EVAL_SEED_OFFSET),
    )
}

fn run_batch(
    cfg: &ExperimentConfig,
    batch: usize,
    policy: &GaussianPolicy,
    composition: &Composition,
    seed: u64,
) -> Result<(Vec<Transition>, GradientEstimate)> {
    let plant = cfg.plant_model();
    let x0 = cfg.x0();
    let episodes: Vec<Vec<Transition>> = (0..cfg.learning.episodes_per_batch)
        .into_par_iter()
        .map(|e| {
            let mut rng = stream_rng(seed, ((batch as u64 + 1) << 32) | e as u64);
            rollout(&plant, composition, &x0, cfg.learning.episode_length, e, &mut rng)
        })
        .collect::<Result<_>>()?;
    let transitions: Vec<Transition> = episodes.into_iter().flatten().collect();

    let features = QuadraticFeatures { input_dim: 2 };
    let ridge = cfg.learning.critic_ridge;
    let value = lstd_v(&transitions, &features, cfg.cost.gamma, ridge)?;
    let adv = lstd_compatible_advantage(&transitions, &value, &features, policy, cfg.cost.gamma, ridge)?;
    let samples: Vec<StochSample> = transitions
        .iter()
        .map(|t| StochSample {
            x: t.x.clone(),
            u_s: t.u_s.clone(),
            u_proj: t.u.clone(),
            advantage: advantage_estimate(&adv.weights, policy, &t.x, &t.u_s),
        })
        .collect();
    let estimate = stoch_policy_gradient_corrected(policy, &samples)?;
    Ok((transitions, estimate))
}

/// Runs `cfg.learning.batches` policy-gradient iterations. Each batch rolls
/// out the Gaussian policy through the tube MPC, fits the value and the
/// compatible advantage, and takes one step along the corrected stochastic
/// gradient. The return of every iterate is estimated with the same
/// evaluation streams so successive estimates are directly comparable.
pub fn run_section5(cfg: &ExperimentConfig, seed: u64) -> Result<RunLog> {
    let tube = cfg.tube()?;
    let mut policy = cfg.initial_policy()?;
    let mut theta = policy.mean.params();
    let mut records: Vec<BatchRecord> = Vec::with_capacity(cfg.learning.batches);
    let mut first_batch = Vec::new();
    let mut last_batch = Vec::new();
    let composition = |policy: &GaussianPolicy| Composition {
        policy: policy.clone(),
        stochastic: true,
        layer: SafetyLayer::Mpc(tube.clone()),
    };

    for batch in 0..cfg.learning.batches {
        let wrap = |e: Error| Error::Batch {
            batch,
            source: Box::new(e),
        };
        let comp = composition(&policy);
        let j = evaluate(cfg, &comp, seed).map_err(wrap)?;
        let (transitions, estimate) = run_batch(cfg, batch, &policy, &comp, seed).map_err(wrap)?;

        let safety_violations = transitions
            .iter()
            .filter(|t| t.x_next.norm_squared() > 1.0 + SAFETY_TOLERANCE)
            .count();
        let max_plan_excess = transitions
            .iter()
            .filter_map(|t| t.plan_excess)
            .fold(f64::NEG_INFINITY, f64::max);
        let j_normalized = if batch == 0 { 1.0 } else { j.mean / records[0].j.mean };
        let grad_norm = estimate.gradient.norm();
        log::info!("batch {batch}: J = {:.6} ± {:.2e}, |g| = {grad_norm:.4e}", j.mean, j.standard_error);
        let next = ascend(&theta, &estimate, cfg.policy.step_size).map_err(wrap)?;
        records.push(BatchRecord {
            batch,
            theta: theta.clone(),
            grad_norm,
            j,
            j_normalized,
            safety_violations,
            dropped: estimate.dropped,
            max_plan_excess,
        });
        if batch == 0 {
            first_batch = transitions;
        } else if batch + 1 == cfg.learning.batches {
            last_batch = transitions;
        }
        theta = next;
        policy = policy.with_params(&theta)?;
    }
    if cfg.learning.batches == 1 {
        last_batch = first_batch.clone();
    }
    let final_j = evaluate(cfg, &composition(&policy), seed).map_err(|e| Error::Batch {
        batch: cfg.learning.batches,
        source: Box::new(e),
    })?;
    Ok(RunLog {
        records,
        final_theta: theta,
        final_j,
        first_batch,
        last_batch,
    })
}

/// Writes `manifest.toml`, `runlog.csv`, `summary.csv`,
/// `trajectory_first.csv` and `trajectory_last.csv` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, seed: u64, log: &RunLog) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.toml"), cfg.manifest(seed)?)?;
    let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    let mut w = open("runlog.csv")?;
    log.write_csv(&mut w)?;
    w.flush()?;
    let mut w = open("summary.csv")?;
    log.write_summary(&mut w)?;
    w.flush()?;
    let mut w = open("trajectory_first.csv")?;
    write_transitions_csv(&mut w, &log.first_batch)?;
    w.flush()?;
    let mut w = open("trajectory_last.csv")?;
    write_transitions_csv(&mut w, &log.last_batch)?;
    w.flush()?;
    Ok(())
}
