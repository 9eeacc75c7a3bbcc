//! Experiment configuration: TOML in, validated [`ExperimentConfig`] out.
//!
//! Every optional key has a documented default, and the resolved values are
//! written back into the run manifest, so a manifest is itself a complete
//! config.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{rotation, PlantModel, StageCost};
use crate::error::{Error, Result};
use crate::opt_kernel::spectral_norm;
use crate::policy_grad::{AffinePolicy, GaussianPolicy};
use crate::tube_mpc::{build_tube, TubeMpcProblem, TubeNorm, TubeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub angle_deg: f64,
    pub noise_variance: f64,
    pub noise_radius: f64,
    pub noise_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub angle_deg: f64,
    pub scale: f64,
    pub horizon: usize,
    pub tube_norm: TubeNorm,
    pub noise_bound: f64,
    /// Defaults to `‖R(a) − scale·R(â)‖₂`, the worst one-step model error on
    /// the unit ball.
    pub mismatch_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub x_ref: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub state_weight: f64,
    pub input_weight: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Standard deviation of each input coordinate.
    pub sigma: f64,
    /// `[û (2), x̂ (2), K (2×2 row-major)]`.
    pub theta0: Vec<f64>,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    pub batches: usize,
    pub episode_length: usize,
    pub episodes_per_batch: usize,
    pub x0: Vec<f64>,
    pub critic_ridge: f64,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub plant: PlantConfig,
    pub model: ModelConfig,
    pub cost: CostConfig,
    pub policy: PolicyConfig,
    pub learning: LearningConfig,
}

/// One problem found while validating a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

pub fn diagnostics_to_error(diags: &[Diagnostic]) -> Error {
    Error::Config(diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<i64>,
    version: Option<String>,
    #[serde(default)]
    plant: RawPlant,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    cost: RawCost,
    #[serde(default)]
    policy: RawPolicy,
    #[serde(default)]
    learning: RawLearning,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    angle_deg: Option<f64>,
    noise_variance: Option<f64>,
    noise_radius: Option<f64>,
    noise_enabled: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    angle_deg: Option<f64>,
    scale: Option<f64>,
    horizon: Option<i64>,
    tube_norm: Option<TubeNorm>,
    noise_bound: Option<f64>,
    mismatch_bound: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    x_ref: Option<Vec<f64>>,
    u_ref: Option<Vec<f64>>,
    state_weight: Option<f64>,
    input_weight: Option<f64>,
    gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    sigma: Option<f64>,
    theta0: Option<Vec<f64>>,
    step_size: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearning {
    batches: Option<i64>,
    episode_length: Option<i64>,
    episodes_per_batch: Option<i64>,
    x0: Option<Vec<f64>>,
    critic_ridge: Option<f64>,
    eval_episodes: Option<i64>,
    eval_horizon: Option<i64>,
}

/// Line of `key = …` inside `[section]`, 1-based.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut section_line = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    section_line
}

struct Checker<'a> {
    text: &'a str,
    diags: Vec<Diagnostic>,
}

impl Checker<'_> {
    fn push(&mut self, section: &str, key: &str, message: impl Into<String>) {
        let field = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        self.diags.push(Diagnostic {
            field,
            line: key_line(self.text, section, key),
            message: message.into(),
        });
    }

    fn required<T>(&mut self, v: Option<T>, section: &str, key: &str) -> Option<T> {
        if v.is_none() {
            self.push(section, key, "required field is missing");
        }
        v
    }

    fn float(&mut self, v: f64, section: &str, key: &str, ok: impl Fn(f64) -> bool, what: &str) -> f64 {
        if !v.is_finite() || !ok(v) {
            self.push(section, key, format!("{what}, got {v}"));
        }
        v
    }

    fn count(&mut self, v: i64, section: &str, key: &str, min: i64) -> usize {
        if v < min {
            self.push(section, key, format!("must be at least {min}, got {v}"));
            return min.max(0) as usize;
        }
        v as usize
    }

    fn vector(&mut self, v: Option<Vec<f64>>, section: &str, key: &str, len: usize) -> Vec<f64> {
        match v {
            Some(v) if v.len() == len && v.iter().all(|e| e.is_finite()) => v,
            Some(v) => {
                self.push(section, key, format!("expected {len} finite numbers, got {v:?}"));
                vec![0.0; len]
            }
            None => vec![0.0; len],
        }
    }
}

/// `‖R(a) − scale·R(â)‖₂`.
pub fn model_mismatch(plant_angle_deg: f64, model_angle_deg: f64, scale: f64) -> f64 {
    spectral_norm(&(rotation(plant_angle_deg) - rotation(model_angle_deg) * scale))
}

impl ExperimentConfig {
    /// Parses and validates a TOML document, collecting every problem found.
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, Vec<Diagnostic>> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            vec![Diagnostic {
                field: "toml".into(),
                line,
                message: e.message().trim().to_string(),
            }]
        })?;
        let mut c = Checker {
            text,
            diags: Vec::new(),
        };

        if let Some(v) = &raw.version {
            if v != env!("CARGO_PKG_VERSION") {
                log::warn!("config written by version {v}, running {}", env!("CARGO_PKG_VERSION"));
            }
        }
        let seed = match raw.seed {
            Some(s) if s < 0 => {
                c.push("", "seed", format!("must be non-negative, got {s}"));
                None
            }
            s => s.map(|s| s as u64),
        };

        let p = raw.plant;
        let plant = PlantConfig {
            angle_deg: c.float(p.angle_deg.unwrap_or(20.0), "plant", "angle_deg", |_| true, "must be finite"),
            noise_variance: c.float(p.noise_variance.unwrap_or(0.1), "plant", "noise_variance", |v| v > 0.0, "must be positive"),
            noise_radius: c.float(p.noise_radius.unwrap_or(0.1), "plant", "noise_radius", |v| v > 0.0, "must be positive"),
            noise_enabled: p.noise_enabled.unwrap_or(true),
        };

        let m = raw.model;
        let angle = c.float(m.angle_deg.unwrap_or(25.0), "model", "angle_deg", |_| true, "must be finite");
        let scale = c.float(m.scale.unwrap_or(1.1), "model", "scale", |_| true, "must be finite");
        let model = ModelConfig {
            angle_deg: angle,
            scale,
            horizon: c.count(m.horizon.unwrap_or(10), "model", "horizon", 1),
            tube_norm: m.tube_norm.unwrap_or(TubeNorm::ClosedLoopTwo),
            noise_bound: c.float(m.noise_bound.unwrap_or(plant.noise_radius), "model", "noise_bound", |v| v > 0.0, "must be positive"),
            mismatch_bound: c.float(
                m.mismatch_bound.unwrap_or_else(|| model_mismatch(plant.angle_deg, angle, scale)),
                "model",
                "mismatch_bound",
                |v| v >= 0.0,
                "must be non-negative",
            ),
        };

        let k = raw.cost;
        let x_ref = c.required(k.x_ref, "cost", "x_ref");
        let u_ref = c.required(k.u_ref, "cost", "u_ref");
        let cost = CostConfig {
            x_ref: c.vector(x_ref, "cost", "x_ref", 2),
            u_ref: c.vector(u_ref, "cost", "u_ref", 2),
            state_weight: c.float(k.state_weight.unwrap_or(1e-2), "cost", "state_weight", |v| v >= 0.0, "must be non-negative"),
            input_weight: c.float(k.input_weight.unwrap_or(1.0), "cost", "input_weight", |v| v > 0.0, "must be positive"),
            gamma: c.float(k.gamma.unwrap_or(0.9), "cost", "gamma", |v| v > 0.0 && v < 1.0, "must lie in (0, 1)"),
        };

        let pol = raw.policy;
        let sigma = c.required(pol.sigma, "policy", "sigma");
        let theta0 = c.required(pol.theta0, "policy", "theta0");
        let step = c.required(pol.step_size, "policy", "step_size");
        let policy = PolicyConfig {
            sigma: sigma.map_or(1.0, |s| c.float(s, "policy", "sigma", |v| v > 0.0, "must be positive")),
            theta0: c.vector(theta0, "policy", "theta0", 8),
            step_size: step.map_or(0.0, |s| c.float(s, "policy", "step_size", |v| v >= 0.0, "must be non-negative")),
        };

        let l = raw.learning;
        let learning = LearningConfig {
            batches: c.count(l.batches.unwrap_or(30), "learning", "batches", 1),
            episode_length: c.count(l.episode_length.unwrap_or(20), "learning", "episode_length", 1),
            episodes_per_batch: c.count(l.episodes_per_batch.unwrap_or(1), "learning", "episodes_per_batch", 1),
            x0: c.vector(Some(l.x0.unwrap_or_else(|| vec![0.0, 1.0])), "learning", "x0", 2),
            critic_ridge: c.float(l.critic_ridge.unwrap_or(1e-8), "learning", "critic_ridge", |v| v >= 0.0, "must be non-negative"),
            eval_episodes: c.count(l.eval_episodes.unwrap_or(20), "learning", "eval_episodes", 1),
            eval_horizon: c.count(l.eval_horizon.unwrap_or(200), "learning", "eval_horizon", 1),
        };
        if DVector::from_column_slice(&learning.x0).norm_squared() > 1.0 {
            c.push("learning", "x0", "initial state must satisfy xᵀx ≤ 1");
        }

        let cfg = ExperimentConfig {
            seed,
            plant,
            model,
            cost,
            policy,
            learning,
        };
        if c.diags.is_empty() {
            if let Err(e) = build_tube(&cfg.tube_params()) {
                c.push("model", "horizon", format!("tube precheck failed: {e}"));
            }
            if model_mismatch(cfg.plant.angle_deg, cfg.model.angle_deg, cfg.model.scale) > cfg.model.mismatch_bound + 1e-12 {
                log::warn!(
                    "model.mismatch_bound {} does not cover the plant-model error; closed-loop safety is not guaranteed",
                    cfg.model.mismatch_bound
                );
            }
        }
        if c.diags.is_empty() {
            Ok(cfg)
        } else {
            Err(c.diags)
        }
    }

    pub fn stage_cost(&self) -> StageCost {
        StageCost::new(
            DVector::from_column_slice(&self.cost.x_ref),
            DVector::from_column_slice(&self.cost.u_ref),
            self.cost.state_weight,
            self.cost.input_weight,
        )
    }

    pub fn plant_model(&self) -> PlantModel {
        PlantModel {
            angle_deg: self.plant.angle_deg,
            noise_variance: self.plant.noise_variance,
            noise_radius: self.plant.noise_radius,
            noise_enabled: self.plant.noise_enabled,
            cost: self.stage_cost(),
        }
    }

    pub fn tube_params(&self) -> TubeParams {
        TubeParams {
            a_hat: rotation(self.model.angle_deg) * self.model.scale,
            b: DMatrix::identity(2, 2),
            horizon: self.model.horizon,
            gamma: self.cost.gamma,
            cost: self.stage_cost(),
            noise_bound: self.model.noise_bound,
            mismatch_bound: self.model.mismatch_bound,
            norm: self.model.tube_norm,
        }
    }

    pub fn tube(&self) -> Result<TubeMpcProblem> {
        build_tube(&self.tube_params())
    }

    pub fn initial_policy(&self) -> Result<GaussianPolicy> {
        let mean = AffinePolicy::from_params(2, 2, &DVector::from_column_slice(&self.policy.theta0))?;
        GaussianPolicy::new(mean, self.policy.sigma)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.learning.x0)
    }

    /// The resolved config with the seed that was used and the code version;
    /// it parses back into the same config.
    pub fn manifest(&self, seed: u64) -> Result<String> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            version: &'a str,
            seed: u64,
            plant: &'a PlantConfig,
            model: &'a ModelConfig,
            cost: &'a CostConfig,
            policy: &'a PolicyConfig,
            learning: &'a LearningConfig,
        }
        toml::to_string(&Manifest {
            version: env!("CARGO_PKG_VERSION"),
            seed,
            plant: &self.plant,
            model: &self.model,
            cost: &self.cost,
            policy: &self.policy,
            learning: &self.learning,
        })
        .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Reads and validates a config file.
pub fn validate_config(path: &Path) -> std::result::Result<ExperimentConfig, Vec<Diagnostic>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![Diagnostic {
            field: "file".into(),
            line: None,
            message: format!("{}: {e}", path.display()),
        }]
    })?;
    ExperimentConfig::from_toml_str(&text)
}
