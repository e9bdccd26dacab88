use std::path::Path;

use lrt_diffusion::calibration::CalibrationConfig;
use lrt_diffusion::env::{BanditSpec, EnvSpec};
use lrt_diffusion::labeling::CriticConfig;
use lrt_diffusion::model::TrainConfig;
use lrt_diffusion::sampler::{Center, GateConfig, GateKind, QComposeConfig};
use lrt_diffusion::schedule::ScheduleParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Bandit rows.
    pub rows: usize,
    /// Point-mass episodes.
    pub episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            rows: 5000,
            episodes: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub p: f64,
    /// Rank rows by the analytic reward instead of a fitted critic.
    pub oracle_critic: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            p: 0.2,
            oracle_critic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub time_embed: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_embed: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub type1_chains: usize,
    pub knn_k: usize,
    pub knn_q: f64,
    /// Held-out states used for calibration and Type-I evaluation.
    pub calibration_states: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            type1_chains: 5000,
            knn_k: 50,
            knn_q: 95.0,
            calibration_states: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.20, 0.10, 0.05, 0.02, 0.01],
        }
    }
}

/// Whole-run configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSpec,
    pub data: DataConfig,
    pub critic: CriticConfig,
    pub label: LabelConfig,
    pub schedule: ScheduleParams,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub gate: GateConfig,
    pub qcompose: QComposeConfig,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvSpec::Bandit(BanditSpec::default()),
            data: DataConfig::default(),
            critic: CriticConfig::default(),
            label: LabelConfig::default(),
            schedule: ScheduleParams::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            gate: GateConfig::default(),
            qcompose: QComposeConfig::default(),
            calibration: CalibrationConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta_max: Option<f64>,
    pub delta: Option<f64>,
    pub q_compose: Option<String>,
    pub lambda_max: Option<f64>,
    pub grad_clip: Option<f64>,
    pub gate: Option<String>,
    pub gate_window: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(a) = o.alpha {
            self.calibration.alpha = a;
        }
        if let Some(b) = o.beta_max {
            self.gate.beta_max = b;
        }
        if let Some(d) = o.delta {
            self.gate.delta = d;
        }
        if let Some(q) = &o.q_compose {
            let (enabled, center) = parse_q_compose(q)?;
            self.qcompose.enabled = enabled;
            if let Some(c) = center {
                self.qcompose.center = c;
            }
        }
        if let Some(l) = o.lambda_max {
            self.qcompose.lambda_max = l;
        }
        if let Some(g) = o.grad_clip {
            self.qcompose.grad_clip = g;
        }
        if let Some(g) = &o.gate {
            self.gate.kind = match g.as_str() {
                "soft" => GateKind::Soft,
                "hard" => GateKind::Hard,
                other => return Err(CliError::Usage(format!("--gate must be soft or hard, got {other}"))),
            };
        }
        if let Some(w) = &o.gate_window {
            self.gate.window = Some(parse_window(w)?);
        }
        self.calibration.seed = self.seed;
        self.train.seed = self.seed;
        self.critic.seed = self.seed;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        lrt_diffusion::schedule::Schedule::from_params(&self.schedule)?;
        self.gate.validate(self.schedule.steps)?;
        self.qcompose.validate()?;
        self.calibration.validate()?;
        self.train.validate()?;
        if !(self.label.p > 0.0 && self.label.p < 1.0) {
            return Err(CliError::Validation("label.p must lie in (0, 1)".into()));
        }
        if self.sweep.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(CliError::Validation("sweep alphas must lie in (0, 1)".into()));
        }
        if self.eval.episodes == 0 || self.eval.type1_chains == 0 || self.eval.calibration_states == 0 {
            return Err(CliError::Validation("evaluation sizes must be positive".into()));
        }
        Ok(())
    }
}

pub fn parse_q_compose(s: &str) -> Result<(bool, Option<Center>), CliError> {
    match s {
        "off" => Ok((false, None)),
        "uncond" => Ok((true, Some(Center::Unconditional))),
        "lrt" => Ok((true, Some(Center::Lrt))),
        "adaptive" => Ok((true, Some(Center::Adaptive))),
        _ => {
            let rho = s
                .strip_prefix("blend:")
                .and_then(|r| r.parse::<f64>().ok())
                .ok_or_else(|| CliError::Usage(format!("--q-compose must be off, uncond, lrt, adaptive or blend:R, got {s}")))?;
            Ok((true, Some(Center::Blend(rho))))
        }
    }
}

pub fn parse_window(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--gate-window must be A:B with integers, got {s}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}
