//! Offline datasets and per-dimension standardization.

use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{check_dim, Error, Result};

/// Per-dimension affine maps between environment scale and the standardized
/// scale the networks operate on, plus the environment's action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

fn column_stats(values: &[f32], dim: usize, what: &str) -> (Vec<f64>, Vec<f64>) {
    let n = values.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in values.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for row in values.chunks_exact(dim) {
        for k in 0..dim {
            let d = row[k] as f64 - mean[k];
            var[k] += d * d;
        }
    }
    let std = var
        .into_iter()
        .enumerate()
        .map(|(k, v)| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                log::warn!("{what} dimension {k} has zero variance; using unit divisor");
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Standardization {
    pub fn identity(state_dim: usize, action_dim: usize, low: f64, high: f64) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            action_low: vec![low; action_dim],
            action_high: vec![high; action_dim],
        }
    }

    pub fn standardize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((v, m), sd)| (v - m) / sd)
            .collect()
    }

    pub fn standardize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_mean)
            .zip(&self.action_std)
            .map(|((v, m), sd)| (v - m) / sd)
            .collect()
    }

    pub fn unscale_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((v, m), sd)| v * sd + m)
            .collect()
    }

    /// Environment-scale action without clipping.
    pub fn unscale_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_mean)
            .zip(&self.action_std)
            .map(|((v, m), sd)| v * sd + m)
            .collect()
    }
}

/// `a_env = clip(a₀ ⊙ std_a + mean_a)` to the action box.
pub fn destandardize(a0: &[f64], stats: Option<&Standardization>) -> Result<Vec<f64>> {
    let stats = stats.ok_or(Error::MissingStats)?;
    check_dim(stats.action_mean.len(), a0.len())?;
    Ok(stats
        .unscale_action(a0)
        .into_iter()
        .zip(stats.action_low.iter().zip(&stats.action_high))
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect())
}

/// Good/background labels attached to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLabels {
    pub advantages: Vec<f32>,
    pub labels: Vec<u8>,
    pub kappa: f64,
    pub p: f64,
}

/// Raw transitions at environment scale, with the statistics used to
/// standardize them and, once labeled, advantages and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvSpec,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub next_states: Vec<f32>,
    pub dones: Vec<u8>,
    /// Generating mixture component per row (bandit only; diagnostics).
    pub modes: Option<Vec<u8>>,
    pub stats: Option<Standardization>,
    pub labels: Option<DatasetLabels>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let check = |file: &str, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(Error::LengthMismatch {
                    file: file.to_string(),
                    expected,
                    found,
                })
            }
        };
        check("states", n * self.state_dim, self.states.len())?;
        check("actions", n * self.action_dim, self.actions.len())?;
        check("next_states", n * self.state_dim, self.next_states.len())?;
        check("dones", n, self.dones.len())?;
        if let Some(m) = &self.modes {
            check("modes", n, m.len())?;
        }
        if let Some(l) = &self.labels {
            check("advantages", n, l.advantages.len())?;
            check("labels", n, l.labels.len())?;
        }
        Ok(())
    }

    /// Computes and attaches per-dimension mean/std statistics.
    pub fn standardize(&mut self) -> Result<&Standardization> {
        if self.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let (state_mean, state_std) = column_stats(&self.states, self.state_dim, "state");
        let (action_mean, action_std) = column_stats(&self.actions, self.action_dim, "action");
        let (low, high) = self.env.action_bounds();
        self.stats = Some(Standardization {
            state_mean,
            state_std,
            action_mean,
            action_std,
            action_low: vec![low; self.action_dim],
            action_high: vec![high; self.action_dim],
        });
        Ok(self.stats.as_ref().unwrap())
    }

    pub fn stats(&self) -> Result<&Standardization> {
        self.stats.as_ref().ok_or(Error::MissingStats)
    }

    fn scaled(values: &[f32], mean: &[f64], std: &[f64]) -> Vec<f64> {
        let dim = mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (*v as f64 - mean[i % dim]) / std[i % dim])
            .collect()
    }

    /// Row-major standardized states.
    pub fn standardized_states(&self) -> Result<Vec<f64>> {
        let st = self.stats()?;
        Ok(Self::scaled(&self.states, &st.state_mean, &st.state_std))
    }

    pub fn standardized_next_states(&self) -> Result<Vec<f64>> {
        let st = self.stats()?;
        Ok(Self::scaled(&self.next_states, &st.state_mean, &st.state_std))
    }

    pub fn standardized_actions(&self) -> Result<Vec<f64>> {
        let st = self.stats()?;
        Ok(Self::scaled(&self.actions, &st.action_mean, &st.action_std))
    }
}
