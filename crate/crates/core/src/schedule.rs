//! Linear-β DDPM noise schedule.
//!
//! Steps are 1-based: `t = 1` is the final denoising step and `t = T` the
//! first. The reverse kernel uses the posterior variance
//! `σ̃²_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t` with `ᾱ_0 = 1`, so the last step
//! is noise-free.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Parameters that fully determine a [`Schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

impl Schedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + step * i as f64).collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma2 = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha,
            alpha_bar,
            sigma2,
        })
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    #[inline]
    fn idx(&self, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.steps(), "step {t} out of range");
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// Reverse (posterior) variance σ̃²_t; zero at `t = 1`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma2(t).sqrt()
    }

    /// Variance used to score evidence at step `t`.
    ///
    /// Equal to σ̃²_t except at `t = 1`, where the posterior variance vanishes
    /// and the clipped value σ̃²_2 is used instead (β_1 when `T = 1`).
    pub fn llr_variance(&self, t: usize) -> f64 {
        if t == 1 {
            if self.steps() >= 2 {
                self.sigma2[1]
            } else {
                self.beta[0]
            }
        } else {
            self.sigma2(t)
        }
    }

    pub fn max_sigma2(&self) -> f64 {
        self.sigma2.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_llr_variance(&self) -> f64 {
        (1..=self.steps())
            .map(|t| self.llr_variance(t))
            .fold(f64::INFINITY, f64::min)
    }

    /// Validates `1 <= t <= T`.
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.steps() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.steps()
            )))
        }
    }

    /// Reverse-kernel mean induced by a noise prediction.
    pub fn mean_from_eps(&self, t: usize, a_t: &[f64], eps_hat: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        check_dim(a_t.len(), eps_hat.len())?;
        let mut out = vec![0.0; a_t.len()];
        self.mean_from_eps_into(t, a_t, eps_hat, &mut out);
        Ok(out)
    }

    /// Unchecked form of [`Schedule::mean_from_eps`] writing into `out`.
    #[inline]
    pub fn mean_from_eps_into(&self, t: usize, a_t: &[f64], eps_hat: &[f64], out: &mut [f64]) {
        let i = self.idx(t);
        let inv_sqrt_alpha = 1.0 / self.alpha[i].sqrt();
        let coef = (1.0 - self.alpha[i]) / (1.0 - self.alpha_bar[i]).sqrt();
        for ((o, a), e) in out.iter_mut().zip(a_t).zip(eps_hat) {
            *o = inv_sqrt_alpha * (a - coef * e);
        }
    }

    /// Forward diffusion `a_t = √ᾱ_t a_0 + √(1 − ᾱ_t) ε`.
    pub fn diffuse_into(&self, t: usize, a0: &[f64], eps: &[f64], out: &mut [f64]) {
        let ab = self.alpha_bar(t);
        let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, a), e) in out.iter_mut().zip(a0).zip(eps) {
            *o = c0 * a + c1 * e;
        }
    }
}
