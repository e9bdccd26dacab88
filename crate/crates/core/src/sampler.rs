//! Evidence-gated reverse diffusion.
//!
//! Each reverse step proposes from the unconditional mean pulled toward the
//! conditional mean by a gate `β_t ∈ [0, β_max]` driven by the accumulated
//! log-likelihood ratio between the two head-induced Gaussian kernels. The
//! gate reads `ℓ_cum` as of before the step; the increment is then scored at
//! the drawn proposal.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::labeling::{action_gradient, ActionValue};
use crate::model::{TwoHeadPolicy, Workspace};
use crate::nn::sigmoid;
use crate::schedule::{Schedule, ScheduleParams};

pub use crate::data::destandardize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub beta_max: f64,
    /// Logistic temperature of the soft gate.
    pub delta: f64,
    pub kind: GateKind,
    /// Cap on `‖μ_c − μ_u‖`.
    pub dmu_clamp: Option<f64>,
    /// Inclusive step range `[lo, hi]` on which the gate may open.
    pub window: Option<(usize, usize)>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            beta_max: 1.0,
            delta: 1.0,
            kind: GateKind::Soft,
            dmu_clamp: None,
            window: None,
        }
    }
}

impl GateConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta_max) {
            return Err(Error::invalid("beta_max must lie in [0, 1]"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid("delta must be positive"));
        }
        if let Some(d) = self.dmu_clamp {
            if !(d >= 0.0) {
                return Err(Error::invalid("dmu_clamp must be non-negative"));
            }
        }
        if let Some((lo, hi)) = self.window {
            if lo < 1 || hi > steps || lo > hi {
                return Err(Error::invalid(format!("gate window {lo}:{hi} not within 1..={steps}")));
            }
        }
        Ok(())
    }

    fn active_at(&self, t: usize) -> bool {
        self.window.is_none_or(|(lo, hi)| (lo..=hi).contains(&t))
    }

    /// Number of steps on which the gate may open.
    pub fn gated_steps(&self, steps: usize) -> usize {
        self.window.map_or(steps, |(lo, hi)| hi - lo + 1)
    }

    pub fn beta(&self, llr_cum: f64, tau: f64) -> f64 {
        match self.kind {
            GateKind::Soft => gate_soft(llr_cum, tau, self.delta, self.beta_max),
            GateKind::Hard => gate_hard(llr_cum, tau, self.beta_max),
        }
    }
}

/// Where the critic gradient is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rho", rename_all = "lowercase")]
pub enum Center {
    Unconditional,
    Lrt,
    /// `(1 − ρ) μ_u + ρ μ_LRT`.
    Blend(f64),
    /// Blend with `ρ = β_t / β_max`.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QComposeConfig {
    pub enabled: bool,
    pub lambda_max: f64,
    pub grad_clip: f64,
    pub center: Center,
    /// Score the LLR increment after the critic step instead of before it.
    pub llr_after_compose: bool,
}

impl Default for QComposeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda_max: 0.1,
            grad_clip: 1.0,
            center: Center::Lrt,
            llr_after_compose: false,
        }
    }
}

impl QComposeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max >= 0.0) {
            return Err(Error::invalid("lambda_max must be non-negative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if let Center::Blend(rho) = self.center {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::invalid("blend rho must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Magnitude actually applied: zero when disabled.
    pub fn effective_lambda_max(&self) -> f64 {
        if self.enabled {
            self.lambda_max
        } else {
            0.0
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One-step log-likelihood ratio `log N(a; μ_c, σ²I) − log N(a; μ_u, σ²I)`.
pub fn llr_step(a_prev: &[f64], mu_u: &[f64], mu_c: &[f64], sigma2: f64) -> Result<f64> {
    check_dim(a_prev.len(), mu_u.len())?;
    check_dim(a_prev.len(), mu_c.len())?;
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("llr variance must be positive"));
    }
    Ok(llr_unchecked(a_prev, mu_u, mu_c, sigma2))
}

#[inline]
fn llr_unchecked(a: &[f64], mu_u: &[f64], mu_c: &[f64], sigma2: f64) -> f64 {
    (sq_dist(a, mu_u) - sq_dist(a, mu_c)) / (2.0 * sigma2)
}

/// `β_max · σ((ℓ − τ)/δ)`; `τ = +∞` closes the gate.
pub fn gate_soft(llr_cum: f64, tau: f64, delta: f64, beta_max: f64) -> f64 {
    if tau == f64::INFINITY {
        return 0.0;
    }
    if tau == f64::NEG_INFINITY {
        return beta_max;
    }
    beta_max * sigmoid((llr_cum - tau) / delta)
}

/// `β_max · 1{ℓ ≥ τ}`.
pub fn gate_hard(llr_cum: f64, tau: f64, beta_max: f64) -> f64 {
    if llr_cum >= tau {
        beta_max
    } else {
        0.0
    }
}

/// Rescales `v` onto the ball of radius `max_norm`.
pub fn clip_norm(v: &mut [f64], max_norm: f64) {
    let n = norm(v);
    if n > max_norm && n > 0.0 {
        let k = max_norm / n;
        v.iter_mut().for_each(|x| *x *= k);
    }
}

/// `a + λ_t σ² clip(∇_a Q̂(s, ·)|_center, G)`.
pub fn q_compose(
    a: &[f64],
    s: &[f64],
    critic: &dyn ActionValue,
    lambda_t: f64,
    sigma2: f64,
    center: &[f64],
    grad_clip: f64,
) -> Vec<f64> {
    let mut g = action_gradient(critic, s, center);
    clip_norm(&mut g, grad_clip);
    a.iter().zip(&g).map(|(x, gi)| x + lambda_t * sigma2 * gi).collect()
}

/// Per-step record of one reverse transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub mu_u: Vec<f64>,
    pub mu_c: Vec<f64>,
    /// Variance used to score the LLR increment.
    pub sigma2: f64,
    /// Variance of the injected noise (σ̃²_t).
    pub noise_sigma2: f64,
    pub beta: f64,
    /// Deterministic mean actually used, including any critic step.
    pub mean: Vec<f64>,
    pub llr_before: f64,
    pub dllr: f64,
    pub llr_cum: f64,
    pub dmu_norm: f64,
    /// `‖m_t − μ_u‖`.
    pub displacement: f64,
    /// Right-hand side of the displacement bound at this step.
    pub displacement_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrTrace {
    /// Records in sampling order, `t = T` first.
    pub steps: Vec<StepRecord>,
    pub action: Vec<f64>,
}

impl LlrTrace {
    pub fn llr_cum(&self) -> f64 {
        self.steps.last().map_or(0.0, |r| r.llr_cum)
    }
}

/// Summary of one chain, cheap enough for Monte-Carlo loops.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub action: Vec<f64>,
    pub llr_cum: f64,
    /// Largest `ℓ_cum` presented to the gate inside its window.
    pub max_gate_llr: f64,
    /// `Σ_t ‖Δμ_t‖² / σ²_t`.
    pub variance_proxy: f64,
}

/// Borrowed view handed to step observers.
pub struct StepView<'w> {
    pub t: usize,
    pub mu_u: &'w [f64],
    pub mu_c: &'w [f64],
    pub mean: &'w [f64],
    pub sigma2: f64,
    pub noise_sigma2: f64,
    pub beta: f64,
    pub llr_before: f64,
    pub dllr: f64,
    pub llr_cum: f64,
    pub dmu_norm: f64,
    pub displacement: f64,
    pub displacement_bound: f64,
    pub gate_active: bool,
}

impl StepView<'_> {
    pub fn to_record(&self) -> StepRecord {
        StepRecord {
            t: self.t,
            mu_u: self.mu_u.to_vec(),
            mu_c: self.mu_c.to_vec(),
            sigma2: self.sigma2,
            noise_sigma2: self.noise_sigma2,
            beta: self.beta,
            mean: self.mean.to_vec(),
            llr_before: self.llr_before,
            dllr: self.dllr,
            llr_cum: self.llr_cum,
            dmu_norm: self.dmu_norm,
            displacement: self.displacement,
            displacement_bound: self.displacement_bound,
        }
    }
}

/// Scratch state for one chain.
pub struct ChainWorkspace {
    model: Workspace,
    mu_u: Vec<f64>,
    mu_c: Vec<f64>,
    dmu: Vec<f64>,
    mu_lrt: Vec<f64>,
    qstep: Vec<f64>,
    mean: Vec<f64>,
    center: Vec<f64>,
    proposal: Vec<f64>,
}

#[derive(Serialize)]
struct SamplerIdentity<'a> {
    schedule: ScheduleParams,
    gate: &'a GateConfig,
    qcompose: &'a QComposeConfig,
    policy: String,
    critic: Option<String>,
    variance_convention: &'static str,
}

/// Variance convention shared by the gate, the LLR and the injected noise.
pub const VARIANCE_CONVENTION: &str = "posterior sigma-tilde^2; llr at t=1 uses clipped sigma-tilde_2^2";

/// A frozen policy with fixed gate and critic-composition settings.
pub struct Sampler<'a> {
    policy: &'a TwoHeadPolicy,
    schedule: &'a Schedule,
    gate: GateConfig,
    qcfg: QComposeConfig,
    critic: Option<&'a dyn ActionValue>,
    fingerprint: String,
}

impl<'a> Sampler<'a> {
    pub fn new(
        policy: &'a TwoHeadPolicy,
        schedule: &'a Schedule,
        gate: GateConfig,
        qcfg: QComposeConfig,
        critic: Option<&'a dyn ActionValue>,
    ) -> Result<Self> {
        if !policy.is_frozen() {
            return Err(Error::invalid("sampling requires a frozen policy"));
        }
        gate.validate(schedule.steps())?;
        qcfg.validate()?;
        if qcfg.enabled && critic.is_none() {
            return Err(Error::invalid("critic composition enabled without a critic"));
        }
        let identity = SamplerIdentity {
            schedule: schedule.params(),
            gate: &gate,
            qcompose: &qcfg,
            policy: policy.content_hash(),
            critic: if qcfg.enabled { critic.map(|c| c.id()) } else { None },
            variance_convention: VARIANCE_CONVENTION,
        };
        let fingerprint = hex::encode(Sha256::digest(serde_json::to_vec(&identity)?));
        Ok(Self {
            policy,
            schedule,
            gate,
            qcfg,
            critic,
            fingerprint,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn gate(&self) -> &GateConfig {
        &self.gate
    }

    pub fn qcompose(&self) -> &QComposeConfig {
        &self.qcfg
    }

    pub fn schedule(&self) -> &Schedule {
        self.schedule
    }

    pub fn policy(&self) -> &TwoHeadPolicy {
        self.policy
    }

    pub fn state_dim(&self) -> usize {
        self.policy.dims().state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.policy.dims().action_dim
    }

    pub fn workspace(&self) -> ChainWorkspace {
        let da = self.action_dim();
        ChainWorkspace {
            model: self.policy.workspace(),
            mu_u: vec![0.0; da],
            mu_c: vec![0.0; da],
            dmu: vec![0.0; da],
            mu_lrt: vec![0.0; da],
            qstep: vec![0.0; da],
            mean: vec![0.0; da],
            center: vec![0.0; da],
            proposal: vec![0.0; da],
        }
    }

    /// `λ_t = λ_max σ̃_t / σ̃_T`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        let top = self.schedule.sigma(self.schedule.steps());
        if top > 0.0 {
            self.qcfg.lambda_max * self.schedule.sigma(t) / top
        } else {
            0.0
        }
    }

    /// One transition `a_t → a_{t−1}`; `a` is updated in place and the new
    /// `ℓ_cum` returned. The observer sees the step before it returns.
    #[allow(clippy::too_many_arguments)]
    pub fn reverse_step<R: Rng + ?Sized>(
        &self,
        ws: &mut ChainWorkspace,
        tau: f64,
        s: &[f64],
        a: &mut [f64],
        t: usize,
        llr_cum: f64,
        rng: &mut R,
        observer: &mut dyn FnMut(&StepView<'_>),
    ) -> Result<f64> {
        let sched = self.schedule;
        self.policy.forward_into(&mut ws.model, s, a, t);
        sched.mean_from_eps_into(t, a, &ws.model.eps_u, &mut ws.mu_u);
        sched.mean_from_eps_into(t, a, &ws.model.eps_c, &mut ws.mu_c);
        for k in 0..a.len() {
            ws.dmu[k] = ws.mu_c[k] - ws.mu_u[k];
        }
        let mut dmu_norm = norm(&ws.dmu);
        if let Some(d) = self.gate.dmu_clamp {
            if dmu_norm > d {
                let k = d / dmu_norm;
                for i in 0..a.len() {
                    ws.dmu[i] *= k;
                    ws.mu_c[i] = ws.mu_u[i] + ws.dmu[i];
                }
                dmu_norm = norm(&ws.dmu);
            }
        }

        let gate_active = self.gate.active_at(t);
        let beta = if gate_active { self.gate.beta(llr_cum, tau) } else { 0.0 };
        for k in 0..a.len() {
            ws.mu_lrt[k] = ws.mu_u[k] + beta * ws.dmu[k];
        }

        let noise_sigma2 = sched.sigma2(t);
        ws.qstep.iter_mut().for_each(|x| *x = 0.0);
        if self.qcfg.enabled && noise_sigma2 > 0.0 {
            let critic = self.critic.expect("validated at construction");
            let rho = match self.qcfg.center {
                Center::Unconditional => 0.0,
                Center::Lrt => 1.0,
                Center::Blend(r) => r,
                Center::Adaptive => {
                    if self.gate.beta_max > 0.0 {
                        beta / self.gate.beta_max
                    } else {
                        0.0
                    }
                }
            };
            for k in 0..a.len() {
                ws.center[k] = (1.0 - rho) * ws.mu_u[k] + rho * ws.mu_lrt[k];
            }
            let mut g = action_gradient(critic, s, &ws.center);
            clip_norm(&mut g, self.qcfg.grad_clip);
            let scale = self.lambda_at(t) * noise_sigma2;
            for k in 0..a.len() {
                ws.qstep[k] = scale * g[k];
            }
        }
        for k in 0..a.len() {
            ws.mean[k] = ws.mu_lrt[k] + ws.qstep[k];
        }

        let displacement = sq_dist(&ws.mean, &ws.mu_u).sqrt();
        let bound = self.gate.beta_max * dmu_norm + self.qcfg.effective_lambda_max() * noise_sigma2 * self.qcfg.grad_clip;
        if displacement > bound * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::Invariant(format!(
                "displacement {displacement:e} exceeds bound {bound:e} at step {t}"
            )));
        }

        let sigma = noise_sigma2.sqrt();
        for k in 0..a.len() {
            let z: f64 = if t > 1 { rng.sample(StandardNormal) } else { 0.0 };
            ws.proposal[k] = ws.mu_lrt[k] + sigma * z;
            a[k] = ws.proposal[k] + ws.qstep[k];
        }
        let llr_var = sched.llr_variance(t);
        let scored: &[f64] = if self.qcfg.llr_after_compose { a } else { &ws.proposal };
        let dllr = llr_unchecked(scored, &ws.mu_u, &ws.mu_c, llr_var);
        let new_llr = llr_cum + dllr;

        observer(&StepView {
            t,
            mu_u: &ws.mu_u,
            mu_c: &ws.mu_c,
            mean: &ws.mean,
            sigma2: llr_var,
            noise_sigma2,
            beta,
            llr_before: llr_cum,
            dllr,
            llr_cum: new_llr,
            dmu_norm,
            displacement,
            displacement_bound: bound,
            gate_active,
        });
        Ok(new_llr)
    }

    /// Full chain from `a_T ~ N(0, I)` with an optional per-step observer.
    pub fn run_chain<R: Rng + ?Sized>(
        &self,
        ws: &mut ChainWorkspace,
        tau: f64,
        s: &[f64],
        rng: &mut R,
        observer: &mut dyn FnMut(&StepView<'_>),
    ) -> Result<ChainOutcome> {
        check_dim(self.state_dim(), s.len())?;
        let mut a: Vec<f64> = (0..self.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let mut llr = 0.0;
        let mut max_gate_llr = f64::NEG_INFINITY;
        let mut v = 0.0;
        for t in (1..=self.schedule.steps()).rev() {
            if self.gate.active_at(t) {
                max_gate_llr = max_gate_llr.max(llr);
            }
            llr = self.reverse_step(ws, tau, s, &mut a, t, llr, rng, &mut |view| {
                v += view.dmu_norm * view.dmu_norm / view.sigma2;
                observer(view);
            })?;
        }
        Ok(ChainOutcome {
            action: a,
            llr_cum: llr,
            max_gate_llr,
            variance_proxy: v,
        })
    }

    /// Draws a standardized action and its full evidence trace.
    pub fn sample_action<R: Rng + ?Sized>(&self, tau: f64, s: &[f64], rng: &mut R) -> Result<(Vec<f64>, LlrTrace)> {
        let mut ws = self.workspace();
        let mut steps = Vec::with_capacity(self.schedule.steps());
        let out = self.run_chain(&mut ws, tau, s, rng, &mut |v| steps.push(v.to_record()))?;
        Ok((
            out.action.clone(),
            LlrTrace {
                steps,
                action: out.action,
            },
        ))
    }

    /// Like [`Self::sample_action`] without building the trace.
    pub fn sample_outcome<R: Rng + ?Sized>(&self, ws: &mut ChainWorkspace, tau: f64, s: &[f64], rng: &mut R) -> Result<ChainOutcome> {
        self.run_chain(ws, tau, s, rng, &mut |_| {})
    }
}
