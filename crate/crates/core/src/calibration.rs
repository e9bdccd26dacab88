//! Monte-Carlo calibration of the gate threshold under the background
//! hypothesis, with DKW sample-size bookkeeping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::rng::{self, purpose};
use crate::sampler::{ChainOutcome, Sampler, VARIANCE_CONVENTION};

/// Smallest order statistic `x` with `F̂_n(x) ≥ level`.
pub fn empirical_quantile(samples: &[f64], level: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("quantile samples"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::invalid("quantile level must lie in [0, 1]"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, level))
}

fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    // tolerance absorbs representation error in level * n
    let rank = ((level * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// `F̂_n(x)`.
pub fn ecdf(samples: &[f64], x: f64) -> f64 {
    samples.iter().filter(|&&v| v <= x).count() as f64 / samples.len() as f64
}

/// Fraction of samples at or above `tau`.
pub fn exceedance(samples: &[f64], tau: f64) -> f64 {
    samples.iter().filter(|&&v| v >= tau).count() as f64 / samples.len() as f64
}

fn check_zeta(zeta: f64) -> Result<()> {
    if zeta > 0.0 && zeta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("zeta must lie in (0, 1)"))
    }
}

/// `ε_n = √(ln(2/ζ) / 2n)`.
pub fn dkw_epsilon(n: usize, zeta: f64) -> Result<f64> {
    check_zeta(zeta)?;
    if n == 0 {
        return Err(Error::invalid("dkw_epsilon needs n >= 1"));
    }
    Ok(((2.0 / zeta).ln() / (2.0 * n as f64)).sqrt())
}

/// Smallest `n` with `ε_n ≤ eps`.
pub fn dkw_budget(eps: f64, zeta: f64) -> Result<usize> {
    check_zeta(zeta)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    Ok(((2.0 / zeta).ln() / (2.0 * eps * eps)).ceil() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub alpha: f64,
    /// Chains per fixed-point iteration.
    pub n: usize,
    pub iterations: usize,
    pub momentum: f64,
    /// Bisection steps on a common-random-number sample after the fixed
    /// point; zero returns the last quantile directly.
    pub refine_steps: usize,
    pub zeta: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            n: 5000,
            iterations: 6,
            momentum: 0.5,
            refine_steps: 14,
            zeta: 0.05,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        if self.n < 100 {
            return Err(Error::invalid("calibration needs n >= 100 chains"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("calibration needs at least one iteration"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        check_zeta(self.zeta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Threshold the chains ran with; `None` encodes `+∞`.
    pub tau_in: Option<f64>,
    /// Fraction of this iteration's chains with `ℓ_cum ≥ τ_in`.
    pub exceedance: f64,
    pub quantile: f64,
    pub tau_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub tau: f64,
    pub exceedance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau_hat: f64,
    pub alpha: f64,
    pub n: usize,
    #[serde(rename = "K")]
    pub iterations: usize,
    pub momentum: f64,
    pub zeta: f64,
    pub dkw_epsilon: f64,
    pub seed: u64,
    pub sampler_fingerprint: String,
    pub variance_convention: String,
    /// Whether the last two fixed-point thresholds agree to 5% of the IQR.
    pub converged: bool,
    pub history: Vec<IterationRecord>,
    pub refinement: Vec<RefineRecord>,
    /// Terminal `ℓ_cum` of the chains run at `τ̂`; persisted out of line.
    #[serde(skip)]
    pub h0_llrs: Vec<f64>,
}

impl CalibrationResult {
    /// `τ̂` for `sampler`, refusing samplers other than the calibrated one.
    pub fn tau_for(&self, sampler: &Sampler<'_>) -> Result<f64> {
        if self.sampler_fingerprint != sampler.fingerprint() {
            return Err(Error::FingerprintMismatch {
                calibrated: self.sampler_fingerprint.clone(),
                live: sampler.fingerprint().to_string(),
            });
        }
        Ok(self.tau_hat)
    }
}

/// Runs `n` chains at threshold `tau`, each from a state drawn uniformly
/// from `states` (flat, row-major). Chain `i` owns stream `(purpose, sub, i)`.
#[allow(clippy::too_many_arguments)]
pub fn run_h0_chains(
    sampler: &Sampler<'_>,
    tau: f64,
    states: &[f64],
    n: usize,
    seed: u64,
    stream_purpose: u64,
    sub: u64,
    exec: Execution,
) -> Result<Vec<ChainOutcome>> {
    let ds = sampler.state_dim();
    if states.is_empty() {
        return Err(Error::EmptyInput("calibration states"));
    }
    if !states.len().is_multiple_of(ds) {
        return Err(Error::DimensionMismatch {
            expected: ds,
            got: states.len() % ds,
        });
    }
    let rows = states.len() / ds;
    map_indexed(exec, n, |i| {
        let mut r = rng::stream(seed, stream_purpose, sub, i as u64);
        let row = r.random_range(0..rows);
        let mut ws = sampler.workspace();
        sampler.sample_outcome(&mut ws, tau, &states[row * ds..(row + 1) * ds], &mut r)
    })
    .into_iter()
    .collect()
}

fn terminal_llrs(
    sampler: &Sampler<'_>,
    tau: f64,
    states: &[f64],
    cfg: &CalibrationConfig,
    sub: u64,
) -> Result<Vec<f64>> {
    let outcomes = run_h0_chains(sampler, tau, states, cfg.n, cfg.seed, purpose::CALIBRATION, sub, cfg.execution)?;
    let mut llrs: Vec<f64> = outcomes.iter().map(|o| o.llr_cum).collect();
    if llrs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite llr during calibration".into()));
    }
    llrs.sort_by(f64::total_cmp);
    Ok(llrs)
}

/// Self-consistent threshold: `τ̂` such that chains run at `τ̂` exceed it
/// with frequency at most `α`.
///
/// Stage one is the damped fixed point `τ ← m·τ + (1−m)·Quantile_{1−α}`
/// from a closed gate, with fresh chains per iteration. Each iteration's own
/// exceedance brackets the root; updates leaving the bracket are replaced by
/// its midpoint. Stage two bisects the bracket on one common-random-number
/// sample and returns its smallest threshold with exceedance `≤ α`, so
/// `F̂_n(τ̂) ≥ 1 − α` holds on the retained sample, which was drawn at `τ̂`.
pub fn calibrate_tau(sampler: &Sampler<'_>, states_cal: &[f64], cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let level = 1.0 - cfg.alpha;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut seen_min, mut seen_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut tau = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut last = Vec::new();
    for k in 0..cfg.iterations {
        let llrs = terminal_llrs(sampler, tau, states_cal, cfg, k as u64)?;
        seen_min = seen_min.min(llrs[0]);
        seen_max = seen_max.max(llrs[llrs.len() - 1]);
        let e = exceedance(&llrs, tau);
        if tau.is_finite() {
            if e > cfg.alpha {
                lo = lo.max(tau);
            } else {
                hi = hi.min(tau);
            }
        }
        let q = quantile_sorted(&llrs, level);
        let mut tau_out = if tau.is_infinite() || (k + 1 == cfg.iterations && cfg.refine_steps == 0) {
            q
        } else {
            cfg.momentum * tau + (1.0 - cfg.momentum) * q
        };
        if lo.is_finite() && hi.is_finite() && !(tau_out > lo && tau_out < hi) {
            tau_out = 0.5 * (lo + hi);
        }
        log::debug!("calibration iteration {k}: tau_in={tau} exceedance={e} quantile={q} tau_out={tau_out}");
        history.push(IterationRecord {
            tau_in: tau.is_finite().then_some(tau),
            exceedance: e,
            quantile: q,
            tau_out,
        });
        tau = tau_out;
        last = llrs;
    }
    let converged = match history.as_slice() {
        [.., prev, cur] => {
            let iqr = quantile_sorted(&last, 0.75) - quantile_sorted(&last, 0.25);
            (cur.tau_out - prev.tau_out).abs() <= 0.05 * iqr
        }
        _ => true,
    };
    if !converged {
        log::warn!("calibration fixed point did not settle: last two thresholds differ by more than 5% of the IQR");
    }

    let mut refinement = Vec::new();
    if cfg.refine_steps > 0 {
        let sub = cfg.iterations as u64;
        let mut eval = |t: f64| -> Result<(Vec<f64>, f64)> {
            let llrs = terminal_llrs(sampler, t, states_cal, cfg, sub)?;
            let e = exceedance(&llrs, t);
            refinement.push(RefineRecord { tau: t, exceedance: e });
            Ok((llrs, e))
        };
        let span = (seen_max - seen_min).max(1.0);
        let mut lo_t = if lo.is_finite() { lo } else { seen_min - 0.1 * span };
        let mut width = span;
        while eval(lo_t)?.1 <= cfg.alpha {
            lo_t -= width;
            width *= 2.0;
            if width > 1e6 * span {
                return Err(Error::Invariant("cannot find a threshold exceeded more often than alpha".into()));
            }
        }
        let mut hi_t = if hi.is_finite() { hi } else { seen_max + 0.1 * span };
        let mut width = span;
        let (mut hi_llrs, mut e_hi) = eval(hi_t)?;
        while e_hi > cfg.alpha {
            lo_t = hi_t;
            hi_t += width;
            width *= 2.0;
            if width > 1e6 * span {
                return Err(Error::Invariant("cannot find a threshold exceeded at most alpha of the time".into()));
            }
            (hi_llrs, e_hi) = eval(hi_t)?;
        }
        for _ in 0..cfg.refine_steps {
            let mid = 0.5 * (lo_t + hi_t);
            let (llrs, e) = eval(mid)?;
            if e > cfg.alpha {
                lo_t = mid;
            } else {
                hi_t = mid;
                hi_llrs = llrs;
            }
        }
        tau = hi_t;
        last = hi_llrs;
    }

    Ok(CalibrationResult {
        tau_hat: tau,
        alpha: cfg.alpha,
        n: cfg.n,
        iterations: cfg.iterations,
        momentum: cfg.momentum,
        zeta: cfg.zeta,
        dkw_epsilon: dkw_epsilon(cfg.n, cfg.zeta)?,
        seed: cfg.seed,
        sampler_fingerprint: sampler.fingerprint().to_string(),
        variance_convention: VARIANCE_CONVENTION.to_string(),
        converged,
        history,
        refinement,
        h0_llrs: last,
    })
}

/// Fraction of `m` fresh chains at `tau_hat` whose terminal `ℓ_cum ≥ τ̂`.
pub fn realized_type1(
    sampler: &Sampler<'_>,
    tau_hat: f64,
    states: &[f64],
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("realized_type1 needs m >= 1"));
    }
    let out = run_h0_chains(sampler, tau_hat, states, m, seed, purpose::TYPE1_EVAL, 0, exec)?;
    Ok(out.iter().filter(|o| o.llr_cum >= tau_hat).count() as f64 / m as f64)
}
