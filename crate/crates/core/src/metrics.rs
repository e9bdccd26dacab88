//! OOD measurement and executable checks of the calibration, stability and
//! return bounds.

use serde::{Deserialize, Serialize};

use crate::calibration::dkw_epsilon;
use crate::data::{destandardize, Standardization};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::labeling::ActionValue;
use crate::rng::{self, purpose};
use crate::sampler::{LlrTrace, Sampler};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub rate: f64,
    pub k: usize,
    pub q: f64,
    pub flags: Vec<bool>,
    /// Threshold on the action distance, shared by every query.
    pub radii_threshold: f64,
    /// How the action distance aggregates over the k neighbours.
    pub action_distance: String,
}

/// Brute-force kNN support proxy over a reference set in standardized space.
///
/// A query `(s, a)` is scored by the minimum action distance to the `k`
/// reference rows nearest in state; it is flagged when that exceeds the
/// `q`-th percentile of the same score computed leave-one-out on the
/// reference rows themselves.
#[derive(Debug, Clone)]
pub struct KnnSupport {
    states: Vec<f64>,
    actions: Vec<f64>,
    ds: usize,
    da: usize,
    k: usize,
    q: f64,
    radii: Vec<f64>,
    threshold: f64,
}

impl KnnSupport {
    pub const DEFAULT_K: usize = 50;
    pub const DEFAULT_Q: f64 = 95.0;

    #[allow(clippy::too_many_arguments)]
    pub fn new(states: &[f64], actions: &[f64], ds: usize, da: usize, k: usize, q: f64, exec: Execution) -> Result<Self> {
        if ds == 0 || da == 0 || states.is_empty() {
            return Err(Error::EmptyInput("kNN reference set"));
        }
        let rows = states.len() / ds;
        if !states.len().is_multiple_of(ds) || actions.len() != rows * da {
            return Err(Error::DimensionMismatch {
                expected: rows * da,
                got: actions.len(),
            });
        }
        if k == 0 || k >= rows {
            return Err(Error::invalid(format!("k = {k} must lie in 1..{rows} for leave-one-out radii")));
        }
        if !(q > 0.0 && q < 100.0) {
            return Err(Error::invalid("percentile q must lie in (0, 100)"));
        }
        let mut me = Self {
            states: states.to_vec(),
            actions: actions.to_vec(),
            ds,
            da,
            k,
            q,
            radii: Vec::new(),
            threshold: 0.0,
        };
        let radii = map_indexed(exec, rows, |i| me.score(&me.states[i * ds..(i + 1) * ds], &me.actions[i * da..(i + 1) * da], Some(i)));
        let mut sorted = radii.clone();
        sorted.sort_by(f64::total_cmp);
        me.threshold = crate::calibration::empirical_quantile(&sorted, q / 100.0)?;
        me.radii = radii;
        Ok(me)
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.ds
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Leave-one-out scores of the reference rows.
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Minimum action distance over the `k` state-nearest rows.
    pub fn score(&self, s: &[f64], a: &[f64], exclude: Option<usize>) -> f64 {
        let rows = self.len();
        let mut cand: Vec<(f64, usize)> = (0..rows)
            .filter(|&j| Some(j) != exclude)
            .map(|j| (sq_dist(s, &self.states[j * self.ds..(j + 1) * self.ds]), j))
            .collect();
        let k = self.k.min(cand.len());
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        }
        cand[..k]
            .iter()
            .map(|&(_, j)| sq_dist(a, &self.actions[j * self.da..(j + 1) * self.da]))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Flags each `(s, a)` pair; `states`/`actions` are flat row-major.
    pub fn report(&self, states: &[f64], actions: &[f64], exec: Execution) -> Result<OodReport> {
        let n = states.len() / self.ds;
        if !states.len().is_multiple_of(self.ds) || actions.len() != n * self.da {
            return Err(Error::DimensionMismatch {
                expected: n * self.da,
                got: actions.len(),
            });
        }
        if n == 0 {
            return Err(Error::EmptyInput("OOD queries"));
        }
        let flags = map_indexed(exec, n, |i| {
            self.score(&states[i * self.ds..(i + 1) * self.ds], &actions[i * self.da..(i + 1) * self.da], None) > self.threshold
        });
        let rate = flags.iter().filter(|&&f| f).count() as f64 / n as f64;
        Ok(OodReport {
            rate,
            k: self.k,
            q: self.q,
            flags,
            radii_threshold: self.threshold,
            action_distance: "min".into(),
        })
    }
}

/// One-shot kNN OOD rate.
#[allow(clippy::too_many_arguments)]
pub fn knn_ood_rate(
    ref_states: &[f64],
    ref_actions: &[f64],
    ds: usize,
    da: usize,
    query_states: &[f64],
    query_actions: &[f64],
    k: usize,
    q: f64,
    exec: Execution,
) -> Result<OodReport> {
    KnnSupport::new(ref_states, ref_actions, ds, da, k, q, exec)?.report(query_states, query_actions, exec)
}

/// `1 − (1 − α)^T`.
pub fn union_ood_bound(alpha: f64, steps: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha must lie in [0, 1]"));
    }
    if steps == 0 {
        return Ok(0.0);
    }
    Ok(-(steps as f64 * (-alpha).ln_1p()).exp_m1())
}

/// Largest level at which the gated policy is certified to beat pure critic
/// guidance; negative means infeasible.
pub fn alpha_max(delta_qhat: f64, eps_in: f64, nu: f64, eta_q: f64, steps: usize) -> Result<f64> {
    if !(nu > 0.0) || steps == 0 {
        return Err(Error::invalid("alpha_max needs nu > 0 and T >= 1"));
    }
    Ok((delta_qhat - 2.0 * eps_in - nu * eta_q) / (nu * steps as f64))
}

/// `V = Σ_t ‖Δμ_t‖² / σ²_t` using the LLR variance of each step.
pub fn variance_proxy(trace: &LlrTrace) -> f64 {
    trace.steps.iter().map(|r| r.dmu_norm * r.dmu_norm / r.sigma2).sum()
}

/// `β_max ‖Δμ‖ + λ_max σ² G`.
pub fn displacement_bound(beta_max: f64, dmu_norm: f64, lambda_max: f64, sigma2: f64, grad_clip: f64) -> Result<f64> {
    if [beta_max, dmu_norm, lambda_max, sigma2, grad_clip].iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("displacement bound inputs must be non-negative"));
    }
    Ok(beta_max * dmu_norm + lambda_max * sigma2 * grad_clip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub x: f64,
    pub empirical: f64,
    pub bound: f64,
    pub slack: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub variance_proxy: f64,
    pub mean: f64,
    pub rows: Vec<TailRow>,
    pub violations: usize,
}

/// Compares the upper tail of centered `ℓ_cum` against `exp(−x²/2V)` plus
/// the DKW slack at level `zeta`.
pub fn subgaussian_tail_check(h0_llrs: &[f64], v: f64, xs: &[f64], zeta: f64) -> Result<TailReport> {
    if h0_llrs.is_empty() {
        return Err(Error::EmptyInput("tail sample"));
    }
    if !(v > 0.0) {
        return Err(Error::invalid("variance proxy must be positive"));
    }
    let n = h0_llrs.len();
    let mean = h0_llrs.iter().sum::<f64>() / n as f64;
    let slack = dkw_epsilon(n, zeta)?;
    let rows: Vec<TailRow> = xs
        .iter()
        .map(|&x| {
            let empirical = h0_llrs.iter().filter(|&&l| l - mean >= x).count() as f64 / n as f64;
            let bound = (-x * x / (2.0 * v)).exp();
            TailRow {
                x,
                empirical,
                bound,
                slack,
                violated: empirical > bound + slack,
            }
        })
        .collect();
    let violations = rows.iter().filter(|r| r.violated).count();
    Ok(TailReport {
        variance_proxy: v,
        mean,
        rows,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub union_bound: f64,
    pub alpha_max: Option<f64>,
    pub variance_proxy: f64,
    /// Per-step bound `B_t` maximised over the inspected steps.
    pub displacement_bound_max: f64,
    /// Uniform bound `β_max D + λ_max S² G` when a clamp `D` is set.
    pub displacement_bound_step: Option<f64>,
    pub tail_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    pub delta_q_true: f64,
    pub delta_q_hat: f64,
    pub eps_in: f64,
    pub eps_out: f64,
    pub nu: f64,
    pub eta_lrt: f64,
    pub eta_q: f64,
    /// `Δ_Q̂ − 2ε_in − ν(η_Q + η_LRT)`.
    pub lower_bound: f64,
    pub slack: f64,
    pub holds: bool,
}

/// A sampler paired with the threshold it runs at.
pub struct GatedPolicy<'s, 'a> {
    pub sampler: &'s Sampler<'a>,
    pub tau: f64,
}

/// Monte-Carlo estimate of both sides of the return-comparison inequality
/// on an environment with analytic `Q` and support.
///
/// `critic` acts on standardized inputs; true `Q` and support act on raw
/// environment coordinates. `states` are raw and cycled `n` times.
#[allow(clippy::too_many_arguments)]
pub fn return_gap_report(
    env: &EnvSpec,
    stats: &Standardization,
    critic: &dyn ActionValue,
    lrt: GatedPolicy<'_, '_>,
    q: GatedPolicy<'_, '_>,
    states: &[f64],
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<GapReport> {
    let ds = env.state_dim();
    if states.is_empty() || !states.len().is_multiple_of(ds) || n == 0 {
        return Err(Error::EmptyInput("return-gap states"));
    }
    env.true_q(&vec![0.0; ds], &vec![0.0; env.action_dim()]).ok_or(Error::NoAnalyticQ)?;
    let rows = states.len() / ds;

    struct Draw {
        q_true: f64,
        q_hat: f64,
        on_support: bool,
    }
    let eval = |pol: &GatedPolicy<'_, '_>, sub: u64, i: usize| -> Result<Draw> {
        let s_raw = &states[(i % rows) * ds..(i % rows + 1) * ds];
        let s = stats.standardize_state(s_raw);
        let mut r = rng::stream(seed, purpose::THEORY, sub, i as u64);
        let mut ws = pol.sampler.workspace();
        let out = pol.sampler.sample_outcome(&mut ws, pol.tau, &s, &mut r)?;
        let a_env = destandardize(&out.action, Some(stats))?;
        let a_std = stats.standardize_action(&a_env);
        Ok(Draw {
            q_true: env.true_q(s_raw, &a_env).ok_or(Error::NoAnalyticQ)?,
            q_hat: critic.value(&s, &a_std),
            on_support: env.in_support(s_raw, &a_env).ok_or(Error::NoAnalyticQ)?,
        })
    };
    // both policies see the same states and the same per-chain streams
    let pairs = map_indexed(exec, n, |i| Ok::<_, Error>((eval(&lrt, 0, i)?, eval(&q, 0, i)?)));
    let pairs: Vec<(Draw, Draw)> = pairs.into_iter().collect::<Result<_>>()?;

    let (mut eps_in, mut eps_out) = (0.0f64, 0.0f64);
    let (mut dq_true, mut dq_hat, mut off_lrt, mut off_q) = (0.0, 0.0, 0usize, 0usize);
    for (a, b) in &pairs {
        dq_true += a.q_true - b.q_true;
        dq_hat += a.q_hat - b.q_hat;
        for d in [a, b] {
            let err = (d.q_hat - d.q_true).abs();
            if d.on_support {
                eps_in = eps_in.max(err);
            } else {
                eps_out = eps_out.max(err);
            }
        }
        off_lrt += usize::from(!a.on_support);
        off_q += usize::from(!b.on_support);
    }
    let nf = n as f64;
    let nu = (eps_out - eps_in).max(0.0);
    let (eta_lrt, eta_q) = (off_lrt as f64 / nf, off_q as f64 / nf);
    let delta_q_true = dq_true / nf;
    let delta_q_hat = dq_hat / nf;
    let lower_bound = delta_q_hat - 2.0 * eps_in - nu * (eta_q + eta_lrt);
    let slack = delta_q_true - lower_bound;
    Ok(GapReport {
        n,
        delta_q_true,
        delta_q_hat,
        eps_in,
        eps_out,
        nu,
        eta_lrt,
        eta_q,
        lower_bound,
        slack,
        // rounding in the sums may cost a few ulps
        holds: slack >= -1e-9 * (1.0 + delta_q_hat.abs()),
    })
}
