mod common;

use common::{small_bandit_fixture, BanditFixture, CorruptedCritic};
use lrt_diffusion::calibration::{calibrate_tau, realized_type1, run_h0_chains, CalibrationConfig};
use lrt_diffusion::env;
use lrt_diffusion::exec::Execution;
use lrt_diffusion::metrics::{return_gap_report, GatedPolicy};
use lrt_diffusion::model::TwoHeadPolicy;
use lrt_diffusion::rng::{self, purpose, StreamRng};
use lrt_diffusion::sampler::{GateConfig, QComposeConfig, Sampler};
use lrt_diffusion::schedule::Schedule;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::OnceLock;

fn fixture() -> &'static BanditFixture {
    static FX: OnceLock<BanditFixture> = OnceLock::new();
    FX.get_or_init(|| small_bandit_fixture(5))
}

fn sampler(fx: &BanditFixture, gate: GateConfig) -> Sampler<'_> {
    Sampler::new(&fx.policy, &fx.schedule, gate, QComposeConfig::default(), None).unwrap()
}

fn cal_cfg(alpha: f64, seed: u64) -> CalibrationConfig {
    CalibrationConfig {
        alpha,
        n: 2000,
        seed,
        ..CalibrationConfig::default()
    }
}

/// Plain ancestral sampling from one head, written independently of the
/// gated sampler.
fn reference_chain(policy: &TwoHeadPolicy, sched: &Schedule, s: &[f64], conditional: bool, r: &mut StreamRng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
    for t in (1..=sched.steps()).rev() {
        let (eu, ec) = policy.forward_heads(s, &a, t).unwrap();
        let mu = sched.mean_from_eps(t, &a, if conditional { &ec } else { &eu }).unwrap();
        let sd = sched.sigma(t);
        a = mu
            .iter()
            .map(|m| if t > 1 { m + sd * r.sample::<f64, _>(StandardNormal) } else { *m })
            .collect();
    }
    a
}

#[test]
fn closed_and_open_gates_reproduce_single_head_sampling() {
    let fx = fixture();
    let smp = sampler(fx, GateConfig::default());
    for i in 0..50u64 {
        let s = &fx.states_cal[2 * i as usize..2 * i as usize + 2];
        for (tau, conditional) in [(f64::INFINITY, false), (f64::NEG_INFINITY, true)] {
            let mut r1 = rng::stream(9, purpose::SAMPLE, 0, i);
            let mut r2 = r1.clone();
            let (a, trace) = smp.sample_action(tau, s, &mut r1).unwrap();
            let b = reference_chain(&fx.policy, &fx.schedule, s, conditional, &mut r2);
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() <= 1e-12 * (1.0 + b[k].abs()), "chain {i} tau {tau}");
            }
            let beta = if conditional { 1.0 } else { 0.0 };
            assert!(trace.steps.iter().all(|st| st.beta == beta));
        }
    }
}

fn energy_distance(x: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
    let d = |p: &[f64; 2], q: &[f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let mean = |a: &[[f64; 2]], b: &[[f64; 2]]| {
        a.iter().map(|p| b.iter().map(|q| d(p, q)).sum::<f64>()).sum::<f64>() / (a.len() * b.len()) as f64
    };
    2.0 * mean(x, y) - mean(x, x) - mean(y, y)
}

#[test]
fn closed_gate_law_matches_reference_by_energy_distance() {
    let fx = fixture();
    let smp = sampler(fx, GateConfig::default());
    let s = &fx.states_cal[0..2];
    let n = 300;
    let x: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let a = smp.sample_action(f64::INFINITY, s, &mut rng::stream(1, purpose::SAMPLE, 0, i)).unwrap().0;
            [a[0], a[1]]
        })
        .collect();
    let y: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let a = reference_chain(&fx.policy, &fx.schedule, s, false, &mut rng::stream(2, purpose::SAMPLE, 0, i));
            [a[0], a[1]]
        })
        .collect();
    let p = permutation_pvalue(&x, &y, 3);
    assert!(p > 0.01, "p-value {p}");

    // the same test rejects the reference shifted by 0.25
    let shifted: Vec<[f64; 2]> = y.iter().map(|a| [a[0] + 0.25, a[1]]).collect();
    let p = permutation_pvalue(&x, &shifted, 3);
    assert!(p <= 0.01, "p-value under shift {p}");
}

fn permutation_pvalue(x: &[[f64; 2]], y: &[[f64; 2]], seed: u64) -> f64 {
    let observed = energy_distance(x, y);
    let mut pooled: Vec<[f64; 2]> = x.iter().chain(y).copied().collect();
    let mut r = rng::stream(seed, purpose::THEORY, 0, 0);
    let perms = 200;
    let mut ge = 0;
    for _ in 0..perms {
        pooled.shuffle(&mut r);
        if energy_distance(&pooled[..x.len()], &pooled[x.len()..]) >= observed {
            ge += 1;
        }
    }
    (ge + 1) as f64 / (perms + 1) as f64
}

#[test]
fn calibrated_level_holds_on_fresh_chains() {
    let fx = fixture();
    let smp = sampler(fx, GateConfig::default());
    let fresh = common::held_out_states(&fx.env, &fx.stats, 2000, 77);
    for alpha in [0.2, 0.1, 0.05] {
        let res = calibrate_tau(&smp, &fx.states_cal, &cal_cfg(alpha, 11)).unwrap();
        let t1 = realized_type1(&smp, res.tau_hat, &fresh, 4000, 12, Execution::Parallel).unwrap();
        // 3 standard errors at m = 4000 plus the DKW slack at n = 2000
        let tol = 3.0 * (alpha * (1.0 - alpha) / 4000.0).sqrt() + res.dkw_epsilon;
        assert!((t1 - alpha).abs() <= tol, "alpha {alpha}: realized {t1}, tol {tol}");
    }
}

#[test]
fn level_holds_across_repeated_calibrations() {
    let fx = fixture();
    let smp = sampler(fx, GateConfig::default());
    let alpha = 0.1;
    let trials = 8;
    let rates: Vec<f64> = (0..trials)
        .map(|k| {
            let res = calibrate_tau(&smp, &fx.states_cal, &cal_cfg(alpha, 100 + k)).unwrap();
            realized_type1(&smp, res.tau_hat, &fx.states_cal, 2000, 200 + k, Execution::Parallel).unwrap()
        })
        .collect();
    let mean = rates.iter().sum::<f64>() / trials as f64;
    // each trial has sd about sqrt(2 a (1-a) / 2000)
    let se = (2.0 * alpha * (1.0 - alpha) / 2000.0 / trials as f64).sqrt();
    assert!((mean - alpha).abs() <= 4.0 * se, "mean {mean} rates {rates:?}");
    assert!(rates.iter().all(|r| (r - alpha).abs() < 0.04), "{rates:?}");
}

#[test]
fn zero_strength_gate_is_the_unconditional_sampler() {
    let fx = fixture();
    let off = sampler(fx, GateConfig { beta_max: 0.0, ..GateConfig::default() });
    let base = sampler(fx, GateConfig::default());
    let s = &fx.states_cal[4..6];
    for i in 0..20 {
        let a = off.sample_action(-5.0, s, &mut rng::stream(1, 0, 0, i)).unwrap().0;
        let b = base.sample_action(f64::INFINITY, s, &mut rng::stream(1, 0, 0, i)).unwrap().0;
        assert_eq!(a, b);
    }
    // with no feedback the fixed point is a plain quantile and stays put
    let res = calibrate_tau(&off, &fx.states_cal, &cal_cfg(0.1, 3)).unwrap();
    assert!(res.converged);
    let t1 = realized_type1(&off, res.tau_hat, &fx.states_cal, 4000, 4, Execution::Parallel).unwrap();
    assert!((t1 - 0.1).abs() < 0.03, "realized {t1}");
    let taus: Vec<f64> = res.history.iter().skip(1).map(|h| h.quantile).collect();
    let spread = taus.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - taus.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread < 0.5, "quantiles {taus:?}");
}

#[test]
fn extreme_levels_calibrate() {
    let fx = fixture();
    let smp = sampler(fx, GateConfig::default());
    let hi = calibrate_tau(&smp, &fx.states_cal, &cal_cfg(0.9, 5)).unwrap();
    let lo = calibrate_tau(&smp, &fx.states_cal, &cal_cfg(0.02, 5)).unwrap();
    assert!(hi.tau_hat < lo.tau_hat);
    let t_hi = realized_type1(&smp, hi.tau_hat, &fx.states_cal, 4000, 6, Execution::Parallel).unwrap();
    assert!((t_hi - 0.9).abs() < 0.04, "realized {t_hi}");
    let t_lo = realized_type1(&smp, lo.tau_hat, &fx.states_cal, 4000, 6, Execution::Parallel).unwrap();
    assert!((t_lo - 0.02).abs() < 0.015, "realized {t_lo}");
}

#[test]
fn infinite_thresholds_fix_the_gate() {
    let fx = fixture();
    let smp = sampler(fx, GateConfig::default());
    assert_eq!(realized_type1(&smp, f64::INFINITY, &fx.states_cal, 500, 1, Execution::Parallel).unwrap(), 0.0);
    assert_eq!(realized_type1(&smp, f64::NEG_INFINITY, &fx.states_cal, 500, 1, Execution::Parallel).unwrap(), 1.0);
}

#[test]
fn sequential_and_parallel_chains_agree() {
    let fx = fixture();
    let smp = sampler(fx, GateConfig::default());
    let run = |e| run_h0_chains(&smp, 1.0, &fx.states_cal, 300, 8, purpose::CALIBRATION, 0, e).unwrap();
    let (a, b) = (run(Execution::Sequential), run(Execution::Parallel));
    assert_eq!(a, b);
}

#[test]
fn exact_critic_makes_the_gap_bound_tight() {
    let fx = fixture();
    let exact = CorruptedCritic {
        spec: fx.spec.clone(),
        stats: fx.stats.clone(),
        c: 0.0,
    };
    let lrt = sampler(fx, GateConfig::default());
    let q = Sampler::new(
        &fx.policy,
        &fx.schedule,
        GateConfig::default(),
        QComposeConfig {
            enabled: true,
            lambda_max: 0.5,
            grad_clip: 5.0,
            center: lrt_diffusion::sampler::Center::Unconditional,
            ..QComposeConfig::default()
        },
        Some(&exact),
    )
    .unwrap();
    let tau = calibrate_tau(&lrt, &fx.states_cal, &cal_cfg(0.1, 9)).unwrap().tau_hat;
    let states = env::sample_states(&fx.env, 500, 31).unwrap();
    let rep = return_gap_report(
        &fx.env,
        &fx.stats,
        &exact,
        GatedPolicy { sampler: &lrt, tau },
        GatedPolicy {
            sampler: &q,
            tau: f64::INFINITY,
        },
        &states,
        1000,
        13,
        Execution::Parallel,
    )
    .unwrap();
    assert!(rep.eps_in < 1e-9 && rep.eps_out < 1e-9, "{rep:?}");
    assert_eq!(rep.nu, 0.0);
    assert!(rep.holds);
    assert!(rep.slack.abs() < 1e-9, "{rep:?}");
}
