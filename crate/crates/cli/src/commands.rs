use std::path::{Path, PathBuf};

use log::info;
use lrt_diffusion::calibration::{calibrate_tau, realized_type1, run_h0_chains, CalibrationConfig, CalibrationResult};
use lrt_diffusion::data::{destandardize, Dataset, Standardization};
use lrt_diffusion::env::{self, mean_se, EnvSpec};
use lrt_diffusion::exec::{map_indexed, Execution};
use lrt_diffusion::io::{self, Manifest};
use lrt_diffusion::labeling::{advantages, fit_expectile_critic, label_top_p, Critic, RewardOracle};
use lrt_diffusion::metrics::{
    displacement_bound, return_gap_report, subgaussian_tail_check, union_ood_bound, BoundReport, GatedPolicy, KnnSupport,
};
use lrt_diffusion::model::{train, PolicyDims, TwoHeadPolicy};
use lrt_diffusion::rng::{self, purpose};
use lrt_diffusion::sampler::{Center, GateConfig, QComposeConfig, Sampler};
use lrt_diffusion::schedule::Schedule;
use lrt_diffusion::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

const DATASET_DIR: &str = "dataset";
const LABELED_DIR: &str = "labeled";
const CRITIC_FILE: &str = "critic/critic.json";
const CHECKPOINT_DIR: &str = "checkpoint";
const CALIBRATION_DIR: &str = "calibration";
const SAMPLES_DIR: &str = "samples";
const EVALUATION_DIR: &str = "evaluation";
const SWEEP_DIR: &str = "sweep";
const THEORY_DIR: &str = "theory";
const REPORT_DIR: &str = "report";

// sub-seed tags; distinct tags give independent streams
const TAG_CAL_STATES: u64 = 0xC0;
const TAG_EVAL_STATES: u64 = 0xE0;
const TAG_SAMPLE_STATES: u64 = 0x50;
const TAG_THEORY_STATES: u64 = 0x70;

pub type CmdResult = Result<(), CliError>;

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Everything a subcommand needs: resolved config and the run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn sub_seed(&self, tag: u64) -> u64 {
        rng::derive_seed(&[self.cfg.seed, tag])
    }

    fn manifest(&self, command: &str) -> Result<Manifest, CliError> {
        Ok(Manifest::new(command, self.cfg.seed, serde_json::to_value(&self.cfg)?))
    }

    fn require(&self, rel: &str, hint: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Validation(format!("{} not found; run `lrtd {hint}` first", p.display())))
        }
    }

    fn labeled_dataset(&self) -> Result<Dataset, CliError> {
        Ok(io::load_dataset(&self.require(LABELED_DIR, "label")?)?)
    }

    fn stats(&self) -> Result<(Dataset, Standardization), CliError> {
        let ds = self.labeled_dataset()?;
        let st = ds.stats()?.clone();
        Ok((ds, st))
    }

    fn checkpoint(&self) -> Result<(TwoHeadPolicy, Schedule), CliError> {
        let (p, s, meta) = io::load_policy(&self.require(CHECKPOINT_DIR, "train")?)?;
        info!("loaded policy {}", meta.content_hash);
        Ok((p, s))
    }

    fn critic(&self) -> Result<Critic, CliError> {
        Ok(io::load_critic(&self.require(CRITIC_FILE, "label")?)?)
    }

    fn calibration(&self) -> Result<CalibrationResult, CliError> {
        Ok(io::load_calibration(&self.require(CALIBRATION_DIR, "calibrate")?)?)
    }

    /// Fresh standardized states independent of the training data.
    fn held_out(&self, stats: &Standardization, n: usize, tag: u64) -> Result<Vec<f64>, CliError> {
        let raw = env::sample_states(&self.cfg.env, n, self.sub_seed(tag))?;
        Ok(standardize_rows(stats, &raw, self.cfg.env.state_dim()))
    }

    fn calibration_config(&self, alpha: f64) -> CalibrationConfig {
        CalibrationConfig {
            alpha,
            seed: self.cfg.seed,
            execution: execution(),
            ..self.cfg.calibration.clone()
        }
    }
}

fn standardize_rows(stats: &Standardization, raw: &[f64], ds: usize) -> Vec<f64> {
    raw.chunks(ds).flat_map(|s| stats.standardize_state(s)).collect()
}

fn build_sampler<'a>(
    policy: &'a TwoHeadPolicy,
    schedule: &'a Schedule,
    gate: &GateConfig,
    qcfg: &QComposeConfig,
    critic: Option<&'a Critic>,
) -> Result<Sampler<'a>, CliError> {
    let critic = if qcfg.enabled {
        Some(critic.ok_or_else(|| CliError::Validation("critic composition needs a fitted critic".into()))? as _)
    } else {
        None
    };
    Ok(Sampler::new(policy, schedule, gate.clone(), qcfg.clone(), critic)?)
}

fn load_critic_if(run: &Run) -> Result<Option<Critic>, CliError> {
    if run.cfg.qcompose.enabled {
        Ok(Some(run.critic()?))
    } else {
        Ok(None)
    }
}

pub fn gen_data(run: &Run) -> CmdResult {
    let seed = run.cfg.seed;
    let mut ds = match &run.cfg.env {
        EnvSpec::Bandit(b) => env::gen_bandit_dataset(b, run.cfg.data.rows, seed)?,
        EnvSpec::PointMass(p) => env::gen_pointmass_dataset(p, run.cfg.data.episodes, seed)?,
    };
    ds.standardize()?;
    let dir = run.path(DATASET_DIR);
    io::save_dataset(&ds, &dir)?;
    io::write_json(&run.path("config.json"), &run.cfg)?;
    run.manifest("gen-data")?.save(&dir)?;
    println!("wrote {} rows to {}", ds.len(), dir.display());
    Ok(())
}

pub fn label(run: &Run) -> CmdResult {
    let mut ds = io::load_dataset(&run.require(DATASET_DIR, "gen-data")?)?;
    let ccfg = lrt_diffusion::labeling::CriticConfig {
        seed: run.cfg.seed,
        ..run.cfg.critic.clone()
    };
    let critic = fit_expectile_critic(&ds, &ccfg)?;
    let adv = if run.cfg.label.oracle_critic {
        advantages(&RewardOracle::new(&ds)?, &ds)?
    } else {
        advantages(&critic, &ds)?
    };
    let labels = label_top_p(&adv, run.cfg.label.p)?;
    let rate = labels.positive_rate();
    let kappa = labels.kappa;
    ds.labels = Some(labels.into_dataset_labels());
    let dir = run.path(LABELED_DIR);
    io::save_dataset(&ds, &dir)?;
    io::save_critic(&critic, &run.path(CRITIC_FILE))?;
    let mut m = run.manifest("label")?;
    m.inputs.insert("dataset".into(), run.path(DATASET_DIR));
    m.fingerprints.insert("critic".into(), critic.content_hash());
    m.save(&dir)?;
    println!("labeled {} rows: kappa {kappa:.6}, positive rate {rate:.4}", ds.len());
    Ok(())
}

pub fn train_cmd(run: &Run) -> CmdResult {
    let ds = run.labeled_dataset()?;
    let schedule = Schedule::from_params(&run.cfg.schedule)?;
    let dims = PolicyDims {
        hidden: run.cfg.policy.hidden.clone(),
        time_embed: run.cfg.policy.time_embed,
        ..PolicyDims::new(ds.state_dim, ds.action_dim)
    };
    let init = TwoHeadPolicy::init(dims, rng::derive_seed(&[run.cfg.seed, purpose::INIT]));
    let tcfg = lrt_diffusion::model::TrainConfig {
        seed: run.cfg.seed,
        ..run.cfg.train.clone()
    };
    let (policy, report) = train(init, &ds, &schedule, &tcfg)?;
    let dir = run.path(CHECKPOINT_DIR);
    let meta = io::save_policy(&policy, &schedule, Some(&tcfg), &dir)?;
    io::write_json(&dir.join("train_report.json"), &report)?;
    let mut m = run.manifest("train")?;
    m.inputs.insert("dataset".into(), run.path(LABELED_DIR));
    m.fingerprints.insert("policy".into(), meta.content_hash.clone());
    m.save(&dir)?;
    println!(
        "trained {} parameters over {} steps; final loss {:.5}",
        meta.param_count,
        report.steps,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn calibrate(run: &Run) -> CmdResult {
    let (_, stats) = run.stats()?;
    let (policy, schedule) = run.checkpoint()?;
    let critic = load_critic_if(run)?;
    let sampler = build_sampler(&policy, &schedule, &run.cfg.gate, &run.cfg.qcompose, critic.as_ref())?;
    let states = run.held_out(&stats, run.cfg.eval.calibration_states, TAG_CAL_STATES)?;
    let result = calibrate_tau(&sampler, &states, &run.calibration_config(run.cfg.calibration.alpha))?;
    let dir = run.path(CALIBRATION_DIR);
    io::save_calibration(&result, &dir)?;
    let mut m = run.manifest("calibrate")?;
    m.inputs.insert("checkpoint".into(), run.path(CHECKPOINT_DIR));
    m.fingerprints.insert("sampler".into(), sampler.fingerprint().to_string());
    m.save(&dir)?;
    println!(
        "tau_hat {:.6} at alpha {} (n {}, dkw epsilon {:.4}, converged {})",
        result.tau_hat, result.alpha, result.n, result.dkw_epsilon, result.converged
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    chain: usize,
    t: usize,
    beta: f64,
    dllr: f64,
    llr_cum: f64,
    dmu_norm: f64,
}

pub fn sample(run: &Run, tau: Option<f64>, n: usize) -> CmdResult {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let (_, stats) = run.stats()?;
    let (policy, schedule) = run.checkpoint()?;
    let critic = load_critic_if(run)?;
    let sampler = build_sampler(&policy, &schedule, &run.cfg.gate, &run.cfg.qcompose, critic.as_ref())?;
    let tau = match tau {
        Some(t) if t.is_nan() => return Err(CliError::Usage("--tau must not be NaN".into())),
        Some(t) => t,
        None => run.calibration()?.tau_for(&sampler)?,
    };
    let ds = sampler.state_dim();
    let states = run.held_out(&stats, n, TAG_SAMPLE_STATES)?;
    let seed = run.sub_seed(purpose::SAMPLE);
    let draws = map_indexed(execution(), n, |i| {
        let mut r = rng::stream(seed, purpose::SAMPLE, 0, i as u64);
        let s = &states[i * ds..(i + 1) * ds];
        let (a, trace) = sampler.sample_action(tau, s, &mut r)?;
        Ok::<_, Error>((destandardize(&a, Some(&stats))?, trace))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let dir = run.path(SAMPLES_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("samples.csv")).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut header = vec!["chain".to_string()];
    header.extend((0..ds).map(|d| format!("s{d}")));
    header.extend((0..sampler.action_dim()).map(|d| format!("a{d}")));
    header.push("llr_cum".into());
    w.write_record(&header).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut trace_rows = Vec::new();
    for (i, (a, trace)) in draws.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(stats.unscale_state(&states[i * ds..(i + 1) * ds]).iter().map(|v| v.to_string()));
        rec.extend(a.iter().map(|v| v.to_string()));
        rec.push(trace.llr_cum().to_string());
        w.write_record(&rec).map_err(|e| CliError::Internal(e.to_string()))?;
        trace_rows.extend(trace.steps.iter().map(|s| TraceRow {
            chain: i,
            t: s.t,
            beta: s.beta,
            dllr: s.dllr,
            llr_cum: s.llr_cum,
            dmu_norm: s.dmu_norm,
        }));
    }
    w.flush()?;
    io::write_csv(&dir.join("trace.csv"), &trace_rows)?;
    let mut m = run.manifest("sample")?;
    m.fingerprints.insert("sampler".into(), sampler.fingerprint().to_string());
    m.save(&dir)?;
    println!("wrote {n} samples at tau {tau} to {}", dir.display());
    Ok(())
}

/// Episodic returns plus the visited standardized state-action pairs.
struct Rollouts {
    returns: Vec<f64>,
    states: Vec<f64>,
    actions: Vec<f64>,
}

fn rollouts(env: &EnvSpec, stats: &Standardization, sampler: &Sampler<'_>, tau: f64, episodes: usize, seed: u64) -> Result<Rollouts, CliError> {
    let per = map_indexed(execution(), episodes, |i| {
        let mut r = rng::stream(seed, purpose::ROLLOUT, 0, i as u64);
        let mut ws = sampler.workspace();
        let mut s_env = env.reset(&mut r);
        let (mut ret, mut ss, mut aa) = (0.0, Vec::new(), Vec::new());
        for _ in 0..env.horizon() {
            let s = stats.standardize_state(&s_env);
            let out = sampler.sample_outcome(&mut ws, tau, &s, &mut r)?;
            let a_env = destandardize(&out.action, Some(stats))?;
            ss.extend_from_slice(&s);
            aa.extend(stats.standardize_action(&a_env));
            let (next, rew) = env.step(&s_env, &a_env);
            ret += rew;
            s_env = next;
        }
        Ok::<_, Error>((ret, ss, aa))
    });
    let mut out = Rollouts {
        returns: Vec::with_capacity(episodes),
        states: Vec::new(),
        actions: Vec::new(),
    };
    for p in per {
        let (ret, s, a) = p?;
        out.returns.push(ret);
        out.states.extend(s);
        out.actions.extend(a);
    }
    Ok(out)
}

fn knn_support(run: &Run, ds: &Dataset) -> Result<KnnSupport, CliError> {
    let states = ds.standardized_states()?;
    let actions = ds.standardized_actions()?;
    let k = run.cfg.eval.knn_k.min(ds.len().saturating_sub(1)).max(1);
    Ok(KnnSupport::new(&states, &actions, ds.state_dim, ds.action_dim, k, run.cfg.eval.knn_q, execution())?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub alpha: f64,
    pub tau_hat: f64,
    pub sampler_fingerprint: String,
    pub type1: f64,
    pub type1_chains: usize,
    pub return_mean: f64,
    pub return_se: f64,
    pub episodes: usize,
    pub ood: f64,
    pub union_bound: f64,
}

struct Metrics {
    type1: f64,
    return_mean: f64,
    return_se: f64,
    ood: f64,
}

fn measure(run: &Run, sampler: &Sampler<'_>, tau: f64, stats: &Standardization, knn: &KnnSupport) -> Result<Metrics, CliError> {
    let eval_states = run.held_out(stats, run.cfg.eval.calibration_states, TAG_EVAL_STATES)?;
    let type1 = realized_type1(
        sampler,
        tau,
        &eval_states,
        run.cfg.eval.type1_chains,
        run.sub_seed(purpose::TYPE1_EVAL),
        execution(),
    )?;
    let ro = rollouts(&run.cfg.env, stats, sampler, tau, run.cfg.eval.episodes, run.sub_seed(purpose::ROLLOUT))?;
    let (return_mean, return_se) = mean_se(&ro.returns);
    let ood = knn.report(&ro.states, &ro.actions, execution())?.rate;
    Ok(Metrics {
        type1,
        return_mean,
        return_se,
        ood,
    })
}

pub fn evaluate(run: &Run) -> CmdResult {
    let (ds, stats) = run.stats()?;
    let (policy, schedule) = run.checkpoint()?;
    let critic = load_critic_if(run)?;
    let sampler = build_sampler(&policy, &schedule, &run.cfg.gate, &run.cfg.qcompose, critic.as_ref())?;
    let cal = run.calibration()?;
    let tau = cal.tau_for(&sampler)?;
    let knn = knn_support(run, &ds)?;
    let m = measure(run, &sampler, tau, &stats, &knn)?;
    let ev = Evaluation {
        alpha: cal.alpha,
        tau_hat: tau,
        sampler_fingerprint: sampler.fingerprint().to_string(),
        type1: m.type1,
        type1_chains: run.cfg.eval.type1_chains,
        return_mean: m.return_mean,
        return_se: m.return_se,
        episodes: run.cfg.eval.episodes,
        ood: m.ood,
        union_bound: union_ood_bound(cal.alpha, run.cfg.gate.gated_steps(schedule.steps()))?,
    };
    let dir = run.path(EVALUATION_DIR);
    std::fs::create_dir_all(&dir)?;
    io::write_json(&dir.join("evaluation.json"), &ev)?;
    let mut man = run.manifest("evaluate")?;
    man.inputs.insert("calibration".into(), run.path(CALIBRATION_DIR));
    man.fingerprints.insert("sampler".into(), ev.sampler_fingerprint.clone());
    man.save(&dir)?;
    println!(
        "alpha {} tau {:.4}: type-I {:.4}, return {:.4} +/- {:.4}, OOD {:.4}",
        ev.alpha, ev.tau_hat, ev.type1, ev.return_mean, ev.return_se, ev.ood
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub tau_hat: f64,
    pub return_mean: f64,
    pub return_se: f64,
    pub type1: f64,
    pub ood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub section: String,
    pub key: String,
    pub metric: String,
    pub value: f64,
}

pub fn sweep(run: &Run) -> CmdResult {
    let (ds, stats) = run.stats()?;
    let (policy, schedule) = run.checkpoint()?;
    let critic = load_critic_if(run)?;
    let sampler = build_sampler(&policy, &schedule, &run.cfg.gate, &run.cfg.qcompose, critic.as_ref())?;
    let knn = knn_support(run, &ds)?;
    let cal_states = run.held_out(&stats, run.cfg.eval.calibration_states, TAG_CAL_STATES)?;
    let mut rows = Vec::new();
    for &alpha in &run.cfg.sweep.alphas {
        // same seeds across levels so differences reflect the level alone
        let cal = calibrate_tau(&sampler, &cal_states, &run.calibration_config(alpha))?;
        let m = measure(run, &sampler, cal.tau_hat, &stats, &knn)?;
        info!("alpha {alpha}: tau {:.4} type1 {:.4}", cal.tau_hat, m.type1);
        rows.push(SweepRow {
            alpha,
            tau_hat: cal.tau_hat,
            return_mean: m.return_mean,
            return_se: m.return_se,
            type1: m.type1,
            ood: m.ood,
        });
    }
    let long: Vec<LongRow> = rows
        .iter()
        .flat_map(|r| {
            [
                ("tau_hat", r.tau_hat),
                ("return_mean", r.return_mean),
                ("return_se", r.return_se),
                ("type1", r.type1),
                ("ood", r.ood),
            ]
            .map(|(metric, value)| LongRow {
                section: "sweep".into(),
                key: format!("alpha={}", r.alpha),
                metric: metric.into(),
                value,
            })
        })
        .collect();
    let dir = run.path(SWEEP_DIR);
    std::fs::create_dir_all(&dir)?;
    io::write_csv(&dir.join("sweep.csv"), &rows)?;
    io::write_csv(&dir.join("sweep_long.csv"), &long)?;
    let mut m = run.manifest("sweep")?;
    m.fingerprints.insert("sampler".into(), sampler.fingerprint().to_string());
    m.save(&dir)?;
    for r in &rows {
        println!(
            "alpha {:<5} tau {:>9.4} type-I {:.4} return {:.4} +/- {:.4} OOD {:.4}",
            r.alpha, r.tau_hat, r.type1, r.return_mean, r.return_se, r.ood
        );
    }
    Ok(())
}

pub fn check_theory(run: &Run) -> CmdResult {
    let (_, stats) = run.stats()?;
    let (policy, schedule) = run.checkpoint()?;
    let critic = run.critic()?;
    let sampler = build_sampler(&policy, &schedule, &run.cfg.gate, &run.cfg.qcompose, Some(&critic))?;
    let cal = run.calibration()?;
    let tau = cal.tau_for(&sampler)?;
    let gate = sampler.gate();
    let steps = schedule.steps();
    let exec = execution();

    // per-step bounds are enforced inside the sampler; record their maximum
    let eval_states = run.held_out(&stats, run.cfg.eval.calibration_states, TAG_EVAL_STATES)?;
    let n = run.cfg.eval.type1_chains;
    let seed = run.sub_seed(purpose::THEORY);
    let ds = sampler.state_dim();
    let rows = eval_states.len() / ds;
    let per_chain = map_indexed(exec, n, |i| {
        let mut r = rng::stream(seed, purpose::THEORY, 0, i as u64);
        let s = &eval_states[(i % rows) * ds..(i % rows + 1) * ds];
        let mut ws = sampler.workspace();
        let mut bmax = 0.0f64;
        let out = sampler.run_chain(&mut ws, tau, s, &mut r, &mut |v| bmax = bmax.max(v.displacement_bound))?;
        Ok::<_, Error>((out.variance_proxy, bmax))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let v = per_chain.iter().map(|c| c.0).fold(0.0, f64::max);
    let bmax = per_chain.iter().map(|c| c.1).fold(0.0, f64::max);

    let closed = run_h0_chains(
        &sampler,
        f64::INFINITY,
        &eval_states,
        n,
        seed,
        purpose::THEORY,
        1,
        exec,
    )?;
    let llrs: Vec<f64> = closed.iter().map(|o| o.llr_cum).collect();
    let tail = if v > 0.0 {
        let sd = v.sqrt();
        Some(subgaussian_tail_check(&llrs, v, &[0.5 * sd, sd, 2.0 * sd, 3.0 * sd], run.cfg.calibration.zeta)?)
    } else {
        None
    };

    let qcfg = sampler.qcompose();
    let step_bound = match gate.dmu_clamp {
        Some(d) => Some(displacement_bound(
            gate.beta_max,
            d,
            qcfg.effective_lambda_max(),
            schedule.max_sigma2(),
            qcfg.grad_clip,
        )?),
        None => None,
    };

    // critic-only guidance: closed gate with the critic step centred on the
    // unconditional mean
    let gap = if run.cfg.env.true_q(&vec![0.0; ds], &vec![0.0; sampler.action_dim()]).is_some() {
        let q_cfg = QComposeConfig {
            enabled: true,
            center: Center::Unconditional,
            lambda_max: if qcfg.lambda_max > 0.0 { qcfg.lambda_max } else { 0.1 },
            ..qcfg.clone()
        };
        let q_sampler = build_sampler(&policy, &schedule, gate, &q_cfg, Some(&critic))?;
        let raw = env::sample_states(&run.cfg.env, n.min(2000), run.sub_seed(TAG_THEORY_STATES))?;
        Some(return_gap_report(
            &run.cfg.env,
            &stats,
            &critic,
            GatedPolicy { sampler: &sampler, tau },
            GatedPolicy {
                sampler: &q_sampler,
                tau: f64::INFINITY,
            },
            &raw,
            n,
            seed,
            exec,
        )?)
    } else {
        None
    };
    let alpha_max = match &gap {
        Some(g) if g.nu > 0.0 => Some(lrt_diffusion::metrics::alpha_max(g.delta_q_hat, g.eps_in, g.nu, g.eta_q, steps)?),
        _ => None,
    };

    let report = BoundReport {
        union_bound: union_ood_bound(cal.alpha, gate.gated_steps(steps))?,
        alpha_max,
        variance_proxy: v,
        displacement_bound_max: bmax,
        displacement_bound_step: step_bound,
        tail_violations: tail.as_ref().map_or(0, |t| t.violations),
    };
    let dir = run.path(THEORY_DIR);
    std::fs::create_dir_all(&dir)?;
    io::write_json(&dir.join("bound_report.json"), &report)?;
    io::write_json(&dir.join("details.json"), &json!({ "tail": tail, "return_gap": gap, "alpha": cal.alpha, "tau_hat": tau }))?;
    let mut m = run.manifest("check-theory")?;
    m.fingerprints.insert("sampler".into(), sampler.fingerprint().to_string());
    m.save(&dir)?;
    println!(
        "union bound {:.4}, variance proxy {:.4}, max displacement bound {:.4}, tail violations {}, alpha_max {}",
        report.union_bound,
        report.variance_proxy,
        report.displacement_bound_max,
        report.tail_violations,
        report.alpha_max.map_or("n/a".into(), |a| format!("{a:.5}"))
    );
    if let Some(g) = &gap {
        println!("return gap lower bound {:.4} vs true {:.4}: holds {}", g.lower_bound, g.delta_q_true, g.holds);
    }
    Ok(())
}

/// Scalar fields of a JSON object as long-format rows.
fn flatten(section: &str, v: &Value, out: &mut Vec<LongRow>) {
    let Value::Object(map) = v else { return };
    for (k, x) in map {
        let value = match x {
            Value::Number(n) => n.as_f64(),
            Value::Bool(b) => Some(f64::from(u8::from(*b))),
            _ => None,
        };
        if let Some(value) = value {
            out.push(LongRow {
                section: section.into(),
                key: String::new(),
                metric: k.clone(),
                value,
            });
        }
    }
}

pub fn report(run: &Run) -> CmdResult {
    let mut summary = serde_json::Map::new();
    let mut long = Vec::new();
    let mut add = |name: &str, path: PathBuf| -> CmdResult {
        if path.exists() {
            let v: Value = io::read_json(&path)?;
            flatten(name, &v, &mut long);
            summary.insert(name.into(), v);
        }
        Ok(())
    };
    add("calibration", run.path(CALIBRATION_DIR).join("calibration.json"))?;
    add("evaluation", run.path(EVALUATION_DIR).join("evaluation.json"))?;
    add("bounds", run.path(THEORY_DIR).join("bound_report.json"))?;
    let sweep_path = run.path(SWEEP_DIR).join("sweep_long.csv");
    if sweep_path.exists() {
        let rows: Vec<LongRow> = io::read_csv(&sweep_path)?;
        let table: Vec<SweepRow> = io::read_csv(&run.path(SWEEP_DIR).join("sweep.csv"))?;
        summary.insert("sweep".into(), serde_json::to_value(&table)?);
        long.extend(rows);
    }
    if summary.is_empty() {
        return Err(CliError::Validation(format!("no results under {}", run.out.display())));
    }
    let dir = run.path(REPORT_DIR);
    std::fs::create_dir_all(&dir)?;
    io::write_json(&dir.join("summary.json"), &Value::Object(summary))?;
    io::write_csv(&dir.join("summary_long.csv"), &long)?;
    run.manifest("report")?.save(&dir)?;
    print_summary(&dir.join("summary.json"))?;
    Ok(())
}

fn print_summary(path: &Path) -> CmdResult {
    let v: Value = io::read_json(path)?;
    if let Some(c) = v.get("calibration") {
        println!("calibration: alpha {} tau_hat {}", c["alpha"], c["tau_hat"]);
    }
    if let Some(e) = v.get("evaluation") {
        println!(
            "evaluation: type-I {} return {} +/- {} OOD {}",
            e["type1"], e["return_mean"], e["return_se"], e["ood"]
        );
    }
    if let Some(b) = v.get("bounds") {
        println!("bounds: union {} alpha_max {} tail violations {}", b["union_bound"], b["alpha_max"], b["tail_violations"]);
    }
    if let Some(Value::Array(rows)) = v.get("sweep") {
        println!("sweep: {} levels", rows.len());
    }
    Ok(())
}
