use std::fs;

use lrt_diffusion::calibration::{calibrate_tau, CalibrationConfig};
use lrt_diffusion::env::{gen_bandit_dataset, gen_pointmass_dataset, BanditSpec, PointMassSpec};
use lrt_diffusion::exec::Execution;
use lrt_diffusion::io;
use lrt_diffusion::labeling::{advantages, fit_expectile_critic, label_top_p, Critic, CriticConfig};
use lrt_diffusion::model::{PolicyDims, TwoHeadPolicy};
use lrt_diffusion::sampler::{GateConfig, GateKind, QComposeConfig, Sampler};
use lrt_diffusion::schedule::Schedule;
use lrt_diffusion::Error;
use serde::{Deserialize, Serialize};

fn small_policy(seed: u64) -> TwoHeadPolicy {
    let dims = PolicyDims {
        hidden: vec![8, 8],
        time_embed: 4,
        ..PolicyDims::new(2, 2)
    };
    TwoHeadPolicy::init(dims, seed).freeze()
}

fn small_critic() -> Critic {
    Critic::new(2, 2, &[8], 0.99, 0.7, 5)
}

#[test]
fn labeled_dataset_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = gen_bandit_dataset(&BanditSpec::default(), 400, 11).unwrap();
    ds.standardize().unwrap();
    let critic = fit_expectile_critic(&ds, &CriticConfig { steps: 50, ..CriticConfig::default() }).unwrap();
    ds.labels = Some(label_top_p(&advantages(&critic, &ds).unwrap(), 0.2).unwrap().into_dataset_labels());
    io::save_dataset(&ds, dir.path()).unwrap();
    let back = io::load_dataset(dir.path()).unwrap();
    assert_eq!(back.states, ds.states);
    assert_eq!(back.actions, ds.actions);
    assert_eq!(back.rewards, ds.rewards);
    assert_eq!(back.dones, ds.dones);
    assert_eq!(back.modes, ds.modes);
    assert_eq!(back.stats, ds.stats);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.env, ds.env);
}

#[test]
fn pointmass_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_pointmass_dataset(&PointMassSpec::default(), 10, 2).unwrap();
    io::save_dataset(&ds, dir.path()).unwrap();
    let back = io::load_dataset(dir.path()).unwrap();
    assert_eq!(back.next_states, ds.next_states);
    assert!(back.modes.is_none());
    assert!(back.labels.is_none());
}

#[test]
fn truncated_array_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_bandit_dataset(&BanditSpec::default(), 100, 1).unwrap();
    io::save_dataset(&ds, dir.path()).unwrap();
    let p = dir.path().join("rewards.f32");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(io::load_dataset(dir.path()), Err(Error::LengthMismatch { expected: 100, found: 99, .. })));
}

#[test]
fn missing_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_bandit_dataset(&BanditSpec::default(), 100, 1).unwrap();
    io::save_dataset(&ds, dir.path()).unwrap();
    fs::remove_file(dir.path().join("actions.f32")).unwrap();
    assert!(matches!(io::load_dataset(dir.path()), Err(Error::MissingFile(_))));
}

#[test]
fn policy_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_policy(3);
    let sched = Schedule::linear(10, 1e-4, 2e-2).unwrap();
    let meta = io::save_policy(&p, &sched, None, dir.path()).unwrap();
    let (back, sched_back, meta_back) = io::load_policy(dir.path()).unwrap();
    assert_eq!(back.params(), p.params());
    assert_eq!(back.content_hash(), p.content_hash());
    assert_eq!(meta, meta_back);
    assert_eq!(sched_back.params(), sched.params());
    assert!(back.is_frozen());

    let s = [0.3, -0.2];
    let a = [0.1, 0.5];
    assert_eq!(back.forward_heads(&s, &a, 4).unwrap(), p.forward_heads(&s, &a, 4).unwrap());
}

#[test]
fn unfrozen_policy_cannot_be_saved() {
    let dir = tempfile::tempdir().unwrap();
    let p = TwoHeadPolicy::init(PolicyDims::new(2, 2), 1);
    let sched = Schedule::linear(10, 1e-4, 2e-2).unwrap();
    assert!(matches!(io::save_policy(&p, &sched, None, dir.path()), Err(Error::InvalidParameter(_))));
}

#[test]
fn corrupted_weight_fails_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let sched = Schedule::linear(10, 1e-4, 2e-2).unwrap();
    io::save_policy(&small_policy(3), &sched, None, dir.path()).unwrap();
    let p = dir.path().join("weights.f32");
    let mut bytes = fs::read(&p).unwrap();
    bytes[17] ^= 0x01;
    fs::write(&p, bytes).unwrap();
    assert!(matches!(io::load_policy(dir.path()), Err(Error::HashMismatch { .. })));
}

#[test]
fn truncated_weights_fail_length_check() {
    let dir = tempfile::tempdir().unwrap();
    let sched = Schedule::linear(10, 1e-4, 2e-2).unwrap();
    io::save_policy(&small_policy(3), &sched, None, dir.path()).unwrap();
    let p = dir.path().join("weights.f32");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(io::load_policy(dir.path()), Err(Error::LengthMismatch { .. })));
}

#[test]
fn future_format_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let sched = Schedule::linear(10, 1e-4, 2e-2).unwrap();
    io::save_policy(&small_policy(3), &sched, None, dir.path()).unwrap();
    let p = dir.path().join("model.json");
    let mut meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    meta["version"] = serde_json::json!(io::FORMAT_VERSION + 1);
    fs::write(&p, meta.to_string()).unwrap();
    assert!(matches!(io::load_policy(dir.path()), Err(Error::VersionMismatch { .. })));
}

#[test]
fn critic_round_trips_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("critic.json");
    let c = small_critic();
    io::save_critic(&c, &path).unwrap();
    let back = io::load_critic(&path).unwrap();
    let (s, a) = ([0.2, 0.1], [-0.4, 0.9]);
    assert_eq!(back.q(&s, &a), c.q(&s, &a));
    assert_eq!(back.content_hash(), c.content_hash());

    let text = fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["content_hash"] = serde_json::json!("00");
    fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(io::load_critic(&path), Err(Error::HashMismatch { .. })));
}

#[test]
fn calibration_round_trips_with_sample() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_policy(4);
    let sched = Schedule::linear(10, 1e-4, 2e-2).unwrap();
    let smp = Sampler::new(&p, &sched, GateConfig::default(), QComposeConfig::default(), None).unwrap();
    let states: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
    let cfg = CalibrationConfig {
        n: 200,
        iterations: 2,
        refine_steps: 4,
        execution: Execution::Sequential,
        ..CalibrationConfig::default()
    };
    let res = calibrate_tau(&smp, &states, &cfg).unwrap();
    io::save_calibration(&res, dir.path()).unwrap();
    let back = io::load_calibration(dir.path()).unwrap();
    assert_eq!(back, res);
    assert_eq!(back.h0_llrs.len(), 200);
    assert_eq!(back.tau_for(&smp).unwrap(), res.tau_hat);
}

#[test]
fn fingerprint_tracks_every_sampler_input() {
    let p = small_policy(4);
    let sched = Schedule::linear(10, 1e-4, 2e-2).unwrap();
    let critic = small_critic();
    let fp = |p: &TwoHeadPolicy, s: &Schedule, g: GateConfig, q: QComposeConfig| {
        Sampler::new(p, s, g, q, Some(&critic)).unwrap().fingerprint().to_string()
    };
    let base = fp(&p, &sched, GateConfig::default(), QComposeConfig::default());
    assert_eq!(base, fp(&p, &sched, GateConfig::default(), QComposeConfig::default()));
    assert_eq!(base.len(), 64);

    // a reloaded checkpoint is the same sampler
    let dir = tempfile::tempdir().unwrap();
    io::save_policy(&p, &sched, None, dir.path()).unwrap();
    let (p2, s2, _) = io::load_policy(dir.path()).unwrap();
    assert_eq!(base, fp(&p2, &s2, GateConfig::default(), QComposeConfig::default()));

    let variants = [
        fp(&small_policy(5), &sched, GateConfig::default(), QComposeConfig::default()),
        fp(&p, &Schedule::linear(10, 1e-4, 3e-2).unwrap(), GateConfig::default(), QComposeConfig::default()),
        fp(&p, &sched, GateConfig { beta_max: 0.5, ..GateConfig::default() }, QComposeConfig::default()),
        fp(&p, &sched, GateConfig { delta: 2.0, ..GateConfig::default() }, QComposeConfig::default()),
        fp(&p, &sched, GateConfig { kind: GateKind::Hard, ..GateConfig::default() }, QComposeConfig::default()),
        fp(&p, &sched, GateConfig { window: Some((1, 5)), ..GateConfig::default() }, QComposeConfig::default()),
        fp(&p, &sched, GateConfig { dmu_clamp: Some(1.0), ..GateConfig::default() }, QComposeConfig::default()),
        fp(&p, &sched, GateConfig::default(), QComposeConfig { enabled: true, ..QComposeConfig::default() }),
    ];
    for (i, v) in variants.iter().enumerate() {
        assert_ne!(&base, v, "variant {i}");
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Row {
    alpha: f64,
    tau_hat: f64,
    label: String,
}

#[test]
fn csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        Row { alpha: 0.1, tau_hat: 1.25, label: "a".into() },
        Row { alpha: 0.05, tau_hat: f64::INFINITY, label: "b,c".into() },
    ];
    let p = dir.path().join("t.csv");
    io::write_csv(&p, &rows).unwrap();
    assert_eq!(io::read_csv::<Row>(&p).unwrap(), rows);
    assert!(fs::read_to_string(&p).unwrap().starts_with("alpha,tau_hat,label\n"));
}

#[test]
fn manifest_records_command_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = io::Manifest::new("calibrate", 42, serde_json::json!({"alpha": 0.1}));
    m.fingerprints.insert("sampler".into(), "abc".into());
    m.save(dir.path()).unwrap();
    let v: serde_json::Value = io::read_json(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(v["command"], "calibrate");
    assert_eq!(v["seed"], 42);
    assert_eq!(v["fingerprints"]["sampler"], "abc");
    assert_eq!(v["version"], io::FORMAT_VERSION);
}
