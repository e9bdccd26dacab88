use lrt_diffusion::env::{gen_bandit_dataset, sample_states, BanditSpec, EnvSpec, PointMassSpec};
use lrt_diffusion::exec::Execution;
use lrt_diffusion::metrics::KnnSupport;
use lrt_diffusion::rng;
use rand::Rng;

/// Agreement of the kNN detector with the analytic support on a query mix of
/// behavior draws and uniform actions over the whole action box.
#[test]
fn knn_detector_agrees_with_analytic_support() {
    let spec = BanditSpec::default();
    let mut train = gen_bandit_dataset(&spec, 10_000, 1).unwrap();
    train.standardize().unwrap();
    let stats = train.stats().unwrap().clone();
    let knn = KnnSupport::new(
        &train.standardized_states().unwrap(),
        &train.standardized_actions().unwrap(),
        2,
        2,
        KnnSupport::DEFAULT_K,
        KnnSupport::DEFAULT_Q,
        Execution::Parallel,
    )
    .unwrap();

    let behavior = gen_bandit_dataset(&spec, 1000, 2).unwrap();
    let mut r = rng::stream(3, 0, 0, 0);
    let b = spec.action_bound;
    let mut queries: Vec<(Vec<f64>, Vec<f64>)> = (0..1000)
        .map(|i| {
            let s = behavior.state(i).iter().map(|&v| v as f64).collect();
            let a = behavior.action(i).iter().map(|&v| v as f64).collect();
            (s, a)
        })
        .collect();
    let raw_states = sample_states(&EnvSpec::Bandit(spec.clone()), 1000, 4).unwrap();
    queries.extend(raw_states.chunks(2).map(|s| (s.to_vec(), vec![r.random_range(-b..b), r.random_range(-b..b)])));

    let (mut agree, mut in_flagged, mut out_missed, mut n_in, mut n_out) = (0, 0, 0, 0, 0);
    for (s, a) in &queries {
        let flagged = knn.score(&stats.standardize_state(s), &stats.standardize_action(a), None) > knn.threshold();
        let ood = !spec.in_support(s, a);
        agree += usize::from(flagged == ood);
        if ood {
            n_out += 1;
            out_missed += usize::from(!flagged);
        } else {
            n_in += 1;
            in_flagged += usize::from(flagged);
        }
    }
    let rate = agree as f64 / queries.len() as f64;
    assert!(rate >= 0.9, "agreement {rate}: {in_flagged}/{n_in} in-support flagged, {out_missed}/{n_out} off-support missed");
}

#[test]
fn held_out_states_differ_from_training_rows() {
    let env = EnvSpec::Bandit(BanditSpec::default());
    let a = sample_states(&env, 200, 10).unwrap();
    let b = sample_states(&env, 200, 11).unwrap();
    assert_eq!(a.len(), 400);
    assert_ne!(a, b);
    assert_eq!(a, sample_states(&env, 200, 10).unwrap());

    let pm = EnvSpec::PointMass(PointMassSpec::default());
    let s = sample_states(&pm, 50, 1).unwrap();
    assert_eq!(s.len(), 100);
    assert!(s.iter().all(|v| v.is_finite()));
}
