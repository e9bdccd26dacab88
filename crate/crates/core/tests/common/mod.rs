#![allow(dead_code)]

use lrt_diffusion::data::{Dataset, Standardization};
use lrt_diffusion::env::{gen_bandit_dataset, BanditSpec, EnvSpec};
use lrt_diffusion::labeling::{advantages, fit_expectile_critic, label_top_p, ActionValue, Critic, CriticConfig};
use lrt_diffusion::model::{train, PolicyDims, TrainConfig, TwoHeadPolicy};
use lrt_diffusion::rng::{self, StreamRng};
use lrt_diffusion::schedule::Schedule;

pub struct BanditFixture {
    pub env: EnvSpec,
    pub spec: BanditSpec,
    pub dataset: Dataset,
    pub stats: Standardization,
    pub critic: Critic,
    pub policy: TwoHeadPolicy,
    pub schedule: Schedule,
    /// Held-out standardized states for calibration and H₀ evaluation.
    pub states_cal: Vec<f64>,
}

/// Small network on a 10-step schedule; cheap enough for repeated trials.
pub fn small_bandit_fixture(seed: u64) -> BanditFixture {
    let dims = PolicyDims {
        hidden: vec![32, 32],
        time_embed: 8,
        ..PolicyDims::new(2, 2)
    };
    bandit_fixture_with(2000, 20, seed, 10, dims)
}

/// Full pipeline on the bandit: generate, standardize, fit the expectile
/// critic, label the top 20% and train both heads.
pub fn bandit_fixture(rows: usize, epochs: usize, seed: u64) -> BanditFixture {
    bandit_fixture_with(rows, epochs, seed, 50, PolicyDims::new(2, 2))
}

/// Same pipeline with a chosen step count and network shape.
pub fn bandit_fixture_with(rows: usize, epochs: usize, seed: u64, steps: usize, dims: PolicyDims) -> BanditFixture {
    let spec = BanditSpec::default();
    let env = EnvSpec::Bandit(spec.clone());
    let mut dataset = gen_bandit_dataset(&spec, rows, seed).unwrap();
    dataset.standardize().unwrap();
    let critic = fit_expectile_critic(
        &dataset,
        &CriticConfig {
            seed,
            ..CriticConfig::default()
        },
    )
    .unwrap();
    let adv = advantages(&critic, &dataset).unwrap();
    dataset.labels = Some(label_top_p(&adv, 0.2).unwrap().into_dataset_labels());
    let schedule = Schedule::linear(steps, 1e-4, 2e-2).unwrap();
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let (policy, _) = train(TwoHeadPolicy::init(dims, seed), &dataset, &schedule, &cfg).unwrap();
    let stats = dataset.stats().unwrap().clone();
    let states_cal = held_out_states(&env, &stats, 2000, seed ^ 0xCA11);
    BanditFixture {
        env,
        spec,
        dataset,
        stats,
        critic,
        policy,
        schedule,
        states_cal,
    }
}

pub fn held_out_states(env: &EnvSpec, stats: &Standardization, n: usize, seed: u64) -> Vec<f64> {
    let mut r: StreamRng = rng::stream(seed, rng::purpose::CALIBRATION, 0xCA1, 0);
    (0..n).flat_map(|_| stats.standardize_state(&env.reset(&mut r))).collect()
}

/// Bandit critic equal to the true reward plus `c` outside the analytic
/// support; acts on standardized inputs.
pub struct CorruptedCritic {
    pub spec: BanditSpec,
    pub stats: Standardization,
    pub c: f64,
}

impl ActionValue for CorruptedCritic {
    fn value(&self, s: &[f64], a: &[f64]) -> f64 {
        let se = self.stats.unscale_state(s);
        let ae = self.stats.unscale_action(a);
        let bonus = if self.spec.in_support(&se, &ae) { 0.0 } else { self.c };
        self.spec.reward(&se, &ae) + bonus
    }

    fn id(&self) -> String {
        format!("corrupted-reward:{}", self.c)
    }
}
