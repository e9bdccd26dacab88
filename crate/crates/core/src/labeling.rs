//! Expectile critic, advantages and top-p good/background labels.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetLabels};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::rng::{self, purpose};

/// A state-action value on the standardized scale.
pub trait ActionValue: Send + Sync {
    fn value(&self, s: &[f64], a: &[f64]) -> f64;

    /// `∇_a Q(s, a)` when the implementation can differentiate itself.
    fn analytic_gradient(&self, _s: &[f64], _a: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Stable identifier that enters sampler fingerprints.
    fn id(&self) -> String;
}

/// Central differences with step `h` along each action coordinate.
pub fn finite_difference_gradient(q: &dyn ActionValue, s: &[f64], a: &[f64], h: f64) -> Vec<f64> {
    let mut x = a.to_vec();
    (0..a.len())
        .map(|k| {
            x[k] = a[k] + h;
            let up = q.value(s, &x);
            x[k] = a[k] - h;
            let dn = q.value(s, &x);
            x[k] = a[k];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-4;

/// Analytic gradient when available, otherwise central differences.
pub fn action_gradient(q: &dyn ActionValue, s: &[f64], a: &[f64]) -> Vec<f64> {
    q.analytic_gradient(s, a)
        .unwrap_or_else(|| finite_difference_gradient(q, s, a, FD_STEP))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub expectile: f64,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 3e-4,
            steps: 2000,
            batch_size: 256,
            gamma: 0.99,
            expectile: 0.7,
            seed: 0,
        }
    }
}

/// Fitted `(Q̂, V̂)` pair on standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub state_dim: usize,
    pub action_dim: usize,
    pub q_net: Mlp,
    pub v_net: Mlp,
    pub q_params: Vec<f64>,
    pub v_params: Vec<f64>,
    pub gamma: f64,
    pub expectile: f64,
}

impl Critic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], gamma: f64, expectile: f64, seed: u64) -> Self {
        let mut qs = vec![state_dim + action_dim];
        qs.extend_from_slice(hidden);
        qs.push(1);
        let mut vs = vec![state_dim];
        vs.extend_from_slice(hidden);
        vs.push(1);
        let q_net = Mlp::new(qs, Activation::Silu, false);
        let v_net = Mlp::new(vs, Activation::Silu, false);
        let mut r = rng::stream(seed, purpose::INIT, 1, 0);
        let mut q_params = vec![0.0; q_net.param_count()];
        let mut v_params = vec![0.0; v_net.param_count()];
        q_net.init_params(&mut r, &mut q_params);
        v_net.init_params(&mut r, &mut v_params);
        Self {
            state_dim,
            action_dim,
            q_net,
            v_net,
            q_params,
            v_params,
            gamma,
            expectile,
        }
    }

    pub fn q(&self, s: &[f64], a: &[f64]) -> f64 {
        let mut x = Vec::with_capacity(self.state_dim + self.action_dim);
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        let mut c = self.q_net.new_cache();
        self.q_net.forward(&self.q_params, &x, &mut c)[0]
    }

    pub fn v(&self, s: &[f64]) -> f64 {
        let mut c = self.v_net.new_cache();
        self.v_net.forward(&self.v_params, s, &mut c)[0]
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(&self.q_net, &self.v_net, self.gamma, self.expectile)).expect("serialize"));
        for p in self.q_params.iter().chain(&self.v_params) {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl ActionValue for Critic {
    fn value(&self, s: &[f64], a: &[f64]) -> f64 {
        self.q(s, a)
    }

    fn analytic_gradient(&self, s: &[f64], a: &[f64]) -> Option<Vec<f64>> {
        let mut x = Vec::with_capacity(self.state_dim + self.action_dim);
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        let mut c = self.q_net.new_cache();
        self.q_net.forward(&self.q_params, &x, &mut c);
        let mut scratch = vec![0.0; self.q_params.len()];
        let mut gx = vec![0.0; x.len()];
        self.q_net.backward(&self.q_params, &mut c, &[1.0], &mut scratch, Some(&mut gx));
        Some(gx[self.state_dim..].to_vec())
    }

    fn id(&self) -> String {
        format!("critic:{}", self.content_hash())
    }
}

/// Asymmetric squared loss `|τ − 1{u<0}|·u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

fn expectile_grad(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    2.0 * w * u
}

/// Alternating fit: Q̂ by TD regression on `r + γ V̂(s')`, V̂ by expectile
/// regression on Q̂(s, a). Terminal rows regress Q̂ on `r` alone.
pub fn fit_expectile_critic(dataset: &Dataset, cfg: &CriticConfig) -> Result<Critic> {
    if !(cfg.expectile > 0.0 && cfg.expectile < 1.0) {
        return Err(Error::invalid("expectile must lie in (0, 1)"));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let (ds, da) = (dataset.state_dim, dataset.action_dim);
    let states = dataset.standardized_states()?;
    let next_states = dataset.standardized_next_states()?;
    let actions = dataset.standardized_actions()?;
    let mut critic = Critic::new(ds, da, &cfg.hidden, cfg.gamma, cfg.expectile, cfg.seed);
    let mut q_opt = Adam::new(critic.q_params.len(), cfg.learning_rate);
    let mut v_opt = Adam::new(critic.v_params.len(), cfg.learning_rate);
    let mut qc = critic.q_net.new_cache();
    let mut vc = critic.v_net.new_cache();
    let mut r = rng::stream(cfg.seed, purpose::CRITIC, 0, 0);
    let n = dataset.len();
    let b = cfg.batch_size.min(n).max(1);
    let mut x = vec![0.0; ds + da];

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();

        // Q step
        let mut gq = vec![0.0; critic.q_params.len()];
        let mut q_loss = 0.0;
        for &i in &idx {
            let s = &states[i * ds..(i + 1) * ds];
            let mut target = dataset.rewards[i] as f64;
            if dataset.dones[i] == 0 && cfg.gamma > 0.0 {
                let sn = &next_states[i * ds..(i + 1) * ds];
                target += cfg.gamma * critic.v_net.forward(&critic.v_params, sn, &mut vc)[0];
            }
            x[..ds].copy_from_slice(s);
            x[ds..].copy_from_slice(&actions[i * da..(i + 1) * da]);
            let q = critic.q_net.forward(&critic.q_params, &x, &mut qc)[0];
            let u = q - target;
            q_loss += u * u / b as f64;
            critic.q_net.backward(&critic.q_params, &mut qc, &[2.0 * u / b as f64], &mut gq, None);
        }

        // V step against the freshly evaluated Q̂
        let mut gv = vec![0.0; critic.v_params.len()];
        let mut v_loss = 0.0;
        for &i in &idx {
            let s = &states[i * ds..(i + 1) * ds];
            x[..ds].copy_from_slice(s);
            x[ds..].copy_from_slice(&actions[i * da..(i + 1) * da]);
            let q = critic.q_net.forward(&critic.q_params, &x, &mut qc)[0];
            let v = critic.v_net.forward(&critic.v_params, s, &mut vc)[0];
            let u = q - v;
            v_loss += expectile_loss(u, cfg.expectile) / b as f64;
            critic.v_net.backward(&critic.v_params, &mut vc, &[-expectile_grad(u, cfg.expectile) / b as f64], &mut gv, None);
        }

        if !q_loss.is_finite() || q_loss > 1e6 || !v_loss.is_finite() || v_loss > 1e6 {
            return Err(Error::Divergence {
                loss: q_loss.max(v_loss),
                step,
            });
        }
        q_opt.step(&mut critic.q_params, &gq);
        v_opt.step(&mut critic.v_params, &gv);
        if step % 500 == 0 {
            log::debug!("critic step {step}: q_loss {q_loss:.5} v_loss {v_loss:.5}");
        }
    }
    Ok(critic)
}

/// `A(s_i, a_i) = Q̂(s_i, a_i) − V̂(s_i)` for every row.
pub fn advantages(critic: &dyn AdvantageSource, dataset: &Dataset) -> Result<Vec<f64>> {
    let (ds, da) = (dataset.state_dim, dataset.action_dim);
    let states = dataset.standardized_states()?;
    let actions = dataset.standardized_actions()?;
    Ok((0..dataset.len())
        .map(|i| {
            let s = &states[i * ds..(i + 1) * ds];
            critic.q_value(s, &actions[i * da..(i + 1) * da]) - critic.v_value(s)
        })
        .collect())
}

/// Anything providing `(Q̂, V̂)` on standardized inputs.
pub trait AdvantageSource {
    fn q_value(&self, s: &[f64], a: &[f64]) -> f64;
    fn v_value(&self, s: &[f64]) -> f64;
}

impl AdvantageSource for Critic {
    fn q_value(&self, s: &[f64], a: &[f64]) -> f64 {
        self.q(s, a)
    }

    fn v_value(&self, s: &[f64]) -> f64 {
        self.v(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub advantages: Vec<f64>,
    pub kappa: f64,
    pub labels: Vec<u8>,
    pub p: f64,
}

impl LabelResult {
    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().map(|&c| c as f64).sum::<f64>() / self.labels.len() as f64
    }

    pub fn into_dataset_labels(self) -> DatasetLabels {
        DatasetLabels {
            advantages: self.advantages.iter().map(|&a| a as f32).collect(),
            labels: self.labels,
            kappa: self.kappa,
            p: self.p,
        }
    }
}

/// 1-based index of the `(1 − p)` order statistic among `n` values.
pub fn top_p_rank(n: usize, p: f64) -> usize {
    // guard against 0.8*10 = 8.000000000000002
    let k = ((1.0 - p) * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// κ is the ascending order statistic at `⌈(1−p)N⌉`; rows with `A ≥ κ` are good.
pub fn label_top_p(advs: &[f64], p: f64) -> Result<LabelResult> {
    if advs.is_empty() {
        return Err(Error::EmptyInput("advantages"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p must lie in (0, 1)"));
    }
    let mut sorted = advs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kappa = sorted[top_p_rank(advs.len(), p) - 1];
    let labels = advs.iter().map(|&a| (a >= kappa) as u8).collect();
    Ok(LabelResult {
        advantages: advs.to_vec(),
        kappa,
        labels,
        p,
    })
}

/// Oracle critic for the bandit: `Q = r(s, a)` and `V = E_behavior[r | s]`
/// estimated on the standardized scale.
pub struct RewardOracle<'a> {
    pub dataset: &'a Dataset,
}

impl AdvantageSource for RewardOracle<'_> {
    fn q_value(&self, s: &[f64], a: &[f64]) -> f64 {
        let st = self.dataset.stats.as_ref().expect("stats");
        self.dataset.env.true_q(&st.unscale_state(s), &st.unscale_action(a)).expect("analytic Q")
    }

    fn v_value(&self, _s: &[f64]) -> f64 {
        // global ranking is invariant to a state-independent baseline
        0.0
    }
}

impl<'a> RewardOracle<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        dataset.stats()?;
        check_dim(2, dataset.action_dim)?;
        if dataset.env.true_q(&[0.0, 0.0], &[0.0, 0.0]).is_none() {
            return Err(Error::NoAnalyticQ);
        }
        Ok(Self { dataset })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{BanditSpec, EnvSpec};
    use proptest::prelude::*;

    fn two_point_dataset(rewards: [f32; 2], reps: usize) -> Dataset {
        let n = 2 * reps;
        let mut d = Dataset {
            env: EnvSpec::Bandit(BanditSpec::default()),
            seed: 0,
            state_dim: 1,
            action_dim: 1,
            states: vec![0.5; n],
            actions: (0..n).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect(),
            rewards: (0..n).map(|i| rewards[i % 2]).collect(),
            next_states: vec![0.0; n],
            dones: vec![1; n],
            modes: None,
            stats: None,
            labels: None,
        };
        d.standardize().unwrap();
        d
    }

    fn fit_two_point(rewards: [f32; 2], expectile: f64) -> Critic {
        let d = two_point_dataset(rewards, 64);
        let cfg = CriticConfig {
            hidden: vec![16, 16],
            learning_rate: 3e-3,
            steps: 3000,
            batch_size: 64,
            gamma: 0.0,
            expectile,
            seed: 1,
        };
        fit_expectile_critic(&d, &cfg).unwrap()
    }

    #[test]
    fn median_expectile_recovers_mean() {
        let c = fit_two_point([0.0, 2.0], 0.5);
        let v = c.v(&[0.0]);
        assert!((v - 1.0).abs() < 0.03, "{v}");
    }

    #[test]
    fn expectile_07_on_two_points() {
        // minimizer of 0.3 v² + 0.7 (1 − v)² is v = 0.7
        let c = fit_two_point([0.0, 1.0], 0.7);
        let v = c.v(&[0.0]);
        assert!((v - 0.7).abs() < 0.03, "{v}");
    }

    #[test]
    fn expectile_half_is_half_ols() {
        for u in [-2.0, -0.3, 0.0, 0.7, 5.0] {
            assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
        }
    }

    #[test]
    fn label_examples() {
        let advs: Vec<f64> = (1..=10).map(f64::from).collect();
        let l = label_top_p(&advs, 0.2).unwrap();
        assert_eq!(l.kappa, 8.0);
        assert_eq!(l.labels, vec![0, 0, 0, 0, 0, 0, 0, 1, 1, 1]);
        let l = label_top_p(&[0.3; 17], 0.2).unwrap();
        assert!(l.labels.iter().all(|&c| c == 1));
        assert!(label_top_p(&[], 0.2).is_err());
    }

    struct Offset(f64);
    impl AdvantageSource for Offset {
        fn q_value(&self, s: &[f64], a: &[f64]) -> f64 {
            s[0] + a[0] + self.0
        }
        fn v_value(&self, s: &[f64]) -> f64 {
            s[0]
        }
    }

    #[test]
    fn advantages_of_constant_offsets() {
        let mut d = crate::env::gen_bandit_dataset(&BanditSpec::default(), 200, 3).unwrap();
        d.standardize().unwrap();
        let acts = d.standardized_actions().unwrap();
        let a0 = advantages(&Offset(0.0), &d).unwrap();
        let a3 = advantages(&Offset(3.0), &d).unwrap();
        for i in 0..d.len() {
            assert!((a0[i] - acts[2 * i]).abs() < 1e-12);
            assert!((a3[i] - acts[2 * i] - 3.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn labels_depend_only_on_ranks(
            advs in prop::collection::vec(-5.0f64..5.0, 1..200),
            p in 0.05f64..0.95,
        ) {
            let a = label_top_p(&advs, p).unwrap();
            let mapped: Vec<f64> = advs.iter().map(|x| (0.5 * x).exp() + 3.0 * x).collect();
            let b = label_top_p(&mapped, p).unwrap();
            prop_assert_eq!(a.labels, b.labels);
        }

        #[test]
        fn distinct_advantage_label_count(n in 1usize..500, p in 0.05f64..0.95, seed in 0u64..1000) {
            let advs: Vec<f64> = (0..n).map(|i| crate::rng::mix64(seed * 1000 + i as u64) as f64).collect();
            let l = label_top_p(&advs, p).unwrap();
            let count = l.labels.iter().filter(|&&c| c == 1).count();
            prop_assert_eq!(count, n - top_p_rank(n, p) + 1);
        }
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        struct Quad;
        impl ActionValue for Quad {
            fn value(&self, _s: &[f64], a: &[f64]) -> f64 {
                -(a[0] - 1.0).powi(2) - (a[1] + 2.0).powi(2)
            }
            fn id(&self) -> String {
                "quad".into()
            }
        }
        let g = action_gradient(&Quad, &[0.0], &[0.0, 0.0]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn critic_analytic_gradient_matches_fd() {
        let c = Critic::new(2, 2, &[16, 16], 0.99, 0.7, 4);
        let s = [0.3, -0.2];
        let a = [0.7, 0.1];
        let an = c.analytic_gradient(&s, &a).unwrap();
        let fd = finite_difference_gradient(&c, &s, &a, 1e-4);
        for k in 0..2 {
            assert!((an[k] - fd[k]).abs() <= 1e-4 * an[k].abs().max(1e-3));
        }
    }
}
