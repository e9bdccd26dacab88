//! Synthetic environments with known ground truth.
//!
//! The contextual bandit has an analytic reward, action-value and support, so
//! calibration, OOD and return claims can be checked exactly. The point-mass
//! task adds multi-step credit assignment for the critic.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng::{self, purpose, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditSpec {
    /// Good-mode map `g(s) = tanh(W s)`.
    pub w: [[f64; 2]; 2],
    pub background_std: f64,
    pub good_std: f64,
    pub p_good: f64,
    pub action_bound: f64,
}

impl Default for BanditSpec {
    fn default() -> Self {
        Self {
            w: [[1.0, 0.5], [-0.5, 1.0]],
            background_std: 0.5,
            good_std: 0.1,
            p_good: 0.2,
            action_bound: 2.0,
        }
    }
}

impl BanditSpec {
    pub fn good_action(&self, s: &[f64]) -> [f64; 2] {
        [
            (self.w[0][0] * s[0] + self.w[0][1] * s[1]).tanh(),
            (self.w[1][0] * s[0] + self.w[1][1] * s[1]).tanh(),
        ]
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let g = self.good_action(s);
        1.0 - ((a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2)).sqrt()
    }

    /// Union of the 3σ balls around both generating modes.
    pub fn in_support(&self, s: &[f64], a: &[f64]) -> bool {
        let g = self.good_action(s);
        let bg = (a[0].powi(2) + a[1].powi(2)).sqrt() / self.background_std;
        let good = ((a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2)).sqrt() / self.good_std;
        bg.min(good) <= 3.0
    }
}

/// Exact action-value of the one-step bandit.
pub fn true_q_bandit(spec: &BanditSpec, s: &[f64], a: &[f64]) -> f64 {
    spec.reward(s, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassSpec {
    pub step_size: f64,
    pub horizon: usize,
    pub behavior_noise: f64,
    pub gamma: f64,
    pub action_bound: f64,
    /// Initial states are uniform on `[-init_range, init_range]²`.
    pub init_range: f64,
}

impl Default for PointMassSpec {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            horizon: 20,
            behavior_noise: 0.3,
            gamma: 0.99,
            action_bound: 1.0,
            init_range: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Bandit(BanditSpec),
    PointMass(PointMassSpec),
}

impl EnvSpec {
    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvSpec::Bandit(_) => 1,
            EnvSpec::PointMass(p) => p.horizon,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvSpec::Bandit(_) => 0.0,
            EnvSpec::PointMass(p) => p.gamma,
        }
    }

    pub fn action_bounds(&self) -> (f64, f64) {
        let b = match self {
            EnvSpec::Bandit(b) => b.action_bound,
            EnvSpec::PointMass(p) => p.action_bound,
        };
        (-b, b)
    }

    pub fn reset(&self, rng: &mut StreamRng) -> Vec<f64> {
        match self {
            EnvSpec::Bandit(_) => vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
            EnvSpec::PointMass(p) => (0..2).map(|_| rng.random_range(-p.init_range..p.init_range)).collect(),
        }
    }

    /// One transition from `(s, a)`: next state and reward.
    pub fn step(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
        match self {
            EnvSpec::Bandit(b) => (vec![0.0; 2], b.reward(s, a)),
            EnvSpec::PointMass(p) => {
                let a: Vec<f64> = a.iter().map(|v| v.clamp(-p.action_bound, p.action_bound)).collect();
                let next = vec![s[0] + p.step_size * a[0], s[1] + p.step_size * a[1]];
                (next, -(s[0] * s[0] + s[1] * s[1]))
            }
        }
    }

    /// Analytic action-value, when the environment has one.
    pub fn true_q(&self, s: &[f64], a: &[f64]) -> Option<f64> {
        match self {
            EnvSpec::Bandit(b) => Some(true_q_bandit(b, s, a)),
            EnvSpec::PointMass(_) => None,
        }
    }

    /// Analytic support membership, when available.
    pub fn in_support(&self, s: &[f64], a: &[f64]) -> Option<bool> {
        match self {
            EnvSpec::Bandit(b) => Some(b.in_support(s, a)),
            EnvSpec::PointMass(_) => None,
        }
    }

    pub fn bandit(&self) -> Result<&BanditSpec> {
        match self {
            EnvSpec::Bandit(b) => Ok(b),
            _ => Err(Error::NoAnalyticQ),
        }
    }
}

pub fn gen_bandit_dataset(spec: &BanditSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n < 100 {
        return Err(Error::invalid("bandit dataset needs at least 100 rows"));
    }
    if !(0.0..1.0).contains(&spec.p_good) {
        return Err(Error::invalid("p_good must lie in [0, 1)"));
    }
    let mut r = rng::stream(seed, purpose::DATASET, 0, 0);
    let mut d = Dataset {
        env: EnvSpec::Bandit(spec.clone()),
        seed,
        state_dim: 2,
        action_dim: 2,
        states: Vec::with_capacity(2 * n),
        actions: Vec::with_capacity(2 * n),
        rewards: Vec::with_capacity(n),
        next_states: vec![0.0; 2 * n],
        dones: vec![1; n],
        modes: Some(Vec::with_capacity(n)),
        stats: None,
        labels: None,
    };
    for _ in 0..n {
        let s = [r.sample::<f64, _>(StandardNormal), r.sample::<f64, _>(StandardNormal)];
        let good = r.random::<f64>() < spec.p_good;
        let (center, sd) = if good {
            (spec.good_action(&s), spec.good_std)
        } else {
            ([0.0, 0.0], spec.background_std)
        };
        let a = [
            center[0] + sd * r.sample::<f64, _>(StandardNormal),
            center[1] + sd * r.sample::<f64, _>(StandardNormal),
        ];
        // stored values are f32; the reward is computed on what is stored
        let s32 = [s[0] as f32, s[1] as f32];
        let a32 = [a[0] as f32, a[1] as f32];
        let rew = spec.reward(&[s32[0] as f64, s32[1] as f64], &[a32[0] as f64, a32[1] as f64]);
        d.states.extend_from_slice(&s32);
        d.actions.extend_from_slice(&a32);
        d.rewards.push(rew as f32);
        d.modes.as_mut().unwrap().push(good as u8);
    }
    Ok(d)
}

pub fn gen_pointmass_dataset(spec: &PointMassSpec, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes < 10 {
        return Err(Error::invalid("point-mass dataset needs at least 10 episodes"));
    }
    let env = EnvSpec::PointMass(spec.clone());
    let n = episodes * spec.horizon;
    let mut r = rng::stream(seed, purpose::DATASET, 1, 0);
    let mut d = Dataset {
        env: env.clone(),
        seed,
        state_dim: 2,
        action_dim: 2,
        states: Vec::with_capacity(2 * n),
        actions: Vec::with_capacity(2 * n),
        rewards: Vec::with_capacity(n),
        next_states: Vec::with_capacity(2 * n),
        dones: Vec::with_capacity(n),
        modes: None,
        stats: None,
        labels: None,
    };
    for _ in 0..episodes {
        let mut s = env.reset(&mut r);
        for k in 0..spec.horizon {
            let a: Vec<f64> = s
                .iter()
                .map(|v| {
                    let noise: f64 = r.sample(StandardNormal);
                    (-v + spec.behavior_noise * noise).clamp(-spec.action_bound, spec.action_bound)
                })
                .collect();
            let (next, rew) = env.step(&s, &a);
            d.states.extend(s.iter().map(|v| *v as f32));
            d.actions.extend(a.iter().map(|v| *v as f32));
            d.rewards.push(rew as f32);
            d.next_states.extend(next.iter().map(|v| *v as f32));
            d.dones.push((k + 1 == spec.horizon) as u8);
            s = next;
        }
    }
    Ok(d)
}

/// `n` raw behavior-policy states (flat), independent of any dataset drawn
/// with a different seed.
pub fn sample_states(env: &EnvSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("sample_states needs n >= 1"));
    }
    let ds = match env {
        EnvSpec::Bandit(b) => gen_bandit_dataset(b, n.max(100), seed)?,
        EnvSpec::PointMass(p) => gen_pointmass_dataset(p, n.div_ceil(p.horizon).max(10), seed)?,
    };
    Ok(ds.states[..n * env.state_dim()].iter().map(|&v| v as f64).collect())
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Undiscounted episodic returns of `policy` (environment-scale actions).
///
/// Episode `i` draws from its own stream, so results do not depend on
/// scheduling.
pub fn rollout_returns<F>(env: &EnvSpec, policy: F, episodes: usize, seed: u64, exec: Execution) -> Vec<f64>
where
    F: Fn(&[f64], &mut StreamRng) -> Vec<f64> + Sync + Send,
{
    exec::map_indexed(exec, episodes, |i| {
        let mut r = rng::stream(seed, purpose::ROLLOUT, 0, i as u64);
        let mut s = env.reset(&mut r);
        let mut ret = 0.0;
        for _ in 0..env.horizon() {
            let a = policy(&s, &mut r);
            let (next, rew) = env.step(&s, &a);
            ret += rew;
            s = next;
        }
        ret
    })
}

/// Monte-Carlo `(mean, standard error)` of the episodic return.
pub fn rollout_return<F>(env: &EnvSpec, policy: F, episodes: usize, seed: u64, exec: Execution) -> (f64, f64)
where
    F: Fn(&[f64], &mut StreamRng) -> Vec<f64> + Sync + Send,
{
    mean_se(&rollout_returns(env, policy, episodes, seed, exec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandit_good_fraction_concentrates() {
        let d = gen_bandit_dataset(&BanditSpec::default(), 10_000, 1).unwrap();
        let frac = d.modes.as_ref().unwrap().iter().map(|&m| m as f64).sum::<f64>() / 1e4;
        assert!((frac - 0.2).abs() < 0.012, "{frac}");
    }

    #[test]
    fn bandit_without_good_mode_is_background_only() {
        let spec = BanditSpec {
            p_good: 0.0,
            ..BanditSpec::default()
        };
        let d = gen_bandit_dataset(&spec, 500, 2).unwrap();
        assert!(d.modes.unwrap().iter().all(|&m| m == 0));
    }

    #[test]
    fn best_reward_row_sits_on_good_mode() {
        let spec = BanditSpec::default();
        let d = gen_bandit_dataset(&spec, 5000, 3).unwrap();
        let best = (0..d.len()).max_by(|&i, &j| d.rewards[i].total_cmp(&d.rewards[j])).unwrap();
        let s: Vec<f64> = d.state(best).iter().map(|v| *v as f64).collect();
        let a: Vec<f64> = d.action(best).iter().map(|v| *v as f64).collect();
        let g = spec.good_action(&s);
        assert!(((a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2)).sqrt() < 0.3);
    }

    #[test]
    fn true_q_matches_stored_rewards() {
        let spec = BanditSpec::default();
        let s = [0.3, -0.8];
        let g = spec.good_action(&s);
        assert_eq!(true_q_bandit(&spec, &s, &g), 1.0);
        assert!((true_q_bandit(&spec, &s, &[g[0] + 0.6, g[1] + 0.8]) - 0.0).abs() < 1e-12);
        let d = gen_bandit_dataset(&spec, 1000, 4).unwrap();
        for i in 0..d.len() {
            let s: Vec<f64> = d.state(i).iter().map(|v| *v as f64).collect();
            let a: Vec<f64> = d.action(i).iter().map(|v| *v as f64).collect();
            assert_eq!(true_q_bandit(&spec, &s, &a) as f32, d.rewards[i]);
        }
    }

    #[test]
    fn bandit_reward_is_at_most_one() {
        let spec = BanditSpec::default();
        let d = gen_bandit_dataset(&spec, 1000, 8).unwrap();
        assert!(d.rewards.iter().all(|&r| r <= 1.0));
    }

    #[test]
    fn noiseless_pointmass_contracts_geometrically() {
        let spec = PointMassSpec {
            behavior_noise: 0.0,
            ..PointMassSpec::default()
        };
        let d = gen_pointmass_dataset(&spec, 10, 5).unwrap();
        assert_eq!(d.len(), 10 * 20);
        for i in 0..d.len() {
            let s = d.state(i);
            let ns = &d.next_states[i * 2..i * 2 + 2];
            let n0 = ((s[0] as f64).powi(2) + (s[1] as f64).powi(2)).sqrt();
            let n1 = ((ns[0] as f64).powi(2) + (ns[1] as f64).powi(2)).sqrt();
            assert!((n1 - 0.9 * n0).abs() < 1e-5, "{n1} vs {}", 0.9 * n0);
        }
    }

    #[test]
    fn pointmass_episode_structure() {
        let d = gen_pointmass_dataset(&PointMassSpec::default(), 12, 6).unwrap();
        assert_eq!(d.len(), 240);
        for ep in 0..12 {
            let dones = &d.dones[ep * 20..(ep + 1) * 20];
            assert_eq!(dones.iter().map(|&x| x as usize).sum::<usize>(), 1);
            assert_eq!(dones[19], 1);
        }
        assert!(d.rewards.iter().all(|&r| r <= 0.0));
        assert!(d.actions.iter().all(|&a| a.abs() <= 1.0));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = gen_bandit_dataset(&BanditSpec::default(), 300, 11).unwrap();
        let b = gen_bandit_dataset(&BanditSpec::default(), 300, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_policy_has_unit_return() {
        let env = EnvSpec::Bandit(BanditSpec::default());
        let spec = BanditSpec::default();
        let (m, se) = rollout_return(&env, |s, _| spec.good_action(s).to_vec(), 50, 1, Execution::Sequential);
        assert_eq!(m, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn background_policy_is_suboptimal() {
        let env = EnvSpec::Bandit(BanditSpec::default());
        let (m, se) = rollout_return(
            &env,
            |_, r| vec![0.5 * r.sample::<f64, _>(StandardNormal), 0.5 * r.sample::<f64, _>(StandardNormal)],
            2000,
            2,
            Execution::Sequential,
        );
        assert!(m + 3.0 * se < 1.0);
        assert!(m < 0.5);
    }
}
