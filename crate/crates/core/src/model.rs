//! Two-head ε-prediction network and its weighted training loop.
//!
//! A shared backbone maps `(s, a_t, emb(t))` to a feature vector; the
//! unconditional head is fit on every row, the conditional head only on rows
//! labeled good. Both heads are trained in the same pass over a batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::{time_embedding, Activation, Adam, Cache, Mlp};
use crate::rng::{self, purpose};
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed: usize,
}

impl PolicyDims {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            hidden: vec![64, 64],
            time_embed: 16,
        }
    }

    fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim + self.time_embed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Unconditional,
    Conditional,
}

#[derive(Debug, Clone)]
pub struct TwoHeadPolicy {
    dims: PolicyDims,
    backbone: Mlp,
    head: Mlp,
    params: Vec<f64>,
    frozen: bool,
}

/// Scratch buffers for repeated forward passes.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    input: Vec<f64>,
    backbone: Cache,
    head_u: Cache,
    head_c: Cache,
    pub eps_u: Vec<f64>,
    pub eps_c: Vec<f64>,
}

impl TwoHeadPolicy {
    fn architecture(dims: &PolicyDims) -> (Mlp, Mlp) {
        let mut sizes = vec![dims.input_dim()];
        sizes.extend_from_slice(&dims.hidden);
        let feat = *sizes.last().unwrap();
        (
            Mlp::new(sizes, Activation::Silu, true),
            Mlp::new(vec![feat, dims.action_dim], Activation::Silu, false),
        )
    }

    pub fn param_count_for(dims: &PolicyDims) -> usize {
        let (b, h) = Self::architecture(dims);
        b.param_count() + 2 * h.param_count()
    }

    /// Randomly initialized, trainable policy.
    pub fn init(dims: PolicyDims, seed: u64) -> Self {
        let (backbone, head) = Self::architecture(&dims);
        let mut params = vec![0.0; backbone.param_count() + 2 * head.param_count()];
        let mut r = rng::stream(seed, purpose::INIT, 0, 0);
        let nb = backbone.param_count();
        let nh = head.param_count();
        backbone.init_params(&mut r, &mut params[..nb]);
        head.init_params(&mut r, &mut params[nb..nb + nh]);
        head.init_params(&mut r, &mut params[nb + nh..]);
        Self {
            dims,
            backbone,
            head,
            params,
            frozen: false,
        }
    }

    /// Policy from an explicit parameter vector (checkpoint loading, tests).
    pub fn from_params(dims: PolicyDims, params: Vec<f64>, frozen: bool) -> Result<Self> {
        let (backbone, head) = Self::architecture(&dims);
        check_dim(backbone.param_count() + 2 * head.param_count(), params.len())?;
        Ok(Self {
            dims,
            backbone,
            head,
            params,
            frozen,
        })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Rounds parameters to `f32` precision and marks the policy frozen, so the
    /// in-memory policy and its checkpoint are bit-identical.
    pub fn freeze(mut self) -> Self {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
        self.frozen = true;
        self
    }

    /// Index ranges of `(backbone, head_u, head_c)` within [`Self::params`].
    pub fn param_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let nb = self.backbone.param_count();
        let nh = self.head.param_count();
        [0..nb, nb..nb + nh, nb + nh..nb + 2 * nh]
    }

    /// SHA-256 over the architecture and the f32 parameter bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.dims).expect("dims serialize"));
        for p in &self.params {
            h.update((*p as f32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            input: vec![0.0; self.dims.input_dim()],
            backbone: self.backbone.new_cache(),
            head_u: self.head.new_cache(),
            head_c: self.head.new_cache(),
            eps_u: vec![0.0; self.dims.action_dim],
            eps_c: vec![0.0; self.dims.action_dim],
        }
    }

    fn fill_input(&self, ws: &mut Workspace, s: &[f64], a_t: &[f64], t: usize) {
        let (ds, da) = (self.dims.state_dim, self.dims.action_dim);
        ws.input[..ds].copy_from_slice(s);
        ws.input[ds..ds + da].copy_from_slice(a_t);
        time_embedding(t, self.dims.time_embed, &mut ws.input[ds + da..]);
    }

    fn run(&self, params: &[f64], ws: &mut Workspace) {
        let [rb, ru, rc] = self.param_ranges();
        let feat = self.backbone.forward(&params[rb], &ws.input, &mut ws.backbone);
        let eu = self.head.forward(&params[ru], feat, &mut ws.head_u);
        ws.eps_u.copy_from_slice(eu);
        let ec = self.head.forward(&params[rc], ws.backbone.output(), &mut ws.head_c);
        ws.eps_c.copy_from_slice(ec);
    }

    /// Fast path: results land in `ws.eps_u` / `ws.eps_c`. Inputs are not
    /// validated.
    #[inline]
    pub fn forward_into(&self, ws: &mut Workspace, s: &[f64], a_t: &[f64], t: usize) {
        self.fill_input(ws, s, a_t, t);
        self.run(&self.params, ws);
    }

    /// Both heads' noise predictions at `(s, a_t, t)`.
    pub fn forward_heads(&self, s: &[f64], a_t: &[f64], t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dims.state_dim, s.len())?;
        check_dim(self.dims.action_dim, a_t.len())?;
        if t == 0 {
            return Err(Error::invalid("diffusion step must be >= 1"));
        }
        let mut ws = self.workspace();
        self.forward_into(&mut ws, s, a_t, t);
        Ok((ws.eps_u, ws.eps_c))
    }

    /// The shared backbone feature vector (for probing the shared-feature
    /// property).
    pub fn features(&self, s: &[f64], a_t: &[f64], t: usize) -> Result<Vec<f64>> {
        check_dim(self.dims.state_dim, s.len())?;
        check_dim(self.dims.action_dim, a_t.len())?;
        let mut ws = self.workspace();
        self.forward_into(&mut ws, s, a_t, t);
        Ok(ws.backbone.output().to_vec())
    }

    /// Jacobian `∂ε̂_head / ∂a_t` (row-major `[out × in]`) by backpropagation.
    pub fn action_jacobian(&self, s: &[f64], a_t: &[f64], t: usize, head: Head) -> Result<Vec<f64>> {
        check_dim(self.dims.state_dim, s.len())?;
        check_dim(self.dims.action_dim, a_t.len())?;
        let da = self.dims.action_dim;
        let ds = self.dims.state_dim;
        let [rb, ru, rc] = self.param_ranges();
        let hr = if head == Head::Unconditional { ru } else { rc };
        let mut ws = self.workspace();
        let mut jac = vec![0.0; da * da];
        let mut scratch = vec![0.0; self.params.len()];
        let mut g_feat = vec![0.0; self.backbone.output_dim()];
        let mut g_in = vec![0.0; self.dims.input_dim()];
        for k in 0..da {
            self.forward_into(&mut ws, s, a_t, t);
            let mut cot = vec![0.0; da];
            cot[k] = 1.0;
            let hc = if head == Head::Unconditional { &mut ws.head_u } else { &mut ws.head_c };
            self.head.backward(&self.params[hr.clone()], hc, &cot, &mut scratch[hr.clone()], Some(&mut g_feat));
            self.backbone.backward(&self.params[rb.clone()], &mut ws.backbone, &g_feat, &mut scratch[rb.clone()], Some(&mut g_in));
            jac[k * da..(k + 1) * da].copy_from_slice(&g_in[ds..ds + da]);
        }
        Ok(jac)
    }

    /// Weighted ε-prediction loss and its gradient at `params`.
    pub fn loss_and_grad(&self, params: &[f64], batch: &TrainBatch) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let loss = self.accumulate_loss(params, batch, &mut grad);
        (loss, grad)
    }

    fn accumulate_loss(&self, params: &[f64], batch: &TrainBatch, grad: &mut [f64]) -> f64 {
        let [rb, ru, rc] = self.param_ranges();
        let (ds, da) = (self.dims.state_dim, self.dims.action_dim);
        let n = batch.len();
        let n_pos = batch.cond_weight.iter().filter(|w| w.is_some()).count();
        let mut ws = self.workspace();
        let mut a_t = vec![0.0; da];
        let mut g_feat = vec![0.0; self.backbone.output_dim()];
        let mut g_tmp = vec![0.0; self.backbone.output_dim()];
        let mut g_out = vec![0.0; da];
        let mut loss = 0.0;
        let sched = batch.schedule;
        for i in 0..n {
            let s = &batch.states[i * ds..(i + 1) * ds];
            let a0 = &batch.actions[i * da..(i + 1) * da];
            let eps = &batch.noise[i * da..(i + 1) * da];
            let t = batch.steps[i];
            sched.diffuse_into(t, a0, eps, &mut a_t);
            self.fill_input(&mut ws, s, &a_t, t);
            self.run(params, &mut ws);

            let scale_u = batch.uncond_weight[i] / n as f64;
            let mut sq = 0.0;
            for k in 0..da {
                let r = ws.eps_u[k] - eps[k];
                sq += r * r;
                g_out[k] = 2.0 * scale_u * r;
            }
            loss += scale_u * sq;
            self.head.backward(&params[ru.clone()], &mut ws.head_u, &g_out, &mut grad[ru.clone()], Some(&mut g_feat));

            if let Some(wc) = batch.cond_weight[i] {
                let scale_c = wc / n_pos as f64;
                let mut sq = 0.0;
                for k in 0..da {
                    let r = ws.eps_c[k] - eps[k];
                    sq += r * r;
                    g_out[k] = 2.0 * scale_c * r;
                }
                loss += scale_c * sq;
                self.head.backward(&params[rc.clone()], &mut ws.head_c, &g_out, &mut grad[rc.clone()], Some(&mut g_tmp));
                for (f, x) in g_feat.iter_mut().zip(&g_tmp) {
                    *f += x;
                }
            }
            self.backbone.backward(&params[rb.clone()], &mut ws.backbone, &g_feat, &mut grad[rb.clone()], None);
        }
        loss
    }
}

/// A fully materialized training batch: inputs, diffusion noise, steps and
/// per-head weights. `cond_weight[i]` is `None` for background rows.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub schedule: &'a Schedule,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub noise: Vec<f64>,
    pub steps: Vec<usize>,
    pub uncond_weight: Vec<f64>,
    pub cond_weight: Vec<Option<f64>>,
}

impl TrainBatch<'_> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Class-balanced factor times the within-positive soft weight.
    Balanced,
    /// Every row weighted 1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decay of the positive-rate EMA.
    pub ema_decay: f64,
    /// Initial positive rate; defaults to the dataset-wide rate.
    pub rho_init: Option<f64>,
    /// Advantage temperature of the soft weight.
    pub tau_a: f64,
    /// Cap on the soft weight.
    pub u_max: f64,
    /// Denominator guard of the class-balanced factor.
    pub eps_w: f64,
    pub weighting: Weighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 256,
            learning_rate: 1e-3,
            ema_decay: 0.99,
            rho_init: None,
            tau_a: 1.0,
            u_max: 2.0,
            eps_w: 1e-8,
            weighting: Weighting::Balanced,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_a > 0.0) {
            return Err(Error::invalid("tau_a must be positive"));
        }
        if !(self.u_max >= 1.0) {
            return Err(Error::invalid("u_max must be >= 1"));
        }
        if !(self.eps_w > 0.0) {
            return Err(Error::invalid("eps_w must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Class-balanced factor `1/(2ρ̂ + ε)` for positives, `1/(2(1−ρ̂) + ε)` otherwise.
pub fn class_balance_weight(positive: bool, rho_hat: f64, eps_w: f64) -> f64 {
    if positive {
        1.0 / (2.0 * rho_hat + eps_w)
    } else {
        1.0 / (2.0 * (1.0 - rho_hat) + eps_w)
    }
}

/// Within-positive soft weight, `1` for background rows.
pub fn soft_positive_weight(positive: bool, advantage: f64, kappa: f64, tau_a: f64, u_max: f64) -> f64 {
    if !positive {
        return 1.0;
    }
    1.0 + ((advantage - kappa) / tau_a).max(0.0).min(u_max - 1.0)
}

/// Normalizes raw weights to unit mean. Exactly `1.0` everywhere when all raw
/// weights are equal.
pub fn normalize_unit_mean(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("weight batch"));
    }
    let max = raw.iter().copied().fold(f64::MIN, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::invalid("weights must be positive and finite"));
    }
    let rel: Vec<f64> = raw.iter().map(|w| w / max).collect();
    let sum: f64 = rel.iter().sum();
    let k = raw.len() as f64 / sum;
    Ok(rel.into_iter().map(|r| r * k).collect())
}

/// Batch weights `w̃_i = w_cb(c_i)·u_i / mean_j(w_cb(c_j)·u_j)`.
pub fn batch_weights(labels: &[u8], advantages: &[f64], kappa: f64, rho_hat: f64, cfg: &TrainConfig) -> Result<Vec<f64>> {
    check_dim(labels.len(), advantages.len())?;
    let raw: Vec<f64> = labels
        .iter()
        .zip(advantages)
        .map(|(&c, &a)| {
            let pos = c == 1;
            match cfg.weighting {
                Weighting::Uniform => 1.0,
                Weighting::Balanced => {
                    class_balance_weight(pos, rho_hat, cfg.eps_w) * soft_positive_weight(pos, a, kappa, cfg.tau_a, cfg.u_max)
                }
            }
        })
        .collect();
    normalize_unit_mean(&raw)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub final_rho_hat: f64,
    pub steps: usize,
}

/// Trains both heads on a labeled dataset and returns the frozen policy.
pub fn train(
    policy: TwoHeadPolicy,
    dataset: &Dataset,
    sched: &Schedule,
    cfg: &TrainConfig,
) -> Result<(TwoHeadPolicy, TrainReport)> {
    cfg.validate()?;
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("training requires a labeled dataset"))?;
    check_dim(policy.dims.state_dim, dataset.state_dim)?;
    check_dim(policy.dims.action_dim, dataset.action_dim)?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyInput("dataset"));
    }
    let states = dataset.standardized_states()?;
    let actions = dataset.standardized_actions()?;
    let (ds, da) = (dataset.state_dim, dataset.action_dim);
    let global_rate = labels.labels.iter().filter(|&&c| c == 1).count() as f64 / n as f64;
    let mut rho = cfg.rho_init.unwrap_or(global_rate).clamp(1e-6, 1.0 - 1e-6);

    let mut policy = policy;
    let mut params = std::mem::take(&mut policy.params);
    let mut opt = Adam::new(params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(cfg.seed, purpose::TRAIN, 0, 0);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let lab: Vec<u8> = chunk.iter().map(|&i| labels.labels[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| labels.advantages[i] as f64).collect();
            let batch_rate = lab.iter().filter(|&&c| c == 1).count() as f64 / b as f64;
            rho = (cfg.ema_decay * rho + (1.0 - cfg.ema_decay) * batch_rate).clamp(1e-6, 1.0 - 1e-6);

            let w_u = batch_weights(&lab, &adv, labels.kappa, rho, cfg)?;
            let pos: Vec<usize> = (0..b).filter(|&k| lab[k] == 1).collect();
            let mut cond_weight = vec![None; b];
            if !pos.is_empty() {
                let lp: Vec<u8> = pos.iter().map(|&k| lab[k]).collect();
                let ap: Vec<f64> = pos.iter().map(|&k| adv[k]).collect();
                let w_c = batch_weights(&lp, &ap, labels.kappa, rho, cfg)?;
                for (k, w) in pos.iter().zip(w_c) {
                    cond_weight[*k] = Some(w);
                }
            }

            let mut batch = TrainBatch {
                schedule: sched,
                states: Vec::with_capacity(b * ds),
                actions: Vec::with_capacity(b * da),
                noise: Vec::with_capacity(b * da),
                steps: Vec::with_capacity(b),
                uncond_weight: w_u,
                cond_weight,
            };
            for &i in chunk {
                batch.states.extend_from_slice(&states[i * ds..(i + 1) * ds]);
                batch.actions.extend_from_slice(&actions[i * da..(i + 1) * da]);
                batch.steps.push(r.random_range(1..=sched.steps()));
                for _ in 0..da {
                    batch.noise.push(r.sample::<f64, _>(StandardNormal));
                }
            }
            let (loss, grad) = policy.loss_and_grad(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: bi,
                    detail: format!("batch of {b} rows, rho_hat {rho:.4}"),
                });
            }
            opt.step(&mut params, &grad);
            epoch_loss += loss;
            batches += 1;
            report.steps += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        log::debug!("epoch {epoch}: loss {mean:.5} rho_hat {rho:.4}");
        report.epoch_loss.push(mean);
    }
    report.final_rho_hat = rho;
    policy.params = params;
    Ok((policy.freeze(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_policy() -> TwoHeadPolicy {
        let dims = PolicyDims {
            state_dim: 2,
            action_dim: 2,
            hidden: vec![8, 8],
            time_embed: 4,
        };
        TwoHeadPolicy::init(dims, 3)
    }

    #[test]
    fn class_balance_examples() {
        assert_relative_eq!(class_balance_weight(true, 0.5, 0.0), 1.0);
        assert_relative_eq!(class_balance_weight(true, 0.2, 1e-8), 2.5, max_relative = 1e-7);
        assert_relative_eq!(class_balance_weight(false, 0.2, 1e-8), 0.625, max_relative = 1e-7);
        let a = class_balance_weight(true, 0.2, 1e-8);
        let b = class_balance_weight(true, 0.2, 0.0);
        assert!(((a - b) / b).abs() < 1e-7);
    }

    #[test]
    fn soft_weight_examples() {
        assert_eq!(soft_positive_weight(false, 10.0, 0.0, 1.0, 3.0), 1.0);
        assert_eq!(soft_positive_weight(true, 0.7, 0.7, 0.5, 3.0), 1.0);
        assert_relative_eq!(soft_positive_weight(true, 0.7 + 2.0 * 0.5, 0.7, 0.5, 3.0), 3.0);
        assert_relative_eq!(soft_positive_weight(true, 100.0, 0.7, 0.5, 3.0), 3.0);
    }

    #[test]
    fn batch_weight_examples() {
        let cfg = TrainConfig {
            u_max: 1.0,
            ..TrainConfig::default()
        };
        let w = batch_weights(&[0; 7], &[0.0; 7], 0.0, 0.3, &cfg).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));

        let mut labels = [0u8; 10];
        labels[3] = 1;
        labels[8] = 1;
        let w = batch_weights(&labels, &[0.0; 10], 0.0, 0.2, &cfg).unwrap();
        // raw 2.5 / 0.625, mean (2*2.5 + 8*0.625)/10 = 1.0
        assert_relative_eq!(w[3], 2.5, max_relative = 1e-7);
        assert_relative_eq!(w[0], 0.625, max_relative = 1e-7);
        assert_relative_eq!(w.iter().sum::<f64>() / 10.0, 1.0, max_relative = 1e-12);
        assert!(batch_weights(&[], &[], 0.0, 0.2, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn batch_weights_have_unit_mean(
            rows in prop::collection::vec((0u8..2, -2.0f64..2.0), 1..64),
            rho in 0.05f64..0.95,
        ) {
            let (labels, adv): (Vec<u8>, Vec<f64>) = rows.into_iter().unzip();
            let w = batch_weights(&labels, &adv, 0.1, rho, &TrainConfig::default()).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure_and_validates() {
        let p = small_policy().freeze();
        let a = p.forward_heads(&[0.1, -0.3], &[0.5, 0.2], 7).unwrap();
        let b = p.forward_heads(&[0.1, -0.3], &[0.5, 0.2], 7).unwrap();
        assert_eq!(a, b);
        assert!(p.forward_heads(&[0.1], &[0.5, 0.2], 7).is_err());
        assert!(p.forward_heads(&[0.1, 0.0], &[0.5, 0.2, 0.0], 7).is_err());
    }

    #[test]
    fn zero_network_outputs_head_bias() {
        let dims = PolicyDims::new(2, 2);
        let n = TwoHeadPolicy::param_count_for(&dims);
        let mut params = vec![0.0; n];
        let probe = TwoHeadPolicy::from_params(dims.clone(), params.clone(), true).unwrap();
        let [_, ru, rc] = probe.param_ranges();
        params[ru.end - 2] = 0.5;
        params[ru.end - 1] = -0.25;
        params[rc.end - 2] = 1.5;
        params[rc.end - 1] = 2.0;
        let p = TwoHeadPolicy::from_params(dims, params, true).unwrap();
        let (eu, ec) = p.forward_heads(&[3.0, -1.0], &[0.2, 0.9], 12).unwrap();
        assert_eq!(eu, vec![0.5, -0.25]);
        assert_eq!(ec, vec![1.5, 2.0]);
    }

    #[test]
    fn heads_share_backbone_features() {
        // Copying head_u's parameters into head_c must make the heads agree,
        // which only holds if both read the same feature vector.
        let p = small_policy();
        let [_, ru, rc] = p.param_ranges();
        let mut params = p.params().to_vec();
        let hu = params[ru].to_vec();
        params[rc].copy_from_slice(&hu);
        let q = TwoHeadPolicy::from_params(p.dims().clone(), params, true).unwrap();
        for t in [1, 10, 50] {
            let (eu, ec) = q.forward_heads(&[0.3, 0.1], &[-1.0, 0.4], t).unwrap();
            assert_eq!(eu, ec);
        }
    }

    #[test]
    fn action_jacobian_matches_finite_differences() {
        let p = small_policy();
        let s = [0.4, -0.7];
        let a = [0.3, 1.1];
        for head in [Head::Unconditional, Head::Conditional] {
            let jac = p.action_jacobian(&s, &a, 9, head).unwrap();
            let h = 1e-5;
            for j in 0..2 {
                let mut ap = a;
                ap[j] += h;
                let mut am = a;
                am[j] -= h;
                let (up_u, up_c) = p.forward_heads(&s, &ap, 9).unwrap();
                let (dn_u, dn_c) = p.forward_heads(&s, &am, 9).unwrap();
                let (up, dn) = if head == Head::Unconditional { (up_u, dn_u) } else { (up_c, dn_c) };
                for k in 0..2 {
                    let fd = (up[k] - dn[k]) / (2.0 * h);
                    let an = jac[k * 2 + j];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn forward_diffusion_reconstruction_identity() {
        let s = Schedule::linear(50, 1e-4, 2e-2).unwrap();
        let a0 = [0.7, -1.3];
        let eps = [0.2, 0.5];
        let mut at = [0.0; 2];
        s.diffuse_into(23, &a0, &eps, &mut at);
        let ab = s.alpha_bar(23);
        for k in 0..2 {
            let rec = (at[k] - ab.sqrt() * a0[k]) / (1.0 - ab).sqrt();
            assert_relative_eq!(rec, eps[k], max_relative = 1e-10);
        }
    }

    #[test]
    fn freeze_rounds_to_f32() {
        let p = small_policy().freeze();
        assert!(p.is_frozen());
        assert!(p.params().iter().all(|&v| v == v as f32 as f64));
    }
}
