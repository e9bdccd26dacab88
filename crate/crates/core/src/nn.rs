//! Minimal dense networks with hand-written backpropagation.
//!
//! Parameters live in a caller-owned flat `f64` slice so several networks can
//! share one optimizer state and one checkpoint vector. Layout per layer:
//! row-major weights `[out × in]` followed by the bias `[out]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Identity,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Feed-forward stack. `activate_output` controls whether the last layer is
/// followed by the hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub activate_output: bool,
}

/// Per-call activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, activation: Activation, activate_output: bool) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            sizes,
            activation,
            activate_output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_activation(&self, l: usize) -> Activation {
        if l + 1 < self.layers() || self.activate_output {
            self.activation
        } else {
            Activation::Identity
        }
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        assert_eq!(out.len(), self.param_count());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut out[off..off + fan_in * fan_out + fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
    }

    pub fn new_cache(&self) -> Cache {
        Cache {
            acts: self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
            pre: self.sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
            delta: Vec::new(),
            delta_next: Vec::new(),
        }
    }

    /// Runs the network on `x`; the output is `cache.output()`.
    pub fn forward<'c>(&self, params: &[f64], x: &[f64], cache: &'c mut Cache) -> &'c [f64] {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(x.len(), self.input_dim());
        if cache.acts.len() != self.sizes.len() {
            *cache = self.new_cache();
        }
        cache.acts[0].copy_from_slice(x);
        let mut off = 0;
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let act = self.layer_activation(l);
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let input = &before[l];
            let output = &mut after[0];
            let pre = &mut cache.pre[l];
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let z = b[j] + dot(row, input);
                pre[j] = z;
                output[j] = act.apply(z);
            }
        }
        cache.acts.last().unwrap()
    }

    /// Backpropagates `grad_out` (∂L/∂output) through the cached forward pass.
    ///
    /// Parameter gradients are accumulated into `grad_params`; when
    /// `grad_input` is given it receives ∂L/∂input (overwritten).
    pub fn backward(
        &self,
        params: &[f64],
        cache: &mut Cache,
        grad_out: &[f64],
        grad_params: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(grad_out.len(), self.output_dim());
        let mut delta = std::mem::take(&mut cache.delta);
        let mut delta_next = std::mem::take(&mut cache.delta_next);
        delta.clear();
        delta.extend_from_slice(grad_out);

        let offsets = self.layer_offsets();
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let act = self.layer_activation(l);
            for j in 0..n_out {
                delta[j] *= act.derivative(cache.pre[l][j]);
            }
            let input = &cache.acts[l];
            {
                let (gw, gb) = grad_params[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let d = delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    gb[j] += d;
                    for (g, x) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if l > 0 || grad_input.is_some() {
                let w = &params[off..off + n_in * n_out];
                delta_next.clear();
                delta_next.resize(n_in, 0.0);
                for j in 0..n_out {
                    let d = delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    for (g, wv) in delta_next.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                        *g += d * wv;
                    }
                }
                std::mem::swap(&mut delta, &mut delta_next);
            }
        }
        if let Some(gi) = grad_input {
            gi.copy_from_slice(&delta);
        }
        cache.delta = delta;
        cache.delta_next = delta_next;
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offs.push(off);
            off += w[0] * w[1] + w[1];
        }
        offs
    }
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociation flags
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Sinusoidal embedding of a diffusion step.
pub fn time_embedding(t: usize, width: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), width);
    let half = width / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let x = t as f64 * freq;
        out[i] = x.sin();
        out[half + i] = x.cos();
    }
    if width % 2 == 1 {
        out[width - 1] = 0.0;
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
