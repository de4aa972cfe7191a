//! Chunked token policy: an MLP whose linear head emits `k × V` logits, one
//! row of `V` action-token logits per chunk position, all in one pass.
//!
//! Parameters are stored as `f32`; every forward and backward computation is
//! carried out in `f64`, so gradients are exact for the stored values.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rayon::prelude::*;

use crate::envsim::Token;
use crate::error::{Error, Result};
use crate::rng::{stream, tag, Stream};

/// Policy input. All coordinates are normalized into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    features: Vec<f32>,
}

impl Observation {
    pub fn new(features: Vec<f32>) -> Self {
        Observation { features }
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyMeta {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub chunk_size: usize,
    pub vocab_size: usize,
}

impl PolicyMeta {
    pub fn output_dim(&self) -> usize {
        self.chunk_size * self.vocab_size
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("chunk_size", self.chunk_size),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }
}

/// Dense layer, row-major `weight[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| {
                row.iter()
                    .zip(input)
                    .fold(f64::from(b), |acc, (&w, &x)| acc + f64::from(w) * x)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub meta: PolicyMeta,
    pub hidden: Vec<Linear>,
    pub head: Linear,
}

impl PolicyParams {
    /// Fan-in scaled uniform hidden weights, zero biases, zero head (so the
    /// initial policy is uniform over tokens at every chunk position).
    pub fn init(meta: PolicyMeta, seed: u64) -> Result<Self> {
        meta.validate()?;
        let mut rng = stream(&[tag::INIT, seed]);
        let mut hidden = Vec::with_capacity(meta.hidden_layers);
        let mut in_dim = meta.input_dim;
        for _ in 0..meta.hidden_layers {
            let mut layer = Linear::zeros(in_dim, meta.hidden_dim);
            let bound = 1.0 / (in_dim as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.gen_range(-bound..bound) as f32;
            }
            hidden.push(layer);
            in_dim = meta.hidden_dim;
        }
        Ok(PolicyParams {
            meta,
            hidden,
            head: Linear::zeros(in_dim, meta.output_dim()),
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.hidden.iter().chain(std::iter::once(&self.head))
    }

    /// `(name, dims, data)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (i, l) in self.layers().enumerate() {
            let prefix = if i < self.hidden.len() {
                format!("hidden.{i}")
            } else {
                "head".to_string()
            };
            out.push((
                format!("{prefix}.weight"),
                vec![l.out_dim, l.in_dim],
                l.weight.as_slice(),
            ));
            out.push((format!("{prefix}.bias"), vec![l.out_dim], l.bias.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for l in self.hidden.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        if obs.dim() != self.meta.input_dim {
            return Err(Error::Config(format!(
                "observation has {} features, policy expects {}",
                obs.dim(),
                self.meta.input_dim
            )));
        }
        Ok(())
    }

    fn trace(&self, obs: &Observation) -> Trace {
        let mut acts = vec![obs.features.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()];
        for layer in &self.hidden {
            let mut z = layer.apply(acts.last().unwrap());
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            acts.push(z);
        }
        let logits = self.head.apply(acts.last().unwrap());
        Trace { acts, logits }
    }

    /// Logits for every chunk position; temperature 1.
    pub fn forward(&self, obs: &Observation) -> Result<ChunkDistribution> {
        self.check_obs(obs)?;
        Ok(ChunkDistribution {
            logits: self.trace(obs).logits,
            chunk_size: self.meta.chunk_size,
            vocab_size: self.meta.vocab_size,
            temperature: 1.0,
        })
    }

    /// Log-probabilities of `tokens` (one per leading chunk position) under the
    /// temperature-scaled distribution.
    pub fn logprob_of(
        &self,
        obs: &Observation,
        tokens: &[Token],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let dist = self.forward(obs)?.with_temperature(temperature);
        dist.check_tokens(tokens)?;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| dist.log_probs(j)[t as usize])
            .collect())
    }

    /// Accumulates `∂(Σ dlogits · logits)/∂θ` for one observation into `grad`.
    pub fn backward_logits(&self, obs: &Observation, dlogits: &[f64], grad: &mut Gradient) {
        let trace = self.trace(obs);
        let n_hidden = self.hidden.len();
        let mut delta = dlogits.to_vec();
        for li in (0..=n_hidden).rev() {
            let layer = if li == n_hidden {
                &self.head
            } else {
                &self.hidden[li]
            };
            let input = &trace.acts[li];
            let gw = &mut grad.tensors[2 * li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(g, &x)| *g += d * x);
            }
            grad.tensors[2 * li + 1]
                .iter_mut()
                .zip(&delta)
                .for_each(|(g, &d)| *g += d);
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0f64; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                prev.iter_mut()
                    .zip(row)
                    .for_each(|(p, &w)| *p += f64::from(w) * d);
            }
            // ReLU mask: post-activation > 0 iff pre-activation > 0
            prev.iter_mut()
                .zip(input)
                .for_each(|(p, &a)| {
                    if a <= 0.0 {
                        *p = 0.0
                    }
                });
            delta = prev;
        }
    }

    /// Gradient of `Σ_samples Σ_j coeff_j · log π_T(token_j | obs)`.
    ///
    /// Samples are reduced in fixed-size blocks in input order, so the result
    /// does not depend on the number of worker threads.
    pub fn backward(&self, batch: &[WeightedTokens<'_>], temperature: f64) -> Result<Gradient> {
        for s in batch {
            self.check_obs(s.obs)?;
            if let Some(c) = s.coeffs.iter().find(|c| !c.is_finite()) {
                return Err(Error::Numeric(format!("non-finite coefficient {c}")));
            }
            if s.coeffs.len() != s.tokens.len() || s.tokens.len() > self.meta.chunk_size {
                return Err(Error::Config("token/coefficient length mismatch".into()));
            }
            if s.tokens.iter().any(|&t| t as usize >= self.meta.vocab_size) {
                return Err(Error::Config("token outside vocabulary".into()));
            }
        }
        let dense: Vec<(&Observation, Vec<f64>)> = batch
            .par_iter()
            .map(|s| {
                let logits = self.trace(s.obs).logits;
                let d = logprob_dlogits(&logits, self.meta.vocab_size, s.tokens, s.coeffs, temperature);
                (s.obs, d)
            })
            .collect();
        Ok(self.backward_dense(&dense))
    }

    /// Gradient of `Σ_samples dlogits · logits`, reduced in fixed-size blocks in
    /// input order so the result does not depend on the worker count.
    pub fn backward_dense(&self, batch: &[(&Observation, Vec<f64>)]) -> Gradient {
        const BLOCK: usize = 8;
        let partials: Vec<Gradient> = batch
            .par_chunks(BLOCK)
            .map(|block| {
                let mut g = Gradient::zeros_like(self);
                for (obs, d) in block {
                    self.backward_logits(obs, d, &mut g);
                }
                g
            })
            .collect();
        let mut total = Gradient::zeros_like(self);
        for p in &partials {
            total.add_assign(p);
        }
        total
    }
}

/// `∂(Σ_j coeff_j · log softmax(row_j / T)[token_j]) / ∂logits`.
pub fn logprob_dlogits(
    logits: &[f64],
    vocab_size: usize,
    tokens: &[Token],
    coeffs: &[f64],
    temperature: f64,
) -> Vec<f64> {
    let v = vocab_size;
    let mut d = vec![0.0; logits.len()];
    for (j, (&tok, &c)) in tokens.iter().zip(coeffs).enumerate() {
        if c == 0.0 {
            continue;
        }
        let lp = log_softmax(&logits[j * v..(j + 1) * v], temperature);
        for (u, (dv, l)) in d[j * v..(j + 1) * v].iter_mut().zip(lp).enumerate() {
            let indicator = if u == tok as usize { 1.0 } else { 0.0 };
            *dv = c * (indicator - l.exp()) / temperature;
        }
    }
    d
}

struct Trace {
    /// Input followed by every hidden post-activation.
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// One backward sample: chunk observation, the tokens at the leading chunk
/// positions, and a scalar weight per token.
#[derive(Debug, Clone, Copy)]
pub struct WeightedTokens<'a> {
    pub obs: &'a Observation,
    pub tokens: &'a [Token],
    pub coeffs: &'a [f64],
}

/// Parameter-shaped `f64` buffers, in `PolicyParams::tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient {
            tensors: params
                .tensors()
                .iter()
                .map(|(_, _, d)| vec![0.0; d.len()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

/// Numerically stable `log softmax(row / temperature)`.
pub fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// `k` rows of `V` logits plus the sampling temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDistribution {
    pub logits: Vec<f64>,
    pub chunk_size: usize,
    pub vocab_size: usize,
    pub temperature: f64,
}

impl ChunkDistribution {
    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.logits[j * self.vocab_size..(j + 1) * self.vocab_size]
    }

    pub fn log_probs(&self, j: usize) -> Vec<f64> {
        log_softmax(self.row(j), self.temperature)
    }

    pub fn entropy(&self, j: usize) -> f64 {
        -self
            .log_probs(j)
            .iter()
            .map(|&l| if l.is_finite() { l.exp() * l } else { 0.0 })
            .sum::<f64>()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.chunk_size {
            return Err(Error::Config(format!(
                "{} tokens for a chunk of {}",
                tokens.len(),
                self.chunk_size
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Config(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Draws one token per row from `softmax(row / T)` and returns it with its
    /// log-probability.
    pub fn sample_chunk(&self, rng: &mut Stream) -> (Vec<Token>, Vec<f64>) {
        (0..self.chunk_size)
            .map(|j| {
                let lp = self.log_probs(j);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = self.vocab_size - 1;
                for (v, &l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        pick = v;
                        break;
                    }
                }
                // round-off can leave acc slightly below 1; fall back to the
                // last token with non-zero mass
                if u >= acc {
                    pick = lp.iter().rposition(|l| l.exp() > 0.0).unwrap_or(pick);
                }
                (pick as Token, lp[pick])
            })
            .unzip()
    }

    /// Per-row argmax; ties go to the lowest token index.
    pub fn greedy_chunk(&self) -> Vec<Token> {
        (0..self.chunk_size)
            .map(|j| {
                let row = self.row(j);
                let mut best = 0;
                for (v, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = v;
                    }
                }
                best as Token
            })
            .collect()
    }
}

/// Parameters plus optimizer state: everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    pub optimizer: AdamState,
}

impl Policy {
    pub fn new(params: PolicyParams) -> Self {
        let optimizer = AdamState::new(&params);
        Policy { params, optimizer }
    }

    pub fn init(meta: PolicyMeta, seed: u64) -> Result<Self> {
        Ok(Self::new(PolicyParams::init(meta, seed)?))
    }

    pub fn apply_gradient(&mut self, grad: &Gradient, lr: f64) -> Result<()> {
        adam_step(&mut self.params, grad, &mut self.optimizer, lr)
    }
}

#[cfg(test)]
mod tests;
