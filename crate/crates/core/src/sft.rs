//! Supervised imitation of expert demonstrations.
//!
//! Each demo is replayed and cut into chunks of `k` tokens starting at the
//! initial state; the observation at every chunk boundary is paired with the
//! next `k` demo tokens (the last chunk is padded with NOOP). The loss is the
//! mean per-token negative log-likelihood at temperature 1.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::envsim::{make_scenario, observe, step, Demo, EnvConfig, Scenario, TaskSpec, Token, NOOP};
use crate::error::{Error, Result};
use crate::policy::{log_softmax, logprob_dlogits, Gradient, Observation, Policy, PolicyParams};
use crate::rng::{stream, tag};
use crate::rollout::evaluate;

/// One chunk-aligned training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub obs: Observation,
    pub tokens: Vec<Token>,
}

/// Validated demos, their scenarios, and the derived chunk samples.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    pub demos: Vec<Demo>,
    pub scenarios: Vec<Scenario>,
    pub samples: Vec<SftSample>,
    pub split: String,
}

impl DemoDataset {
    /// Rebuilds each demo's scenario from its seed and checks that it
    /// replays to success.
    pub fn build(demos: Vec<Demo>, env: &EnvConfig, split: &str) -> Result<Self> {
        let mut scenarios = Vec::with_capacity(demos.len());
        let mut samples = Vec::new();
        for d in &demos {
            let task = TaskSpec::by_id(d.task_id)?;
            let sc = make_scenario(&task, d.seed, env)?;
            d.verify(&sc)?;
            samples.extend(chunk_samples(d, &sc, env.chunk_size)?);
            scenarios.push(sc);
        }
        Ok(DemoDataset {
            demos,
            scenarios,
            samples,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

/// Chunk-aligned samples of one demo.
pub fn chunk_samples(demo: &Demo, scenario: &Scenario, chunk_size: usize) -> Result<Vec<SftSample>> {
    let task = &scenario.task;
    let mut state = scenario.initial.clone();
    let mut out = Vec::new();
    for chunk in demo.tokens.chunks(chunk_size) {
        let obs = observe(&state, task);
        for &t in chunk {
            state = step(&state, t, task)?;
        }
        let mut tokens = chunk.to_vec();
        tokens.resize(chunk_size, NOOP);
        out.push(SftSample { obs, tokens });
    }
    Ok(out)
}

/// Mean NLL over every token of `samples` and its gradient.
pub fn sft_loss(params: &PolicyParams, samples: &[&SftSample]) -> Result<(f64, Gradient)> {
    if samples.is_empty() {
        return Err(Error::Usage("sft_loss on an empty batch".into()));
    }
    let v = params.meta.vocab_size;
    let total: usize = samples.iter().map(|s| s.tokens.len()).sum();
    let coeff = -1.0 / total as f64;
    let terms: Vec<(f64, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            if let Some(&bad) = s.tokens.iter().find(|&&t| t as usize >= v) {
                return Err(Error::Data(format!("token {bad} outside vocabulary of {v}")));
            }
            let logits = params.forward(&s.obs)?.logits;
            let nll: f64 = s
                .tokens
                .iter()
                .enumerate()
                .map(|(j, &t)| -log_softmax(&logits[j * v..(j + 1) * v], 1.0)[t as usize])
                .sum();
            let coeffs = vec![coeff; s.tokens.len()];
            Ok((nll, logprob_dlogits(&logits, v, &s.tokens, &coeffs, 1.0)))
        })
        .collect::<Result<_>>()?;
    let loss = terms.iter().map(|(l, _)| l).sum::<f64>() / total as f64;
    let dense: Vec<(&Observation, Vec<f64>)> = samples
        .iter()
        .zip(terms)
        .map(|(s, (_, d))| (&s.obs, d))
        .collect();
    Ok((loss, params.backward_dense(&dense)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Chunks per Adam step.
    pub batch_chunks: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 100,
            learning_rate: 1e-3,
            batch_chunks: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SftReport {
    pub demos: usize,
    pub samples: usize,
    pub epochs: usize,
    /// Sample-weighted mean loss of each epoch, measured before each step.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    /// Greedy success on the demos' own scenarios after training.
    pub train_success_rate: f64,
}

/// Mini-batch Adam over shuffled chunk samples.
pub fn train_sft(policy: &mut Policy, data: &DemoDataset, cfg: &SftConfig) -> Result<SftReport> {
    if cfg.batch_chunks == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("sft batch_chunks must be >= 1 and lr > 0".into()));
    }
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    if !data.samples.is_empty() {
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut stream(&[tag::SFT, cfg.seed, epoch as u64]));
            let mut weighted = 0.0;
            for mb in order.chunks(cfg.batch_chunks) {
                let batch: Vec<&SftSample> = mb.iter().map(|&i| &data.samples[i]).collect();
                let (loss, grad) = sft_loss(&policy.params, &batch)?;
                policy.apply_gradient(&grad, cfg.learning_rate)?;
                weighted += loss * batch.len() as f64;
            }
            epoch_losses.push(weighted / data.samples.len() as f64);
        }
    }
    let final_loss = if data.samples.is_empty() {
        f64::NAN
    } else {
        let all: Vec<&SftSample> = data.samples.iter().collect();
        sft_loss(&policy.params, &all)?.0
    };
    let train_success_rate = if data.scenarios.is_empty() {
        0.0
    } else {
        evaluate(&policy.params, &data.scenarios, 1)?.success_rate
    };
    Ok(SftReport {
        demos: data.len(),
        samples: data.samples.len(),
        epochs: cfg.epochs,
        epoch_losses,
        final_loss,
        train_success_rate,
    })
}
