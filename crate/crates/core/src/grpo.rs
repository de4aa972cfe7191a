//! Group-relative policy optimization with outcome rewards.
//!
//! Advantages are rewards normalized within their group (population mean and
//! standard deviation). The per-token objective is the asymmetrically clipped
//! importance-weighted advantage, averaged over each trajectory's executed
//! tokens and then over trajectories. A KL penalty toward a frozen reference
//! policy is available but off by default.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envsim::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, logprob_dlogits, Gradient, Observation, Policy, PolicyParams};
use crate::rewards::assign_outcome_rewards;
use crate::rng::{stream, tag};
use crate::rollout::{sample_batch, BatchStats, RolloutGroup, SamplingConfig, ScenarioSampler, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta_kl: f64,
    pub group_size: usize,
    pub rollout_temperature: f64,
    /// Accepted groups per iteration.
    pub train_batch_scenarios: usize,
    pub mini_batch_trajectories: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub advantage_std_epsilon: f64,
    pub dynamic_sampling: bool,
    /// Group budget per iteration; `None` means 8 × batch.
    pub max_resample: Option<usize>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            beta_kl: 0.0,
            group_size: 8,
            rollout_temperature: 1.6,
            train_batch_scenarios: 16,
            mini_batch_trajectories: 32,
            learning_rate: 1e-4,
            max_iterations: 200,
            advantage_std_epsilon: 1e-8,
            dynamic_sampling: true,
            max_resample: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return fail(format!("eps_low must be in (0, 1), got {}", self.eps_low));
        }
        if !(self.eps_high >= self.eps_low) {
            return fail(format!("eps_high {} below eps_low {}", self.eps_high, self.eps_low));
        }
        if !(self.beta_kl >= 0.0) {
            return fail(format!("beta_kl must be >= 0, got {}", self.beta_kl));
        }
        if self.group_size < 2 {
            return fail(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.rollout_temperature > 0.0) {
            return fail(format!("rollout_temperature must be > 0, got {}", self.rollout_temperature));
        }
        if self.train_batch_scenarios == 0 || self.mini_batch_trajectories == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.advantage_std_epsilon > 0.0) {
            return fail("advantage_std_epsilon must be > 0".into());
        }
        if self.max_resample() < self.train_batch_scenarios {
            return fail("max_resample must be >= train_batch_scenarios".into());
        }
        Ok(())
    }

    pub fn max_resample(&self) -> usize {
        self.max_resample.unwrap_or(8 * self.train_batch_scenarios)
    }
}

/// `(R_i − mean R) / std R` with population statistics. The standard
/// deviation is floored at `std_epsilon`; equal rewards are rejected.
pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!("group of {} rewards", rewards.len())));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Err(Error::DegenerateGroup {
            group_size: rewards.len(),
            reward: rewards[0],
        });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(std_epsilon);
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(r·Â, clip(r, 1 − ε_low, 1 + ε_high)·Â)` and whether the clipped term
/// is strictly the smaller one (in which case it carries no gradient).
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// One trajectory and its advantage inside a loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossItem<'a> {
    pub id: usize,
    pub traj: &'a Trajectory,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossStats {
    pub tokens: usize,
    pub clipped_tokens: usize,
    pub ratio_sum: f64,
    pub kl_sum: f64,
}

impl LossStats {
    pub fn clip_fraction(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped_tokens as f64 / self.tokens as f64
        }
    }

    pub fn mean_ratio(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.ratio_sum / self.tokens as f64
        }
    }

    fn merge(&mut self, o: &LossStats) {
        self.tokens += o.tokens;
        self.clipped_tokens += o.clipped_tokens;
        self.ratio_sum += o.ratio_sum;
        self.kl_sum += o.kl_sum;
    }
}

#[derive(Debug, Clone)]
pub struct LossEval {
    /// Negative objective.
    pub loss: f64,
    pub gradient: Gradient,
    pub stats: LossStats,
}

struct ItemTerms<'a> {
    objective: f64,
    dlogits: Vec<(&'a Observation, Vec<f64>)>,
    stats: LossStats,
}

fn item_terms<'a>(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    item: &LossItem<'a>,
    weight: f64,
    cfg: &GrpoConfig,
) -> Result<ItemTerms<'a>> {
    let t = cfg.rollout_temperature;
    let v = params.meta.vocab_size;
    let mut out = ItemTerms {
        objective: 0.0,
        dlogits: Vec::new(),
        stats: LossStats::default(),
    };
    for chunk in item.traj.chunks.iter().filter(|c| c.executed > 0) {
        let e = chunk.executed;
        let logits = params.forward(&chunk.obs)?.logits;
        let mut coeffs = vec![0.0; e];
        for j in 0..e {
            let tok = chunk.tokens[j] as usize;
            let lp = log_softmax(&logits[j * v..(j + 1) * v], t)[tok];
            let ratio = (lp - chunk.logprobs[j]).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!(
                    "trajectory {}: non-finite importance ratio",
                    item.id
                )));
            }
            let (value, clipped) = clipped_surrogate(ratio, item.advantage, cfg.eps_low, cfg.eps_high);
            out.objective += weight * value;
            out.stats.tokens += 1;
            out.stats.ratio_sum += ratio;
            if clipped {
                out.stats.clipped_tokens += 1;
            } else {
                coeffs[j] = -weight * item.advantage * ratio;
            }
        }
        let mut d = logprob_dlogits(&logits, v, &chunk.tokens[..e], &coeffs, t);
        if cfg.beta_kl > 0.0 {
            let reference = reference
                .ok_or_else(|| Error::Config("beta_kl > 0 needs a reference policy".into()))?;
            let ref_logits = reference.forward(&chunk.obs)?.logits;
            for j in 0..e {
                let lp = log_softmax(&logits[j * v..(j + 1) * v], t);
                let lq = log_softmax(&ref_logits[j * v..(j + 1) * v], t);
                let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
                out.objective -= weight * cfg.beta_kl * kl;
                out.stats.kl_sum += kl;
                for u in 0..v {
                    let dkl = lp[u].exp() * (lp[u] - lq[u] - kl) / t;
                    d[j * v + u] += weight * cfg.beta_kl * dkl;
                }
            }
        }
        out.dlogits.push((&chunk.obs, d));
    }
    Ok(out)
}

/// Evaluates the clipped objective (plus the optional KL penalty) over the
/// given trajectories and its exact gradient. Each trajectory has weight
/// `1 / (n · |a_i|)` where `|a_i|` counts executed tokens only.
pub fn grpo_loss(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    items: &[LossItem<'_>],
    cfg: &GrpoConfig,
) -> Result<LossEval> {
    if items.is_empty() {
        return Err(Error::Config("empty loss batch".into()));
    }
    let n = items.len() as f64;
    let terms: Vec<ItemTerms<'_>> = items
        .par_iter()
        .map(|item| {
            if item.traj.executed_token_count == 0 {
                return Err(Error::Usage(format!("trajectory {} has no executed tokens", item.id)));
            }
            let weight = 1.0 / (n * item.traj.executed_token_count as f64);
            item_terms(params, reference, item, weight, cfg)
        })
        .collect::<Result<_>>()?;
    let mut objective = 0.0;
    let mut stats = LossStats::default();
    let mut dense = Vec::new();
    for t in terms {
        objective += t.objective;
        stats.merge(&t.stats);
        dense.extend(t.dlogits);
    }
    Ok(LossEval {
        loss: -objective,
        gradient: params.backward_dense(&dense),
        stats,
    })
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iter: u64,
    pub accepted_groups: usize,
    pub rejected_all_success: usize,
    pub rejected_all_fail: usize,
    /// Trained groups whose rewards were all equal (only without dynamic sampling).
    pub zero_advantage_groups: usize,
    pub mean_reward: f64,
    pub rollout_success_rate: f64,
    pub mean_entropy: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub push_fraction: f64,
    pub wall_ms: u64,
    /// The batch could not be filled; no update was made.
    pub zero_signal: bool,
}

/// Owns the policy being trained, the scenario stream, and the iteration
/// counter. Results are a function of (initial policy, config, master seed).
#[derive(Debug, Clone)]
pub struct Trainer {
    pub policy: Policy,
    pub reference: Option<PolicyParams>,
    pub config: GrpoConfig,
    pub env: EnvConfig,
    pub sampler: ScenarioSampler,
    pub master_seed: u64,
    pub iteration: u64,
    /// Wall time breaks byte-identical logs, so it is opt-in.
    pub record_wall_time: bool,
}

impl Trainer {
    pub fn new(
        policy: Policy,
        config: GrpoConfig,
        env: EnvConfig,
        sampler: ScenarioSampler,
        master_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        let reference = (config.beta_kl > 0.0).then(|| policy.params.clone());
        Ok(Trainer {
            policy,
            reference,
            config,
            env,
            sampler,
            master_seed,
            iteration: 0,
            record_wall_time: false,
        })
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            group_size: self.config.group_size,
            temperature: self.config.rollout_temperature,
            batch_size: self.config.train_batch_scenarios,
            max_resample: self.config.max_resample(),
            max_steps: self.env.step_budget,
            dynamic_sampling: self.config.dynamic_sampling,
        }
    }

    /// Rollout, rewards, advantages, then one epoch of mini-batch updates.
    /// When dynamic sampling cannot fill the batch the iteration ends without
    /// an update and its record has `zero_signal` set.
    pub fn train_iteration(&mut self) -> Result<IterationStats> {
        let start = Instant::now();
        let key = [self.master_seed, self.iteration];
        let sampling = self.sampling();
        let (mut groups, batch) = sample_batch(&self.policy.params, &mut self.sampler, &sampling, &key)?;
        let starved = groups.len() < sampling.batch_size;
        let mut stats = LossStats::default();
        let mut loss_sum = 0.0;
        let mut grad_norm_sum = 0.0;
        let mut updates = 0usize;
        let mut zero_advantage_groups = 0;
        if starved {
            for g in &mut groups {
                assign_outcome_rewards(g);
            }
        } else {
            zero_advantage_groups = self.prepare_groups(&mut groups)?;
            let mut order: Vec<(usize, usize)> = groups
                .iter()
                .enumerate()
                .flat_map(|(g, grp)| (0..grp.trajectories.len()).map(move |t| (g, t)))
                .collect();
            order.shuffle(&mut stream(&[tag::MINIBATCH, self.master_seed, self.iteration]));
            for mb in order.chunks(self.config.mini_batch_trajectories) {
                let items: Vec<LossItem<'_>> = mb
                    .iter()
                    .map(|&(g, t)| LossItem {
                        id: g * self.config.group_size + t,
                        traj: &groups[g].trajectories[t],
                        advantage: groups[g].advantages[t],
                    })
                    .collect();
                let eval = grpo_loss(&self.policy.params, self.reference.as_ref(), &items, &self.config)?;
                self.policy.apply_gradient(&eval.gradient, self.config.learning_rate)?;
                stats.merge(&eval.stats);
                loss_sum += eval.loss;
                grad_norm_sum += eval.gradient.norm();
                updates += 1;
            }
        }
        let record = self.record(&groups, &batch, &stats, zero_advantage_groups, loss_sum, grad_norm_sum, updates, start);
        self.iteration += 1;
        Ok(record)
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        groups: &[RolloutGroup],
        batch: &BatchStats,
        stats: &LossStats,
        zero_advantage_groups: usize,
        loss_sum: f64,
        grad_norm_sum: f64,
        updates: usize,
        start: Instant,
    ) -> IterationStats {
        let trajs = groups.iter().flat_map(|g| &g.trajectories);
        let (entropy, executed) = trajs.fold((0.0, 0usize), |(e, n), t| {
            (e + t.entropy_sum, n + t.executed_token_count)
        });
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        IterationStats {
            iter: self.iteration,
            accepted_groups: batch.accepted_groups,
            rejected_all_success: batch.rejected_all_success,
            rejected_all_fail: batch.rejected_all_fail,
            zero_advantage_groups,
            mean_reward: per(rewards.iter().sum(), rewards.len()),
            rollout_success_rate: per(batch.successes as f64, batch.sampled_trajectories),
            mean_entropy: per(entropy, executed),
            clip_fraction: stats.clip_fraction(),
            mean_ratio: stats.mean_ratio(),
            mean_kl: per(stats.kl_sum, stats.tokens),
            loss: per(loss_sum, updates),
            grad_norm: per(grad_norm_sum, updates),
            push_fraction: per(batch.pushes as f64, batch.sampled_trajectories),
            wall_ms: if self.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
            zero_signal: updates == 0 && batch.accepted_groups < self.config.train_batch_scenarios,
        }
    }

    /// Fills rewards and advantages; returns the number of equal-reward groups.
    fn prepare_groups(&self, groups: &mut [RolloutGroup]) -> Result<usize> {
        let mut zero = 0;
        for g in groups.iter_mut() {
            if self.config.dynamic_sampling && !g.is_mixed() {
                return Err(Error::Usage(format!(
                    "group for seed {} violates the mixed-outcome constraint",
                    g.scenario.seed
                )));
            }
            assign_outcome_rewards(g);
            g.advantages = match compute_advantages(&g.rewards, self.config.advantage_std_epsilon) {
                Ok(a) => a,
                Err(Error::DegenerateGroup { group_size, .. }) if !self.config.dynamic_sampling => {
                    zero += 1;
                    vec![0.0; group_size]
                }
                Err(e) => return Err(e),
            };
        }
        Ok(zero)
    }
}

/// How a training run ended.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Iterations run, starved ones included.
    pub iterations_completed: usize,
    pub starved_iterations: usize,
    /// Set when the very first iteration was starved; the run stopped there
    /// without touching the policy.
    pub aborted: Option<ZeroSignalInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroSignalInfo {
    pub iteration: u64,
    pub accepted: usize,
    pub needed: usize,
    pub sampled: usize,
    pub all_success: usize,
    pub all_fail: usize,
}

impl ZeroSignalInfo {
    pub fn from_record(r: &IterationStats, needed: usize) -> Self {
        ZeroSignalInfo {
            iteration: r.iter,
            accepted: r.accepted_groups,
            needed,
            sampled: r.accepted_groups + r.rejected_all_success + r.rejected_all_fail,
            all_success: r.rejected_all_success,
            all_fail: r.rejected_all_fail,
        }
    }

    pub fn to_error(&self) -> Error {
        Error::ZeroSignal {
            needed: self.needed,
            accepted: self.accepted,
            sampled: self.sampled,
            all_success: self.all_success,
            all_fail: self.all_fail,
        }
    }
}

/// Runs `config.max_iterations` iterations, handing every record to
/// `on_record`. A starved first iteration stops the run; later starved
/// iterations are skipped.
pub fn train(
    trainer: &mut Trainer,
    mut on_record: impl FnMut(&IterationStats) -> Result<()>,
) -> Result<RunSummary> {
    let mut summary = RunSummary {
        iterations_completed: 0,
        starved_iterations: 0,
        aborted: None,
    };
    while summary.iterations_completed < trainer.config.max_iterations {
        let rec = trainer.train_iteration()?;
        on_record(&rec)?;
        if rec.zero_signal {
            if summary.iterations_completed == 0 {
                summary.aborted = Some(ZeroSignalInfo::from_record(&rec, trainer.config.train_batch_scenarios));
                return Ok(summary);
            }
            summary.starved_iterations += 1;
        }
        summary.iterations_completed += 1;
    }
    Ok(summary)
}
