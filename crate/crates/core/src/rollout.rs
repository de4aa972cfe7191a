//! Group rollout engine.
//!
//! Episodes of one group start from the same scenario and advance in waves:
//! every active episode is observed, gets one sampled chunk, and executes it
//! primitive by primitive until the chunk ends or the episode finishes.
//! Finished episodes leave the active set. Each episode owns a random stream
//! keyed by (caller key, member index), so results do not depend on how the
//! work is scheduled across threads.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::envsim::{
    classify_strategy, expert_plan, make_scenario, observe, step, EnvConfig, GridState, Scenario,
    Strategy, TaskSpec, Token, NOOP,
};
use crate::error::{Error, Result};
use crate::policy::{Observation, PolicyParams};
use crate::rng::{stream, tag, Stream};

/// One policy query and what was executed of its answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub obs: Observation,
    pub tokens: Vec<Token>,
    /// Behavior log-probabilities of `tokens` at the rollout temperature.
    pub logprobs: Vec<f64>,
    /// Leading tokens actually stepped; the rest were never executed.
    pub executed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub scenario_seed: u64,
    pub task_id: u32,
    pub chunks: Vec<ChunkRecord>,
    pub executed_token_count: usize,
    pub success: bool,
    pub strategy: Strategy,
    /// Sum of the sampling distribution's entropy over executed tokens.
    pub entropy_sum: f64,
}

impl Trajectory {
    pub fn executed_tokens(&self) -> Vec<Token> {
        self.chunks
            .iter()
            .flat_map(|c| c.tokens[..c.executed].iter().copied())
            .collect()
    }
}

/// `G` trajectories from one scenario under one behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub scenario: Scenario,
    pub trajectories: Vec<Trajectory>,
    /// Trajectory rewards, filled by the rewards module.
    pub rewards: Vec<f64>,
    /// Group-relative advantages, filled by the trainer.
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn successes(&self) -> usize {
        self.trajectories.iter().filter(|t| t.success).count()
    }

    /// `0 < successes < G`.
    pub fn is_mixed(&self) -> bool {
        let s = self.successes();
        s > 0 && s < self.trajectories.len()
    }
}

struct Episode {
    state: GridState,
    rng: Stream,
    traj: Trajectory,
}

/// Samples `group_size` episodes of `scenario` at `temperature`, each capped at
/// `max_steps` primitives (or the scenario budget, whichever is lower).
pub fn rollout_group(
    params: &PolicyParams,
    scenario: &Scenario,
    group_size: usize,
    temperature: f64,
    max_steps: usize,
    key: &[u64],
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::Config(format!("group size must be >= 2, got {group_size}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let mut initial = scenario.initial.clone();
    initial.budget = initial.budget.min(max_steps);
    let mut episodes: Vec<Episode> = (0..group_size)
        .map(|i| {
            let mut k = vec![tag::ROLLOUT];
            k.extend_from_slice(key);
            k.push(i as u64);
            Episode {
                state: initial.clone(),
                rng: stream(&k),
                traj: Trajectory {
                    scenario_seed: scenario.seed,
                    task_id: scenario.task.id,
                    chunks: Vec::new(),
                    executed_token_count: 0,
                    success: false,
                    strategy: Strategy::Other,
                    entropy_sum: 0.0,
                },
            }
        })
        .collect();
    let task = &scenario.task;
    let mut active: Vec<usize> = (0..group_size).filter(|&i| !episodes[i].state.done).collect();
    while !active.is_empty() {
        // one wave: every active episode gets one chunk
        let mut wave: Vec<&mut Episode> = episodes
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| active.contains(i))
            .map(|(_, e)| e)
            .collect();
        wave.par_iter_mut()
            .try_for_each(|ep| advance_one_chunk(params, task, temperature, ep))?;
        active.retain(|&i| !episodes[i].state.done);
    }
    let trajectories = episodes
        .into_iter()
        .map(|mut ep| {
            ep.traj.success = ep.state.success;
            ep.traj.strategy = classify_strategy(scenario, &ep.traj.executed_tokens())?;
            Ok(ep.traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        scenario: scenario.clone(),
        trajectories,
        rewards: Vec::new(),
        advantages: Vec::new(),
    })
}

fn advance_one_chunk(
    params: &PolicyParams,
    task: &TaskSpec,
    temperature: f64,
    ep: &mut Episode,
) -> Result<()> {
    let obs = observe(&ep.state, task);
    let dist = params.forward(&obs)?.with_temperature(temperature);
    let (tokens, logprobs) = dist.sample_chunk(&mut ep.rng);
    if let Some(lp) = logprobs.iter().find(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite behavior log-probability {lp}")));
    }
    let mut executed = 0;
    for &t in &tokens {
        if ep.state.done {
            break;
        }
        ep.state = step(&ep.state, t, task)?;
        ep.traj.entropy_sum += dist.entropy(executed);
        executed += 1;
    }
    ep.traj.executed_token_count += executed;
    ep.traj.chunks.push(ChunkRecord {
        obs,
        tokens,
        logprobs,
        executed,
    });
    Ok(())
}

/// Cycles a shuffled permutation of `tasks × seeds`, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct ScenarioSampler {
    env: EnvConfig,
    tasks: Vec<TaskSpec>,
    seeds: Range<u64>,
    master_seed: u64,
    epoch: u64,
    order: Vec<(usize, u64)>,
    pos: usize,
}

impl ScenarioSampler {
    pub fn new(env: EnvConfig, tasks: Vec<TaskSpec>, seeds: Range<u64>, master_seed: u64) -> Result<Self> {
        if tasks.is_empty() || seeds.is_empty() {
            return Err(Error::Config("scenario sampler needs tasks and a seed range".into()));
        }
        let mut s = ScenarioSampler {
            env,
            tasks,
            seeds,
            master_seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.tasks.len())
            .flat_map(|t| self.seeds.clone().map(move |s| (t, s)))
            .collect();
        let mut rng = stream(&[tag::SAMPLER, self.master_seed, self.epoch]);
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_scenario(&mut self) -> Result<Scenario> {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let (t, seed) = self.order[self.pos];
        self.pos += 1;
        make_scenario(&self.tasks[t], seed, &self.env)
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn seeds(&self) -> Range<u64> {
        self.seeds.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub max_resample: usize,
    pub max_steps: usize,
    /// When false every sampled group is accepted.
    pub dynamic_sampling: bool,
}

/// Counters over every group sampled while filling one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchStats {
    pub sampled_groups: usize,
    pub accepted_groups: usize,
    pub rejected_all_success: usize,
    pub rejected_all_fail: usize,
    pub sampled_trajectories: usize,
    pub successes: usize,
    pub pushes: usize,
}

impl BatchStats {
    pub fn zero_signal(&self, needed: usize) -> Error {
        Error::ZeroSignal {
            needed,
            accepted: self.accepted_groups,
            sampled: self.sampled_groups,
            all_success: self.rejected_all_success,
            all_fail: self.rejected_all_fail,
        }
    }
}

/// Samples groups until `batch_size` of them are accepted. With dynamic
/// sampling on, only mixed-outcome groups are accepted, and running out of the
/// `max_resample` budget first is a [`Error::ZeroSignal`].
///
/// Groups are drawn in waves of exactly the number still missing, so the
/// sampled sequence is fixed by the key regardless of parallelism.
pub fn collect_batch(
    params: &PolicyParams,
    sampler: &mut ScenarioSampler,
    cfg: &SamplingConfig,
    key: &[u64],
) -> Result<(Vec<RolloutGroup>, BatchStats)> {
    let (accepted, stats) = sample_batch(params, sampler, cfg, key)?;
    if accepted.len() < cfg.batch_size {
        return Err(stats.zero_signal(cfg.batch_size));
    }
    Ok((accepted, stats))
}

/// The sampling loop behind [`collect_batch`]; a short batch is returned
/// as is.
pub fn sample_batch(
    params: &PolicyParams,
    sampler: &mut ScenarioSampler,
    cfg: &SamplingConfig,
    key: &[u64],
) -> Result<(Vec<RolloutGroup>, BatchStats)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if cfg.max_resample < cfg.batch_size {
        return Err(Error::Config(format!(
            "max_resample {} is below batch size {}",
            cfg.max_resample, cfg.batch_size
        )));
    }
    let mut stats = BatchStats::default();
    let mut accepted = Vec::with_capacity(cfg.batch_size);
    while accepted.len() < cfg.batch_size && stats.sampled_groups < cfg.max_resample {
        let wave = (cfg.batch_size - accepted.len()).min(cfg.max_resample - stats.sampled_groups);
        let jobs: Vec<(usize, Scenario)> = (0..wave)
            .map(|w| Ok((stats.sampled_groups + w, sampler.next_scenario()?)))
            .collect::<Result<_>>()?;
        let groups: Vec<RolloutGroup> = jobs
            .par_iter()
            .map(|(index, scenario)| {
                let mut k = key.to_vec();
                k.extend_from_slice(&[u64::from(scenario.task.id), scenario.seed, *index as u64]);
                rollout_group(params, scenario, cfg.group_size, cfg.temperature, cfg.max_steps, &k)
            })
            .collect::<Result<_>>()?;
        stats.sampled_groups += wave;
        for g in groups {
            stats.sampled_trajectories += g.trajectories.len();
            stats.successes += g.successes();
            stats.pushes += g
                .trajectories
                .iter()
                .filter(|t| t.strategy == Strategy::Push)
                .count();
            if !cfg.dynamic_sampling || g.is_mixed() {
                accepted.push(g);
            } else if g.successes() == 0 {
                stats.rejected_all_fail += 1;
            } else {
                stats.rejected_all_success += 1;
            }
        }
    }
    stats.accepted_groups = accepted.len();
    Ok((accepted, stats))
}

/// Anything that proposes the next chunk of primitives from a state.
pub trait ChunkActor: Sync {
    fn act(&self, state: &GridState, task: &TaskSpec) -> Result<Vec<Token>>;
}

/// Greedy decoding of the policy network.
impl ChunkActor for PolicyParams {
    fn act(&self, state: &GridState, task: &TaskSpec) -> Result<Vec<Token>> {
        Ok(self.forward(&observe(state, task))?.greedy_chunk())
    }
}

/// Replans with the scripted expert at every chunk.
#[derive(Debug, Clone, Copy)]
pub struct ExpertActor {
    pub chunk_size: usize,
}

impl ChunkActor for ExpertActor {
    fn act(&self, state: &GridState, task: &TaskSpec) -> Result<Vec<Token>> {
        let mut plan = expert_plan(state, task)
            .ok_or_else(|| Error::Generation("expert cannot solve state".into()))?;
        plan.resize(plan.len().max(self.chunk_size), NOOP);
        plan.truncate(self.chunk_size);
        Ok(plan)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StrategyCounts {
    pub grasp: usize,
    pub push: usize,
    pub other: usize,
}

impl StrategyCounts {
    fn add(&mut self, s: Strategy) {
        match s {
            Strategy::Grasp => self.grasp += 1,
            Strategy::Push => self.push += 1,
            Strategy::Other => self.other += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaskSuccess {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuccessReport {
    pub episodes: usize,
    pub successes: usize,
    /// Successes over all episodes.
    pub success_rate: f64,
    /// Unweighted mean of the per-task rates.
    pub mean_task_success: f64,
    pub per_task: BTreeMap<String, TaskSuccess>,
    pub strategies: StrategyCounts,
    /// Push-classified episodes over all episodes.
    pub push_fraction: f64,
}

/// Outcome of one deterministic evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub tokens: Vec<Token>,
    pub success: bool,
    pub strategy: Strategy,
}

pub fn run_episode(actor: &dyn ChunkActor, scenario: &Scenario) -> Result<EvalEpisode> {
    let task = &scenario.task;
    let mut state = scenario.initial.clone();
    let mut tokens = Vec::new();
    while !state.done {
        let chunk = actor.act(&state, task)?;
        if chunk.is_empty() {
            return Err(Error::Usage("actor returned an empty chunk".into()));
        }
        for t in chunk {
            if state.done {
                break;
            }
            state = step(&state, t, task)?;
            tokens.push(t);
        }
    }
    let strategy = classify_strategy(scenario, &tokens)?;
    Ok(EvalEpisode {
        tokens,
        success: state.success,
        strategy,
    })
}

/// Runs each scenario `episodes_per_scenario` times without learning.
pub fn evaluate(
    actor: &dyn ChunkActor,
    scenarios: &[Scenario],
    episodes_per_scenario: usize,
) -> Result<SuccessReport> {
    Ok(evaluate_episodes(actor, scenarios, episodes_per_scenario)?.0)
}

/// Like [`evaluate`], also returning every episode in scenario order.
pub fn evaluate_episodes(
    actor: &dyn ChunkActor,
    scenarios: &[Scenario],
    episodes_per_scenario: usize,
) -> Result<(SuccessReport, Vec<EvalEpisode>)> {
    let jobs: Vec<&Scenario> = scenarios
        .iter()
        .flat_map(|s| std::iter::repeat(s).take(episodes_per_scenario))
        .collect();
    let outcomes: Vec<EvalEpisode> = jobs
        .par_iter()
        .map(|s| run_episode(actor, s))
        .collect::<Result<_>>()?;
    let mut report = SuccessReport::default();
    for (s, ep) in jobs.iter().zip(&outcomes) {
        let entry = report.per_task.entry(s.task.name.to_string()).or_default();
        entry.episodes += 1;
        entry.successes += usize::from(ep.success);
        report.episodes += 1;
        report.successes += usize::from(ep.success);
        report.strategies.add(ep.strategy);
    }
    for t in report.per_task.values_mut() {
        t.success_rate = t.successes as f64 / t.episodes as f64;
    }
    if report.episodes > 0 {
        report.success_rate = report.successes as f64 / report.episodes as f64;
        report.push_fraction = report.strategies.push as f64 / report.episodes as f64;
        report.mean_task_success = report.per_task.values().map(|t| t.success_rate).sum::<f64>()
            / report.per_task.len() as f64;
    }
    Ok((report, outcomes))
}

/// Scenarios for every `task × seed` pair, in task-major order.
pub fn scenario_grid(env: &EnvConfig, tasks: &[TaskSpec], seeds: Range<u64>) -> Result<Vec<Scenario>> {
    tasks
        .iter()
        .flat_map(|t| seeds.clone().map(move |s| (t, s)))
        .map(|(t, s)| make_scenario(t, s, env))
        .collect()
}
