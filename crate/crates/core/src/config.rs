//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! Later assignments win, so a file followed by command-line overrides
//! resolves in order.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::PathBuf;

use crate::envsim::{EnvConfig, TaskSpec, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::policy::PolicyMeta;
use crate::sft::SftConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid_size: usize,
    pub step_budget: usize,
    pub chunk_size: usize,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta_kl: f64,
    pub rollout_temperature: f64,
    pub train_batch_scenarios: usize,
    pub mini_batch_trajectories: usize,
    pub rl_lr: f64,
    pub max_iterations: usize,
    pub advantage_std_epsilon: f64,
    pub dynamic_sampling: bool,
    /// 0 selects 8 × `train_batch_scenarios`.
    pub max_resample: usize,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub sft_batch_chunks: usize,
    pub tasks: Vec<String>,
    pub train_seeds: Range<u64>,
    pub eval_seeds: Range<u64>,
    pub seed: u64,
    pub demos: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GrpoConfig::default();
        let e = EnvConfig::default();
        let s = SftConfig::default();
        RunConfig {
            grid_size: e.grid_size,
            step_budget: e.step_budget,
            chunk_size: e.chunk_size,
            vocab_size: VOCAB_SIZE,
            hidden_dim: 128,
            hidden_layers: 2,
            group_size: g.group_size,
            eps_low: g.eps_low,
            eps_high: g.eps_high,
            beta_kl: g.beta_kl,
            rollout_temperature: g.rollout_temperature,
            train_batch_scenarios: g.train_batch_scenarios,
            mini_batch_trajectories: g.mini_batch_trajectories,
            rl_lr: g.learning_rate,
            max_iterations: g.max_iterations,
            advantage_std_epsilon: g.advantage_std_epsilon,
            dynamic_sampling: g.dynamic_sampling,
            max_resample: 0,
            sft_epochs: s.epochs,
            sft_lr: s.learning_rate,
            sft_batch_chunks: s.batch_chunks,
            tasks: vec!["move-adjacent".into()],
            train_seeds: 0..1000,
            eval_seeds: 10_000..10_100,
            seed: 0,
            demos: None,
            init: None,
            checkpoint: None,
            log: None,
        }
    }
}

/// Every key with a one-line description, in dump order.
pub const KEYS: &[(&str, &str)] = &[
    ("grid_size", "grid side length"),
    ("step_budget", "primitives per episode"),
    ("chunk_size", "tokens per action chunk (k)"),
    ("vocab_size", "action vocabulary size (fixed at 11)"),
    ("hidden_dim", "policy hidden width"),
    ("hidden_layers", "policy hidden layer count"),
    ("group_size", "rollouts per scenario (G)"),
    ("eps_low", "lower clip range"),
    ("eps_high", "upper clip range"),
    ("beta_kl", "KL penalty weight toward the initial policy (0 = off)"),
    ("rollout_temperature", "sampling temperature for rollouts and ratios"),
    ("train_batch_scenarios", "accepted groups per iteration"),
    ("mini_batch_trajectories", "trajectories per optimizer step"),
    ("rl_lr", "RL learning rate"),
    ("max_iterations", "RL iterations"),
    ("advantage_std_epsilon", "floor on the group reward std"),
    ("dynamic_sampling", "reject all-success and all-fail groups"),
    ("max_resample", "group budget per iteration (0 = 8 x batch)"),
    ("sft_epochs", "SFT epochs"),
    ("sft_lr", "SFT learning rate"),
    ("sft_batch_chunks", "chunks per SFT step"),
    ("tasks", "comma-separated task names"),
    ("train_seeds", "training scenario seeds, a..b"),
    ("eval_seeds", "evaluation scenario seeds, a..b"),
    ("seed", "master seed"),
    ("demos", "demo file path"),
    ("init", "initial checkpoint path"),
    ("checkpoint", "output checkpoint path"),
    ("log", "metrics log path"),
];

fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Usage(format!("config key `{key}`: {msg}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn range(key: &str, v: &str) -> Result<Range<u64>> {
    let (a, b) = v.split_once("..").ok_or_else(|| bad(key, format!("expected a..b, got `{v}`")))?;
    let r = num::<u64>(key, a.trim())?..num::<u64>(key, b.trim())?;
    if r.is_empty() {
        return Err(bad(key, "empty range"));
    }
    Ok(r)
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "grid_size" => self.grid_size = num(key, v)?,
            "step_budget" => self.step_budget = num(key, v)?,
            "chunk_size" => self.chunk_size = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "hidden_dim" => self.hidden_dim = num(key, v)?,
            "hidden_layers" => self.hidden_layers = num(key, v)?,
            "group_size" => self.group_size = num(key, v)?,
            "eps_low" => self.eps_low = num(key, v)?,
            "eps_high" => self.eps_high = num(key, v)?,
            "beta_kl" => self.beta_kl = num(key, v)?,
            "rollout_temperature" => self.rollout_temperature = num(key, v)?,
            "train_batch_scenarios" => self.train_batch_scenarios = num(key, v)?,
            "mini_batch_trajectories" => self.mini_batch_trajectories = num(key, v)?,
            "rl_lr" => self.rl_lr = num(key, v)?,
            "max_iterations" => self.max_iterations = num(key, v)?,
            "advantage_std_epsilon" => self.advantage_std_epsilon = num(key, v)?,
            "dynamic_sampling" => self.dynamic_sampling = num(key, v)?,
            "max_resample" => self.max_resample = num(key, v)?,
            "sft_epochs" => self.sft_epochs = num(key, v)?,
            "sft_lr" => self.sft_lr = num(key, v)?,
            "sft_batch_chunks" => self.sft_batch_chunks = num(key, v)?,
            "tasks" => {
                self.tasks = v.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
            }
            "train_seeds" => self.train_seeds = range(key, v)?,
            "eval_seeds" => self.eval_seeds = range(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "demos" => self.demos = path(v),
            "init" => self.init = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "log" => self.log = path(v),
            _ => return Err(Error::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "grid_size" => self.grid_size.to_string(),
            "step_budget" => self.step_budget.to_string(),
            "chunk_size" => self.chunk_size.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "hidden_layers" => self.hidden_layers.to_string(),
            "group_size" => self.group_size.to_string(),
            "eps_low" => self.eps_low.to_string(),
            "eps_high" => self.eps_high.to_string(),
            "beta_kl" => self.beta_kl.to_string(),
            "rollout_temperature" => self.rollout_temperature.to_string(),
            "train_batch_scenarios" => self.train_batch_scenarios.to_string(),
            "mini_batch_trajectories" => self.mini_batch_trajectories.to_string(),
            "rl_lr" => self.rl_lr.to_string(),
            "max_iterations" => self.max_iterations.to_string(),
            "advantage_std_epsilon" => self.advantage_std_epsilon.to_string(),
            "dynamic_sampling" => self.dynamic_sampling.to_string(),
            "max_resample" => self.max_resample.to_string(),
            "sft_epochs" => self.sft_epochs.to_string(),
            "sft_lr" => self.sft_lr.to_string(),
            "sft_batch_chunks" => self.sft_batch_chunks.to_string(),
            "tasks" => self.tasks.join(","),
            "train_seeds" => format!("{}..{}", self.train_seeds.start, self.train_seeds.end),
            "eval_seeds" => format!("{}..{}", self.eval_seeds.start, self.eval_seeds.end),
            "seed" => self.seed.to_string(),
            "demos" => show_path(&self.demos),
            "init" => show_path(&self.init),
            "checkpoint" => show_path(&self.checkpoint),
            "log" => show_path(&self.log),
            _ => return None,
        })
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{kv}`: expected key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// The fully resolved configuration; parses back to an equal value.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            grid_size: self.grid_size,
            step_budget: self.step_budget,
            chunk_size: self.chunk_size,
        }
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            beta_kl: self.beta_kl,
            group_size: self.group_size,
            rollout_temperature: self.rollout_temperature,
            train_batch_scenarios: self.train_batch_scenarios,
            mini_batch_trajectories: self.mini_batch_trajectories,
            learning_rate: self.rl_lr,
            max_iterations: self.max_iterations,
            advantage_std_epsilon: self.advantage_std_epsilon,
            dynamic_sampling: self.dynamic_sampling,
            max_resample: (self.max_resample > 0).then_some(self.max_resample),
        }
    }

    pub fn sft(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft_epochs,
            learning_rate: self.sft_lr,
            batch_chunks: self.sft_batch_chunks,
            seed: self.seed,
        }
    }

    pub fn policy_meta(&self) -> PolicyMeta {
        PolicyMeta {
            input_dim: self.env().observation_dim(),
            hidden_dim: self.hidden_dim,
            hidden_layers: self.hidden_layers,
            chunk_size: self.chunk_size,
            vocab_size: self.vocab_size,
        }
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        if self.tasks.is_empty() {
            return Err(bad("tasks", "no tasks given"));
        }
        self.tasks
            .iter()
            .map(|t| TaskSpec::by_name(t).map_err(|_| bad("tasks", format!("unknown task `{t}`"))))
            .collect()
    }

    /// Checks every field; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(bad("vocab_size", format!("must be {VOCAB_SIZE}")));
        }
        if self.hidden_dim == 0 {
            return Err(bad("hidden_dim", "must be >= 1"));
        }
        if self.sft_epochs > 0 && !(self.sft_lr > 0.0) {
            return Err(bad("sft_lr", "must be > 0"));
        }
        if self.sft_batch_chunks == 0 {
            return Err(bad("sft_batch_chunks", "must be >= 1"));
        }
        self.env().validate().map_err(|e| bad("grid_size/step_budget/chunk_size", e))?;
        self.grpo().validate().map_err(|e| bad(grpo_key(&e), e))?;
        self.task_specs()?;
        if self.train_seeds.start < self.eval_seeds.end && self.eval_seeds.start < self.train_seeds.end {
            return Err(bad("eval_seeds", "overlaps train_seeds"));
        }
        Ok(())
    }
}

/// Best-effort mapping of a GRPO validation message to its key.
fn grpo_key(e: &Error) -> &'static str {
    let msg = e.to_string();
    let keys = [
        "eps_low",
        "eps_high",
        "beta_kl",
        "group_size",
        "rollout_temperature",
        "learning_rate",
        "advantage_std_epsilon",
        "max_resample",
    ];
    match keys.iter().find(|k| msg.contains(*k)) {
        Some(&"learning_rate") => "rl_lr",
        Some(k) => k,
        None => "train_batch_scenarios",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("eps_high = 0.2\ntasks = move-adjacent, stack-sequence\nlog = m.jsonl # comment\n")
            .unwrap();
        let text = c.dump();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dump(), text);
        assert_eq!(c.tasks.len(), 2);
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.group_size, c.chunk_size), (8, 8));
        assert_eq!((c.eps_low, c.eps_high, c.rollout_temperature), (0.2, 0.28, 1.6));
        assert_eq!(c.beta_kl, 0.0);
        assert_eq!(c.grpo().max_resample(), 8 * c.train_batch_scenarios);
        c.validate().unwrap();
        for (k, _) in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn last_assignment_wins() {
        let mut c = RunConfig::parse("seed = 3\nseed = 4").unwrap();
        assert_eq!(c.seed, 4);
        c.apply_override("seed=9").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("bogus = 1").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = RunConfig::parse("group_size = many").unwrap_err();
        assert!(e.to_string().contains("group_size"));
        let c = RunConfig::parse("eps_low = 1.5").unwrap();
        let e = c.validate().unwrap_err();
        assert!(matches!(e, Error::Usage(_)));
        assert!(e.to_string().contains("eps_low"), "{e}");
        let c = RunConfig::parse("eval_seeds = 500..600").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("eval_seeds"));
        let c = RunConfig::parse("vocab_size = 12").unwrap();
        assert!(c.validate().is_err());
    }
}
