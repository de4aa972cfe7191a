//! Experiment recipes: data scarcity, exploration ablation, failure modes,
//! pushcut tracking, and the seen/unseen generalization split.
//!
//! Every recipe starts from a base model, fine-tunes it on expert demos of
//! the target task, runs RL, and evaluates greedily on held-out seeds. The
//! default base is pretrained on demos of related tasks (never the target
//! task and never an unseen task), standing in for a pretrained backbone.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::RunConfig;
use crate::envsim::{expert_demo, make_scenario, replay, Demo, EnvConfig, Strategy, TaskSpec};
use crate::error::{Error, Result};
use crate::grpo::{train, IterationStats, RunSummary, Trainer};
use crate::metrics::{to_jsonl, Table};
use crate::policy::{Policy, PolicyParams};
use crate::rng::{stream, tag};
use crate::rollout::{evaluate_episodes, scenario_grid, EvalEpisode, ScenarioSampler, SuccessReport};
use crate::sft::{train_sft, DemoDataset, SftConfig, SftReport};

/// Rollout success that counts as "solved" in ablation curves.
pub const SUCCESS_THRESHOLD: f64 = 0.9;

/// Picks `count` solvable scenarios from `seeds` in a keyed order and returns
/// their expert demos.
pub fn generate_demos(
    task: &TaskSpec,
    env: &EnvConfig,
    count: usize,
    seeds: Range<u64>,
    key: u64,
) -> Result<Vec<Demo>> {
    let mut order: Vec<u64> = seeds.clone().collect();
    order.shuffle(&mut stream(&[tag::DEMOS, key, task.id as u64]));
    let mut out = Vec::with_capacity(count);
    for seed in order {
        if out.len() == count {
            break;
        }
        match expert_demo(&make_scenario(task, seed, env)?) {
            Ok(d) => out.push(d),
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if out.len() < count {
        return Err(Error::Generation(format!(
            "only {} solvable scenarios of `{}` in seeds {}..{}",
            out.len(),
            task.name,
            seeds.start,
            seeds.end
        )));
    }
    Ok(out)
}

/// Multi-task imitation pretraining that produces the default base model.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSpec {
    pub tasks: Vec<String>,
    pub demos_per_task: usize,
    pub seeds: Range<u64>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            tasks: vec!["stack-sequence".into(), "move-adjacent-aligned".into()],
            demos_per_task: 1000,
            seeds: 50_000..60_000,
            epochs: 150,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Base {
    Untrained,
    Pretrain(PretrainSpec),
    Params(PolicyParams),
}

/// Desk-scale experiment description. `demo_counts[i]` demos of the target
/// task are imitated for `demo_epochs[i]` epochs to form prior `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub base: Base,
    pub unseen_tasks: Vec<String>,
    pub demo_counts: Vec<usize>,
    pub demo_epochs: Vec<usize>,
}

fn tuned_rl(mut c: RunConfig) -> RunConfig {
    c.rl_lr = 2e-3;
    c.mini_batch_trajectories = 16;
    c
}

impl ExperimentSpec {
    fn defaults(name: &str, config: RunConfig) -> Self {
        ExperimentSpec {
            name: name.into(),
            config,
            seeds: vec![0, 1, 2],
            base: Base::Pretrain(PretrainSpec::default()),
            unseen_tasks: vec!["move-adjacent-alt".into()],
            demo_counts: vec![1, 50],
            demo_epochs: vec![20, 10],
        }
    }

    /// One demo versus fifty, each with and without RL.
    pub fn data_scarcity() -> Self {
        Self::defaults("data-scarcity", tuned_rl(RunConfig::default()))
    }

    /// Six runs from the one-demo prior, toggling one exploration knob each.
    pub fn exploration_ablation() -> Self {
        ExperimentSpec {
            demo_counts: vec![1],
            demo_epochs: vec![20],
            ..Self::defaults("exploration-ablation", tuned_rl(RunConfig::default()))
        }
    }

    /// RL from untrained, small-data and large-data priors (no pretraining).
    pub fn failure_modes() -> Self {
        ExperimentSpec {
            base: Base::Untrained,
            demo_counts: vec![0, 50, 500],
            demo_epochs: vec![0, 100, 100],
            ..Self::defaults("failure-modes", tuned_rl(RunConfig::default()))
        }
    }

    /// Push-favorable layouts with a lightly trained grasp-only prior.
    pub fn pushcut() -> Self {
        let mut c = tuned_rl(RunConfig::default());
        c.tasks = vec!["move-adjacent-aligned".into()];
        ExperimentSpec {
            base: Base::Untrained,
            demo_counts: vec![200],
            demo_epochs: vec![20],
            ..Self::defaults("pushcut", c)
        }
    }

    /// Train on the seen task, evaluate on seen and unseen variants.
    pub fn generalization() -> Self {
        ExperimentSpec {
            demo_counts: vec![50],
            demo_epochs: vec![10],
            ..Self::defaults("generalization", tuned_rl(RunConfig::default()))
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "data-scarcity" => Self::data_scarcity(),
            "exploration-ablation" => Self::exploration_ablation(),
            "failure-modes" => Self::failure_modes(),
            "pushcut" => Self::pushcut(),
            "generalization" => Self::generalization(),
            _ => return Err(Error::Usage(format!("unknown experiment `{name}`"))),
        })
    }

    pub const NAMES: [&'static str; 5] = [
        "data-scarcity",
        "exploration-ablation",
        "failure-modes",
        "pushcut",
        "generalization",
    ];

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Usage("experiment needs at least one seed".into()));
        }
        if self.demo_counts.len() != self.demo_epochs.len() || self.demo_counts.is_empty() {
            return Err(Error::Usage("demo_counts and demo_epochs must pair up".into()));
        }
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let c = &self.config;
        let mut h = vec![
            format!("experiment {}", self.name),
            format!(
                "desk-scale substitution: {}x{} grid, step budget {}, chunk {}, MLP {}x{}",
                c.grid_size, c.grid_size, c.step_budget, c.chunk_size, c.hidden_layers, c.hidden_dim
            ),
            format!(
                "demo priors {:?} with epochs {:?}; RL {} iterations x {} groups of {}",
                self.demo_counts, self.demo_epochs, c.max_iterations, c.train_batch_scenarios, c.group_size
            ),
            format!(
                "train seeds {}..{}, eval seeds {}..{}, replicate seeds {:?}",
                c.train_seeds.start, c.train_seeds.end, c.eval_seeds.start, c.eval_seeds.end, self.seeds
            ),
        ];
        h.push(match &self.base {
            Base::Untrained => "base: untrained".into(),
            Base::Params(_) => "base: supplied checkpoint".into(),
            Base::Pretrain(p) => format!(
                "base: imitation pretraining on {} ({} demos each, {} epochs, seeds {}..{})",
                p.tasks.join("+"),
                p.demos_per_task,
                p.epochs,
                p.seeds.start,
                p.seeds.end
            ),
        });
        h.push(format!("unseen tasks: {}", self.unseen_tasks.join(",")));
        h
    }

    /// Checks that no unseen task reaches any training stream and that the
    /// evaluation seeds are disjoint from every training seed range.
    pub fn audit(&self) -> Result<TrainingAudit> {
        let mut training: Vec<String> = self.config.tasks.clone();
        let mut seed_ranges = vec![self.config.train_seeds.clone()];
        if let Base::Pretrain(p) = &self.base {
            training.extend(p.tasks.iter().cloned());
            seed_ranges.push(p.seeds.clone());
        }
        training.sort();
        training.dedup();
        for u in &self.unseen_tasks {
            if training.contains(u) {
                return Err(Error::Config(format!("unseen task `{u}` appears in training")));
            }
        }
        let eval = &self.config.eval_seeds;
        for r in &seed_ranges {
            if r.start < eval.end && eval.start < r.end {
                return Err(Error::Config(format!(
                    "eval seeds {}..{} overlap training seeds {}..{}",
                    eval.start, eval.end, r.start, r.end
                )));
            }
        }
        Ok(TrainingAudit {
            training_tasks: training,
            unseen_tasks: self.unseen_tasks.clone(),
            training_seed_ranges: seed_ranges.iter().map(|r| format!("{}..{}", r.start, r.end)).collect(),
            eval_seeds: format!("{}..{}", eval.start, eval.end),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingAudit {
    pub training_tasks: Vec<String>,
    pub unseen_tasks: Vec<String>,
    pub training_seed_ranges: Vec<String>,
    pub eval_seeds: String,
}

/// Imitation pretraining on `spec.tasks`.
pub fn pretrain(config: &RunConfig, spec: &PretrainSpec) -> Result<(PolicyParams, SftReport)> {
    let env = config.env();
    let mut demos = Vec::new();
    for name in &spec.tasks {
        let task = TaskSpec::by_name(name)?;
        demos.extend(generate_demos(&task, &env, spec.demos_per_task, spec.seeds.clone(), spec.seed)?);
    }
    let data = DemoDataset::build(demos, &env, "pretrain")?;
    let mut policy = Policy::init(config.policy_meta(), spec.seed)?;
    let cfg = SftConfig {
        epochs: spec.epochs,
        learning_rate: config.sft_lr,
        batch_chunks: config.sft_batch_chunks,
        seed: spec.seed,
    };
    let report = train_sft(&mut policy, &data, &cfg)?;
    Ok((policy.params, report))
}

/// Resolves the experiment's base model.
pub fn build_base(spec: &ExperimentSpec) -> Result<PolicyParams> {
    match &spec.base {
        Base::Untrained => PolicyParams::init(spec.config.policy_meta(), spec.config.seed),
        Base::Params(p) => Ok(p.clone()),
        Base::Pretrain(p) => Ok(pretrain(&spec.config, p)?.0),
    }
}

/// Fine-tunes `base` on `count` demos of `task` with a fresh optimizer.
pub fn imitation_stage(
    base: &PolicyParams,
    config: &RunConfig,
    task: &TaskSpec,
    count: usize,
    epochs: usize,
    seed: u64,
) -> Result<(PolicyParams, Option<SftReport>)> {
    if count == 0 {
        return Ok((base.clone(), None));
    }
    let env = config.env();
    let demos = generate_demos(task, &env, count, config.train_seeds.clone(), seed)?;
    let data = DemoDataset::build(demos, &env, "train")?;
    let mut policy = Policy::new(base.clone());
    let cfg = SftConfig {
        epochs,
        seed,
        ..config.sft()
    };
    let report = train_sft(&mut policy, &data, &cfg)?;
    Ok((policy.params, Some(report)))
}

#[derive(Debug, Clone)]
pub struct RlRun {
    pub params: PolicyParams,
    pub records: Vec<IterationStats>,
    pub summary: RunSummary,
}

/// RL with a fresh optimizer on the config's tasks and training seeds.
pub fn rl_stage(init: &PolicyParams, config: &RunConfig, seed: u64) -> Result<RlRun> {
    let env = config.env();
    let sampler = ScenarioSampler::new(env.clone(), config.task_specs()?, config.train_seeds.clone(), seed)?;
    let mut trainer = Trainer::new(Policy::new(init.clone()), config.grpo(), env, sampler, seed)?;
    let mut records = Vec::new();
    let summary = train(&mut trainer, |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(RlRun {
        params: trainer.policy.params,
        records,
        summary,
    })
}

/// Greedy evaluation on the config's evaluation seeds.
pub fn heldout(params: &PolicyParams, config: &RunConfig, tasks: &[TaskSpec]) -> Result<(SuccessReport, Vec<EvalEpisode>)> {
    let scenarios = scenario_grid(&config.env(), tasks, config.eval_seeds.clone())?;
    evaluate_episodes(params, &scenarios, 1)
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn first_reaching(records: &[IterationStats], threshold: f64) -> Option<u64> {
    records.iter().find(|r| r.rollout_success_rate >= threshold).map(|r| r.iter)
}

/// A named directional expectation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Files produced by a recipe.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: String,
    pub header: Vec<String>,
    pub config: String,
    pub tables: Vec<(String, Table)>,
    pub logs: Vec<(String, Vec<IterationStats>)>,
    pub checks: Vec<Check>,
    pub audit: TrainingAudit,
}

impl ExperimentReport {
    /// `(relative path, contents)` for every output.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut out = vec![(
            "config.txt".to_string(),
            format!("# {}\n{}", self.header.join("\n# "), self.config),
        )];
        for (name, t) in &self.tables {
            out.push((format!("{name}.csv"), t.to_csv(&self.header)));
        }
        for (name, recs) in &self.logs {
            out.push((format!("logs/{name}.jsonl"), to_jsonl(recs)));
        }
        let mut checks = Table::new(&["check", "passed", "detail"]);
        for c in &self.checks {
            checks.push(vec![c.name.clone(), c.passed.to_string(), c.detail.replace(',', ";")]);
        }
        out.push(("checks.csv".into(), checks.to_csv(&self.header)));
        out.push((
            "audit.json".into(),
            serde_json::to_string_pretty(&self.audit).expect("audit serializes") + "\n",
        ));
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for (rel, contents) in self.files() {
            let p = dir.join(rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, contents)?;
            fs::rename(&tmp, &p)?;
        }
        Ok(())
    }
}

fn f(x: f64) -> String {
    format!("{x:.4}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScarcityCell {
    pub condition: String,
    pub seed: u64,
    pub demos: usize,
    pub success: f64,
    pub rl_iterations: usize,
    pub starved_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ScarcityReport {
    pub cells: Vec<ScarcityCell>,
    pub medians: BTreeMap<String, f64>,
    pub report: ExperimentReport,
}

/// Condition labels in table order.
pub fn scarcity_conditions(spec: &ExperimentSpec) -> Vec<(String, usize, bool)> {
    let label = |n: usize| if n == 1 { "1demo".to_string() } else { format!("{n}demo") };
    let mut v = Vec::new();
    for &n in &spec.demo_counts {
        v.push((format!("sft-{}", label(n)), n, false));
        v.push((format!("sft-{}+rl", label(n)), n, true));
    }
    v
}

/// SFT with few versus many demos, each with and without RL.
pub fn run_data_scarcity(spec: &ExperimentSpec) -> Result<ScarcityReport> {
    spec.validate()?;
    let audit = spec.audit()?;
    let base = build_base(spec)?;
    let tasks = spec.config.task_specs()?;
    let rl_cfg = &spec.config;
    let mut cells = Vec::new();
    let mut logs = Vec::new();
    for &seed in &spec.seeds {
        for (i, (&n, &epochs)) in spec.demo_counts.iter().zip(&spec.demo_epochs).enumerate() {
            let (sft, _) = imitation_stage(&base, &spec.config, &tasks[0], n, epochs, seed)?;
            let conds = scarcity_conditions(spec);
            let pre = heldout(&sft, rl_cfg, &tasks)?.0;
            cells.push(ScarcityCell {
                condition: conds[2 * i].0.clone(),
                seed,
                demos: n,
                success: pre.success_rate,
                rl_iterations: 0,
                starved_iterations: 0,
            });
            let run = rl_stage(&sft, rl_cfg, seed)?;
            let post = heldout(&run.params, rl_cfg, &tasks)?.0;
            cells.push(ScarcityCell {
                condition: conds[2 * i + 1].0.clone(),
                seed,
                demos: n,
                success: post.success_rate,
                rl_iterations: run.summary.iterations_completed,
                starved_iterations: run.summary.starved_iterations,
            });
            logs.push((format!("{}_seed{seed}", conds[2 * i + 1].0), run.records));
        }
    }
    let mut medians = BTreeMap::new();
    for (c, _, _) in scarcity_conditions(spec) {
        let xs: Vec<f64> = cells.iter().filter(|x| x.condition == c).map(|x| x.success).collect();
        medians.insert(c, median(&xs));
    }
    let mut table = Table::new(&["condition", "seed", "demos", "heldout_success", "rl_iterations", "starved_iterations"]);
    for c in &cells {
        table.push(vec![
            c.condition.clone(),
            c.seed.to_string(),
            c.demos.to_string(),
            f(c.success),
            c.rl_iterations.to_string(),
            c.starved_iterations.to_string(),
        ]);
    }
    let mut med = Table::new(&["condition", "median_heldout_success"]);
    for (c, m) in &medians {
        med.push(vec![c.clone(), f(*m)]);
    }
    let conds = scarcity_conditions(spec);
    let mut checks = Vec::new();
    if conds.len() == 4 {
        let (few, few_rl, many, many_rl) = (
            medians[&conds[0].0],
            medians[&conds[1].0],
            medians[&conds[2].0],
            medians[&conds[3].0],
        );
        checks.push(check("few < many", few < many, format!("{few:.3} vs {many:.3}")));
        checks.push(check("few+rl > few", few_rl > few, format!("{few_rl:.3} vs {few:.3}")));
        checks.push(check(
            "gap shrinks after rl",
            (many_rl - few_rl).abs() < (many - few).abs(),
            format!("{:.3} vs {:.3}", many_rl - few_rl, many - few),
        ));
    }
    Ok(ScarcityReport {
        cells,
        medians,
        report: ExperimentReport {
            name: spec.name.clone(),
            header: spec.header(),
            config: spec.config.dump(),
            tables: vec![("cells".into(), table), ("medians".into(), med)],
            logs,
            checks,
            audit,
        },
    })
}

#[derive(Debug, Clone)]
pub struct AblationCurve {
    pub name: String,
    pub knob: String,
    pub setting: String,
    pub seed: u64,
    pub records: Vec<IterationStats>,
    pub first_at_threshold: Option<u64>,
    pub heldout_success: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub curves: Vec<AblationCurve>,
    pub report: ExperimentReport,
}

/// `(knob, setting label, config edit)` for the six ablation arms.
fn ablation_arms() -> Vec<(&'static str, &'static str, fn(&mut RunConfig))> {
    vec![
        ("dynamic_sampling", "on", |c| c.dynamic_sampling = true),
        ("dynamic_sampling", "off", |c| c.dynamic_sampling = false),
        ("rollout_temperature", "1.6", |c| c.rollout_temperature = 1.6),
        ("rollout_temperature", "1.0", |c| c.rollout_temperature = 1.0),
        ("eps_high", "0.28", |c| c.eps_high = 0.28),
        ("eps_high", "0.2", |c| c.eps_high = 0.2),
    ]
}

/// Paired runs toggling dynamic sampling, rollout temperature and the upper
/// clip bound, one knob at a time, from the few-demo prior.
pub fn run_exploration_ablation(spec: &ExperimentSpec) -> Result<AblationReport> {
    spec.validate()?;
    let audit = spec.audit()?;
    let base = build_base(spec)?;
    let tasks = spec.config.task_specs()?;
    let mut curves = Vec::new();
    for &seed in &spec.seeds {
        let (prior, _) = imitation_stage(&base, &spec.config, &tasks[0], spec.demo_counts[0], spec.demo_epochs[0], seed)?;
        // identical arms share one run
        let mut cache: Vec<(RunConfig, RlRun, f64)> = Vec::new();
        for (knob, setting, edit) in ablation_arms() {
            let mut cfg = spec.config.clone();
            edit(&mut cfg);
            let (run, success) = match cache.iter().find(|(c, _, _)| *c == cfg) {
                Some((_, r, s)) => (r.clone(), *s),
                None => {
                    let r = rl_stage(&prior, &cfg, seed)?;
                    let s = heldout(&r.params, &spec.config, &tasks)?.0.success_rate;
                    cache.push((cfg, r.clone(), s));
                    (r, s)
                }
            };
            curves.push(AblationCurve {
                name: format!("{knob}={setting}"),
                knob: knob.into(),
                setting: setting.into(),
                seed,
                first_at_threshold: first_reaching(&run.records, SUCCESS_THRESHOLD),
                heldout_success: success,
                records: run.records,
            });
        }
    }
    let mut table = Table::new(&[
        "curve",
        "seed",
        "iterations",
        "first_iter_at_0.9",
        "zero_advantage_groups",
        "rejected_groups",
        "heldout_success",
    ]);
    for c in &curves {
        table.push(vec![
            c.name.clone(),
            c.seed.to_string(),
            c.records.len().to_string(),
            c.first_at_threshold.map(|i| i.to_string()).unwrap_or_else(|| "never".into()),
            c.records.iter().map(|r| r.zero_advantage_groups).sum::<usize>().to_string(),
            c.records
                .iter()
                .map(|r| r.rejected_all_fail + r.rejected_all_success)
                .sum::<usize>()
                .to_string(),
            f(c.heldout_success),
        ]);
    }
    let reach = |name: &str| -> f64 {
        let xs: Vec<f64> = curves
            .iter()
            .filter(|c| c.name == name)
            .map(|c| c.first_at_threshold.map(|i| i as f64).unwrap_or(f64::INFINITY))
            .collect();
        median(&xs)
    };
    let checks = vec![
        check(
            "clip-higher reaches 0.9 no later",
            reach("eps_high=0.28") <= reach("eps_high=0.2"),
            format!("{} vs {}", reach("eps_high=0.28"), reach("eps_high=0.2")),
        ),
        check(
            "T=1.6 reaches 0.9 no later",
            reach("rollout_temperature=1.6") <= reach("rollout_temperature=1.0"),
            format!("{} vs {}", reach("rollout_temperature=1.6"), reach("rollout_temperature=1.0")),
        ),
    ];
    let logs = curves
        .iter()
        .map(|c| (format!("{}_{}_seed{}", c.knob, c.setting, c.seed), c.records.clone()))
        .collect();
    Ok(AblationReport {
        curves,
        report: ExperimentReport {
            name: spec.name.clone(),
            header: spec.header(),
            config: spec.config.dump(),
            tables: vec![("curves".into(), table)],
            logs,
            checks,
            audit,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRow {
    pub prior: String,
    pub demos: usize,
    pub seed: u64,
    pub pre_success: f64,
    pub post_success: f64,
    pub iterations: usize,
    /// Iterations whose batch could not be filled.
    pub zero_signal_count: usize,
    /// The first iteration was starved and the run stopped.
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct FailureReport {
    pub rows: Vec<FailureRow>,
    pub report: ExperimentReport,
}

/// RL applied to priors built from 0, few and many demos.
pub fn run_failure_modes(spec: &ExperimentSpec) -> Result<FailureReport> {
    spec.validate()?;
    let audit = spec.audit()?;
    let base = build_base(spec)?;
    let tasks = spec.config.task_specs()?;
    let rl_cfg = &spec.config;
    let names = ["none", "small", "large"];
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &seed in &spec.seeds {
        for (i, (&n, &epochs)) in spec.demo_counts.iter().zip(&spec.demo_epochs).enumerate() {
            let (prior, _) = imitation_stage(&base, &spec.config, &tasks[0], n, epochs, seed)?;
            let pre = heldout(&prior, rl_cfg, &tasks)?.0.success_rate;
            let run = rl_stage(&prior, rl_cfg, seed)?;
            let post = heldout(&run.params, rl_cfg, &tasks)?.0.success_rate;
            let label = names.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("prior{i}"));
            logs.push((format!("{label}_seed{seed}"), run.records));
            rows.push(FailureRow {
                prior: label,
                demos: n,
                seed,
                pre_success: pre,
                post_success: post,
                iterations: run.summary.iterations_completed,
                zero_signal_count: run.summary.starved_iterations + usize::from(run.summary.aborted.is_some()),
                aborted: run.summary.aborted.is_some(),
            });
        }
    }
    let mut table = Table::new(&["prior", "demos", "seed", "pre_rl", "post_rl", "delta", "iterations", "zero_signal_count", "aborted"]);
    for r in &rows {
        table.push(vec![
            r.prior.clone(),
            r.demos.to_string(),
            r.seed.to_string(),
            f(r.pre_success),
            f(r.post_success),
            f(r.post_success - r.pre_success),
            r.iterations.to_string(),
            r.zero_signal_count.to_string(),
            r.aborted.to_string(),
        ]);
    }
    let post_median = |p: &str| {
        let xs: Vec<f64> = rows.iter().filter(|r| r.prior == p).map(|r| r.post_success).collect();
        median(&xs)
    };
    let zero_rows: Vec<&FailureRow> = rows.iter().filter(|r| r.demos == 0).collect();
    let checks = vec![
        check(
            "zero-demo prior raises ZeroSignal without updates",
            !zero_rows.is_empty() && zero_rows.iter().all(|r| r.aborted && r.iterations == 0),
            format!("{} rows", zero_rows.len()),
        ),
        check(
            "large prior >= small prior after RL",
            post_median("large") >= post_median("small"),
            format!("{:.3} vs {:.3}", post_median("large"), post_median("small")),
        ),
    ];
    Ok(FailureReport {
        rows,
        report: ExperimentReport {
            name: spec.name.clone(),
            header: spec.header(),
            config: spec.config.dump(),
            tables: vec![("priors".into(), table)],
            logs,
            checks,
            audit,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PushcutRow {
    pub seed: u64,
    pub pre_success: f64,
    pub pre_push_fraction: f64,
    pub post_success: f64,
    pub post_push_fraction: f64,
    /// Push-classified evaluation episodes, all re-verified by replay.
    pub push_episodes: usize,
    pub push_replay_failures: usize,
}

#[derive(Debug, Clone)]
pub struct PushcutReport {
    pub rows: Vec<PushcutRow>,
    pub report: ExperimentReport,
}

fn replay_failures(config: &RunConfig, tasks: &[TaskSpec], episodes: &[EvalEpisode]) -> Result<(usize, usize)> {
    let scenarios = scenario_grid(&config.env(), tasks, config.eval_seeds.clone())?;
    let mut pushes = 0;
    let mut failures = 0;
    for (sc, ep) in scenarios.iter().zip(episodes) {
        if ep.strategy == Strategy::Push {
            pushes += 1;
            if !replay(sc, &ep.tokens)?.0.success {
                failures += 1;
            }
        }
    }
    Ok((pushes, failures))
}

/// Tracks how often RL abandons the demonstrated grasp for a push.
pub fn run_pushcut(spec: &ExperimentSpec) -> Result<PushcutReport> {
    spec.validate()?;
    let audit = spec.audit()?;
    let base = build_base(spec)?;
    let tasks = spec.config.task_specs()?;
    let rl_cfg = &spec.config;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &seed in &spec.seeds {
        let (prior, _) = imitation_stage(&base, &spec.config, &tasks[0], spec.demo_counts[0], spec.demo_epochs[0], seed)?;
        let (pre, pre_eps) = heldout(&prior, rl_cfg, &tasks)?;
        let run = rl_stage(&prior, rl_cfg, seed)?;
        let (post, post_eps) = heldout(&run.params, rl_cfg, &tasks)?;
        let (p0, f0) = replay_failures(rl_cfg, &tasks, &pre_eps)?;
        let (p1, f1) = replay_failures(rl_cfg, &tasks, &post_eps)?;
        logs.push((format!("pushcut_seed{seed}"), run.records));
        rows.push(PushcutRow {
            seed,
            pre_success: pre.success_rate,
            pre_push_fraction: pre.push_fraction,
            post_success: post.success_rate,
            post_push_fraction: post.push_fraction,
            push_episodes: p0 + p1,
            push_replay_failures: f0 + f1,
        });
    }
    let mut table = Table::new(&[
        "seed",
        "pre_success",
        "pre_push_fraction",
        "post_success",
        "post_push_fraction",
        "push_episodes",
        "push_replay_failures",
    ]);
    for r in &rows {
        table.push(vec![
            r.seed.to_string(),
            f(r.pre_success),
            f(r.pre_push_fraction),
            f(r.post_success),
            f(r.post_push_fraction),
            r.push_episodes.to_string(),
            r.push_replay_failures.to_string(),
        ]);
    }
    let checks = vec![
        check(
            "no pushes before RL",
            rows.iter().all(|r| r.pre_push_fraction == 0.0),
            String::new(),
        ),
        check(
            "push fraction above 0.10 after RL on some seed",
            rows.iter().any(|r| r.post_push_fraction > 0.10),
            rows.iter().map(|r| format!("{:.3}", r.post_push_fraction)).collect::<Vec<_>>().join(" "),
        ),
        check(
            "every push replays to success",
            rows.iter().all(|r| r.push_replay_failures == 0),
            String::new(),
        ),
    ];
    Ok(PushcutReport {
        rows,
        report: ExperimentReport {
            name: spec.name.clone(),
            header: spec.header(),
            config: spec.config.dump(),
            tables: vec![("push_fraction".into(), table)],
            logs,
            checks,
            audit,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizationRow {
    pub seed: u64,
    pub stage: String,
    pub seen_success: f64,
    pub unseen_success: f64,
}

#[derive(Debug, Clone)]
pub struct GeneralizationReport {
    pub rows: Vec<GeneralizationRow>,
    pub report: ExperimentReport,
}

/// Trains on the seen tasks only and evaluates seen and unseen variants.
pub fn run_generalization(spec: &ExperimentSpec) -> Result<GeneralizationReport> {
    spec.validate()?;
    let audit = spec.audit()?;
    let base = build_base(spec)?;
    let seen = spec.config.task_specs()?;
    let unseen: Vec<TaskSpec> = spec.unseen_tasks.iter().map(|t| TaskSpec::by_name(t)).collect::<Result<_>>()?;
    if unseen.is_empty() {
        return Err(Error::Usage("generalization needs an unseen task".into()));
    }
    let rl_cfg = &spec.config;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &seed in &spec.seeds {
        let (prior, _) = imitation_stage(&base, &spec.config, &seen[0], spec.demo_counts[0], spec.demo_epochs[0], seed)?;
        let run = rl_stage(&prior, rl_cfg, seed)?;
        for (stage, params) in [("sft", &prior), ("sft+rl", &run.params)] {
            rows.push(GeneralizationRow {
                seed,
                stage: stage.into(),
                seen_success: heldout(params, rl_cfg, &seen)?.0.success_rate,
                unseen_success: heldout(params, rl_cfg, &unseen)?.0.success_rate,
            });
        }
        logs.push((format!("seen_seed{seed}"), run.records));
    }
    let mut table = Table::new(&["seed", "stage", "seen_success", "unseen_success"]);
    for r in &rows {
        table.push(vec![r.seed.to_string(), r.stage.clone(), f(r.seen_success), f(r.unseen_success)]);
    }
    Ok(GeneralizationReport {
        rows,
        report: ExperimentReport {
            name: spec.name.clone(),
            header: spec.header(),
            config: spec.config.dump(),
            tables: vec![("split".into(), table)],
            logs,
            checks: Vec::new(),
            audit,
        },
    })
}

/// Runs a recipe by name and returns its files.
pub fn run_named(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    Ok(match spec.name.as_str() {
        "data-scarcity" => run_data_scarcity(spec)?.report,
        "exploration-ablation" => run_exploration_ablation(spec)?.report,
        "failure-modes" => run_failure_modes(spec)?.report,
        "pushcut" => run_pushcut(spec)?.report,
        "generalization" => run_generalization(spec)?.report,
        other => return Err(Error::Usage(format!("unknown experiment `{other}`"))),
    })
}
