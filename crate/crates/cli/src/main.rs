//! `chunkrl` command-line entry point.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use chunkrl::config::{RunConfig, KEYS};
use chunkrl::envsim::{read_demos, write_demos, TaskSpec};
use chunkrl::grpo::{train, Trainer, ZeroSignalInfo};
use chunkrl::harness::{generate_demos, run_named, Base, ExperimentSpec};
use chunkrl::metrics::{curve_table, parse_jsonl, record_line};
use chunkrl::policy::{read_checkpoint, write_checkpoint, Policy};
use chunkrl::rollout::{evaluate, scenario_grid, ExpertActor, ScenarioSampler};
use chunkrl::sft::{train_sft, DemoDataset};
use chunkrl::{Error, Result};
use clap::{Args, Parser, Subcommand};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ZERO_SIGNAL: u8 = 3;
const EXIT_IO: u8 = 4;

fn config_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let d = RunConfig::default();
        let mut s = String::from("Config keys (key = default):\n");
        for (k, doc) in KEYS {
            s.push_str(&format!("  {k} = {}    # {doc}\n", d.get(k).unwrap_or_default()));
        }
        s
    })
}

#[derive(Parser)]
#[command(name = "chunkrl", version, about = "Online RL for chunked token-action gridworld policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable, applied in order).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Rollout worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Print the resolved config to stdout before running.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate verified expert demos.
    #[command(after_help = config_help())]
    GenDemos {
        #[arg(long)]
        task: String,
        #[arg(long)]
        count: usize,
        /// Seed range to draw scenarios from, a..b (default: train_seeds).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Imitation training on a demo file.
    #[command(after_help = config_help())]
    TrainSft {
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh policy.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// GRPO training from a checkpoint.
    #[command(after_help = config_help())]
    TrainRl {
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines metrics output.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Record wall time per iteration (logs are then not reproducible).
        #[arg(long)]
        wall_time: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Greedy evaluation on the evaluation seeds.
    #[command(after_help = config_help())]
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scripted expert instead.
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment recipe.
    #[command(after_help = config_help())]
    Experiment {
        /// One of data-scarcity, exploration-ablation, failure-modes, pushcut, generalization.
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated replicate seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Base checkpoint replacing the recipe's default base.
        #[arg(long)]
        base: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Convert a metrics log into a curve CSV.
    #[command(after_help = config_help())]
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    /// Defaults, then the config file, then `flags`, then `--set` overrides.
    fn resolve(&self, base: RunConfig, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut c = base;
        if let Some(p) = &self.config {
            c.apply_text(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, v)?;
            }
        }
        for kv in &self.set {
            c.apply_override(kv)?;
        }
        c.validate()?;
        if self.dump_config {
            print!("{}", c.dump());
        }
        Ok(c)
    }

    fn init_workers(&self) -> Result<()> {
        if let Some(n) = self.workers {
            if n == 0 {
                return Err(Error::Usage("--workers must be >= 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Usage(format!("worker pool: {e}")))?;
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Writes via a sibling temp file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn load_policy(path: &Path) -> Result<Policy> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_checkpoint(BufReader::new(f))
}

fn save_policy(path: &Path, policy: &Policy) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, policy)?;
    write_atomic(path, &bytes)
}

fn need(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| Error::Usage(format!("config key `{key}` (or its flag) is required")))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("--seeds: cannot parse `{x}`")))
        })
        .collect()
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenDemos {
            task,
            count,
            seeds,
            out,
            common,
        } => {
            common.init_workers()?;
            let c = common.resolve(RunConfig::default(), &[("train_seeds", seeds)])?;
            let task = TaskSpec::by_name(&task).map_err(|e| Error::Usage(format!("--task: {e}")))?;
            let demos = generate_demos(&task, &c.env(), count, c.train_seeds.clone(), c.seed)?;
            let mut bytes = Vec::new();
            write_demos(&mut bytes, &demos)?;
            write_atomic(&out, &bytes)?;
            print_json(&serde_json::json!({ "demos": demos.len(), "task": task.name, "out": out }));
        }
        Command::TrainSft {
            demos,
            init,
            out,
            common,
        } => {
            common.init_workers()?;
            let c = common.resolve(
                RunConfig::default(),
                &[
                    ("demos", path_str(&demos)),
                    ("init", path_str(&init)),
                    ("checkpoint", path_str(&out)),
                ],
            )?;
            let demos_path = need(&c.demos, "demos")?;
            let out = need(&c.checkpoint, "checkpoint")?;
            let f = File::open(&demos_path).map_err(|e| io_err(&demos_path, e))?;
            let data = DemoDataset::build(read_demos(BufReader::new(f))?, &c.env(), "train")?;
            let mut policy = match &c.init {
                Some(p) => Policy::new(load_policy(p)?.params),
                None => Policy::init(c.policy_meta(), c.seed)?,
            };
            let report = train_sft(&mut policy, &data, &c.sft())?;
            save_policy(&out, &policy)?;
            print_json(&report);
        }
        Command::TrainRl {
            init,
            out,
            log,
            wall_time,
            common,
        } => {
            common.init_workers()?;
            let c = common.resolve(
                RunConfig::default(),
                &[
                    ("init", path_str(&init)),
                    ("checkpoint", path_str(&out)),
                    ("log", path_str(&log)),
                ],
            )?;
            let init = need(&c.init, "init")?;
            let out = need(&c.checkpoint, "checkpoint")?;
            let policy = Policy::new(load_policy(&init)?.params);
            if policy.params.meta != c.policy_meta() {
                return Err(Error::Usage(format!(
                    "checkpoint {} does not match the configured policy shape",
                    init.display()
                )));
            }
            let env = c.env();
            let sampler = ScenarioSampler::new(env.clone(), c.task_specs()?, c.train_seeds.clone(), c.seed)?;
            let mut trainer = Trainer::new(policy, c.grpo(), env, sampler, c.seed)?;
            trainer.record_wall_time = wall_time;
            let mut lines = String::new();
            let summary = train(&mut trainer, |r| {
                lines.push_str(&record_line(r));
                lines.push('\n');
                Ok(())
            })?;
            if let Some(log) = &c.log {
                write_atomic(log, lines.as_bytes())?;
            }
            if let Some(z) = &summary.aborted {
                return Err(z.to_error());
            }
            save_policy(&out, &trainer.policy)?;
            print_json(&serde_json::json!({
                "iterations": summary.iterations_completed,
                "starved_iterations": summary.starved_iterations,
                "checkpoint": out,
            }));
        }
        Command::Eval {
            checkpoint,
            expert,
            out,
            common,
        } => {
            common.init_workers()?;
            let c = common.resolve(RunConfig::default(), &[("init", path_str(&checkpoint))])?;
            let scenarios = scenario_grid(&c.env(), &c.task_specs()?, c.eval_seeds.clone())?;
            let report = if expert {
                evaluate(&ExpertActor { chunk_size: c.chunk_size }, &scenarios, 1)?
            } else {
                let p = load_policy(&need(&c.init, "init")?)?;
                evaluate(&p.params, &scenarios, 1)?
            };
            let text = serde_json::to_string(&report).expect("report serializes");
            match out {
                Some(p) => write_atomic(&p, format!("{text}\n").as_bytes())?,
                None => println!("{text}"),
            }
        }
        Command::Experiment {
            name,
            out,
            seeds,
            base,
            common,
        } => {
            common.init_workers()?;
            let mut spec = ExperimentSpec::by_name(&name)?;
            spec.config = common.resolve(spec.config.clone(), &[])?;
            if let Some(s) = seeds {
                spec.seeds = parse_seeds(&s)?;
            }
            if let Some(b) = base {
                spec.base = Base::Params(load_policy(&b)?.params);
            }
            let report = run_named(&spec)?;
            report.write_to(&out)?;
            print_json(&serde_json::json!({
                "experiment": name,
                "out": out,
                "checks": report.checks,
            }));
        }
        Command::Report { log, out, common } => {
            common.resolve(RunConfig::default(), &[])?;
            let text = fs::read_to_string(&log).map_err(|e| io_err(&log, e))?;
            let table = curve_table(&parse_jsonl(&text)?);
            write_atomic(&out, table.to_csv(&[]).as_bytes())?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ZeroSignal { .. } => EXIT_ZERO_SIGNAL,
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::ZeroSignal {
                needed,
                accepted,
                sampled,
                all_success,
                all_fail,
            } = &e
            {
                line["zero_signal"] = serde_json::to_value(ZeroSignalInfo {
                    iteration: 0,
                    accepted: *accepted,
                    needed: *needed,
                    sampled: *sampled,
                    all_success: *all_success,
                    all_fail: *all_fail,
                })
                .expect("serializes");
            }
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
