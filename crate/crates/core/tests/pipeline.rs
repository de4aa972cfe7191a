use chunkrl::config::RunConfig;
use chunkrl::envsim::TaskSpec;
use chunkrl::grpo::{train, Trainer};
use chunkrl::harness::generate_demos;
use chunkrl::metrics::{curve_table, parse_jsonl, to_jsonl, Table};
use chunkrl::policy::{read_checkpoint, write_checkpoint, Policy};
use chunkrl::rollout::{evaluate, scenario_grid, ScenarioSampler};
use chunkrl::sft::{train_sft, DemoDataset};

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    for kv in [
        "hidden_dim=32",
        "tasks=move-adjacent-aligned",
        "train_batch_scenarios=4",
        "max_iterations=4",
        "max_resample=400",
        "sft_epochs=40",
        "rl_lr=0.002",
        "mini_batch_trajectories=16",
    ] {
        c.apply_override(kv).unwrap();
    }
    c.validate().unwrap();
    c
}

fn sft_policy(c: &RunConfig) -> Policy {
    let task = TaskSpec::by_name("move-adjacent-aligned").unwrap();
    let demos = generate_demos(&task, &c.env(), 30, c.train_seeds.clone(), c.seed).unwrap();
    let data = DemoDataset::build(demos, &c.env(), "train").unwrap();
    let mut policy = Policy::init(c.policy_meta(), c.seed).unwrap();
    let report = train_sft(&mut policy, &data, &c.sft()).unwrap();
    assert!(report.final_loss < report.epoch_losses[0]);
    policy
}

fn rl(c: &RunConfig, policy: Policy) -> (Policy, String) {
    let sampler = ScenarioSampler::new(c.env(), c.task_specs().unwrap(), c.train_seeds.clone(), c.seed).unwrap();
    let mut trainer = Trainer::new(policy, c.grpo(), c.env(), sampler, c.seed).unwrap();
    let mut records = Vec::new();
    let summary = train(&mut trainer, |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert!(summary.aborted.is_none());
    assert_eq!(summary.iterations_completed, c.max_iterations);
    (trainer.policy, to_jsonl(&records))
}

#[test]
fn sft_then_rl_is_reproducible_end_to_end() {
    let c = small_config();
    let (p1, log1) = rl(&c, sft_policy(&c));
    let (p2, log2) = rl(&c, sft_policy(&c));
    assert_eq!(log1, log2);
    let (mut b1, mut b2) = (Vec::new(), Vec::new());
    write_checkpoint(&mut b1, &p1).unwrap();
    write_checkpoint(&mut b2, &p2).unwrap();
    assert_eq!(b1, b2);

    let records = parse_jsonl(&log1).unwrap();
    assert_eq!(records.len(), c.max_iterations);
    for r in records.iter().filter(|r| !r.zero_signal) {
        assert_eq!(r.accepted_groups, c.train_batch_scenarios);
        assert!(r.grad_norm.is_finite() && r.grad_norm > 0.0);
        assert!((0.0..=1.0).contains(&r.clip_fraction));
    }
    let csv = curve_table(&records).to_csv(&[]);
    let (table, _) = Table::parse_csv(&csv).unwrap();
    assert_eq!(table.rows.len(), records.len());

    let restored = read_checkpoint(b1.as_slice()).unwrap();
    let scenarios = scenario_grid(&c.env(), &c.task_specs().unwrap(), c.eval_seeds.clone()).unwrap();
    assert_eq!(
        evaluate(&restored.params, &scenarios, 1).unwrap(),
        evaluate(&p1.params, &scenarios, 1).unwrap()
    );
}

#[test]
fn config_text_round_trips() {
    let c = small_config();
    let text = c.dump();
    assert_eq!(RunConfig::parse(&text).unwrap(), c);
    let mut d = RunConfig::default();
    d.apply_text(&format!("# comment\n{text}")).unwrap();
    assert_eq!(d, c);
}
