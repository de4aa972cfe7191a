use std::path::Path;
use std::process::{Command, Output};

fn chunkrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn untrained_rl_exits_with_zero_signal_and_writes_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let init = chunkrl(d, &["train-sft", "--demos", "none.bin", "--out", "x.ckpt"]);
    assert_eq!(init.status.code(), Some(4));

    let task = chunkrl(d, &["gen-demos", "--task", "move-adjacent", "--count", "2", "--out", "d.bin"]);
    assert!(task.status.success());
    let sft = chunkrl(d, &["train-sft", "--demos", "d.bin", "--out", "init.ckpt", "--set", "sft_epochs=0"]);
    assert!(sft.status.success(), "{}", String::from_utf8_lossy(&sft.stderr));

    let out = chunkrl(d, &["train-rl", "--init", "init.ckpt", "--out", "rl.ckpt", "--log", "rl.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "zero_signal");
    assert_eq!(err["zero_signal"]["sampled"], 128);
    assert!(!d.join("rl.ckpt").exists());
    let log = std::fs::read_to_string(d.join("rl.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"zero_signal\":true"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["eval", "--expert", "--set", "nope=1"][..],
        &["eval", "--expert", "--set", "eps_low=x"],
        &["eval", "--expert", "--set", "vocab_size=12"],
        &["eval", "--expert", "--set", "eval_seeds=0..10"],
        &["experiment", "nope", "--out", "o"],
    ] {
        let out = chunkrl(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"], "usage");
    }
}

#[test]
fn dump_config_reflects_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# base\nrl_lr = 0.5\ngroup_size = 4\n").unwrap();
    let out = chunkrl(
        dir.path(),
        &["eval", "--expert", "--config", "run.cfg", "--set", "group_size=6", "--set", "group_size=5", "--dump-config"],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg: String = text.lines().take_while(|l| !l.starts_with('{')).map(|l| format!("{l}\n")).collect();
    let parsed = chunkrl::config::RunConfig::parse(&cfg).unwrap();
    assert_eq!(parsed.rl_lr, 0.5);
    assert_eq!(parsed.group_size, 5);
    let report: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(report["success_rate"], 1.0);
}

#[test]
fn help_lists_every_key() {
    let out = Command::new(env!("CARGO_BIN_EXE_chunkrl")).args(["train-rl", "--help"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for (k, _) in chunkrl::config::KEYS {
        assert!(text.contains(&format!("  {k} = ")), "{k}");
    }
}
