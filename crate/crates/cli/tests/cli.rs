use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_spiking-l2l");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_small(dir: &Path, iterations: u32) {
    let dir = dir.to_str().unwrap();
    let iters = iterations.to_string();
    ok(&[
        "train", "--preset", "exp2-sine-desk", "--iterations", &iters, "--out-dir", dir,
        "--set", "network.n_neurons=30", "--set", "outer.batch_size=2", "--set", "run.checkpoint_every=5",
    ]);
}

fn last_checkpoint(dir: &Path) -> String {
    let mut names: Vec<_> = std::fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    names.last().unwrap().to_str().unwrap().to_string()
}

#[test]
fn train_writes_one_metric_line_per_iteration_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train_small(&a, 10);
    train_small(&b, 10);
    let ma = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let mb = std::fs::read_to_string(b.join("metrics.jsonl")).unwrap();
    assert_eq!(ma.lines().count(), 10);
    assert_eq!(ma, mb);
    assert!(a.join("manifest.json").exists());
    assert!(a.join("config.toml").exists());
}

#[test]
fn unknown_preset_is_a_config_error_listing_presets() {
    let out = run(&["train", "--preset", "no-such-preset", "--iterations", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp1-volterra") && err.contains("exp2-sine"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let out = run(&["train", "--preset", "exp2-sine-desk", "--set", "outer.learning_rat=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn eval_with_zero_tasks_succeeds() {
    let out = ok(&["eval", "--preset", "exp2-sine-desk", "--n-tasks", "0"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("no tasks"));
}

#[test]
fn eval_probe_and_export_from_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    train_small(&run_dir, 2);
    let ckpt = last_checkpoint(&run_dir);
    let ev = tmp.path().join("ev");
    ok(&["eval", "--checkpoint", &ckpt, "--n-tasks", "2", "--out-dir", ev.to_str().unwrap(), "--save-records", "1"]);
    assert!(ev.join("trained_summary.json").exists());

    let probe = tmp.path().join("probe.csv");
    ok(&["probe", "--checkpoint", &ckpt, "--grid", "7", "--after", "10", "--out", probe.to_str().unwrap()]);
    let text = std::fs::read_to_string(&probe).unwrap();
    assert_eq!(text.lines().count(), 1 + 7);

    let rec = ev.join("episode_0000.rec");
    let csv = ok(&["export", "--record", rec.to_str().unwrap(), "--format", "csv"]);
    let steps = String::from_utf8_lossy(&csv.stdout).lines().count() - 1;
    assert!(steps > 0);
    let jsonl = ok(&["export", "--record", rec.to_str().unwrap(), "--format", "jsonl"]);
    assert_eq!(String::from_utf8_lossy(&jsonl.stdout).lines().count(), steps);
}

#[test]
fn volterra_export_has_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = tmp.path().join("ev");
    ok(&[
        "eval", "--preset", "exp1-volterra-desk", "--n-tasks", "1", "--out-dir", ev.to_str().unwrap(),
        "--save-records", "1", "--set", "network.n_neurons=20", "--set", "eval.stream_steps=400",
    ]);
    let rec = ev.join("episode_0000.rec");
    let out = tmp.path().join("steps.csv");
    ok(&["export", "--record", rec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 400);
}

#[test]
fn resume_continues_to_the_requested_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    train_small(&full, 10);
    train_small(&part, 5);
    let dir = part.to_str().unwrap();
    ok(&[
        "train", "--preset", "exp2-sine-desk", "--iterations", "10", "--out-dir", dir, "--resume",
        "--set", "network.n_neurons=30", "--set", "outer.batch_size=2", "--set", "run.checkpoint_every=5",
    ]);
    assert_eq!(
        std::fs::read_to_string(full.join("metrics.jsonl")).unwrap(),
        std::fs::read_to_string(part.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.bin");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn baselines_append_tagged_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    for name in ["random", "ridge", "backprop"] {
        ok(&["baseline", name, "--preset", "exp2-sine-desk", "--n-tasks", "2", "--out-dir", dir, "--set", "network.n_neurons=20"]);
    }
    let text = std::fs::read_to_string(tmp.path().join("baselines.jsonl")).unwrap();
    let tags: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["baseline"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(tags, ["random", "ridge", "backprop"]);
}
