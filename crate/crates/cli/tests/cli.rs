use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
updates = 3
batch_size = 2
group_size = 3
max_turns = 4
max_new_tokens = 24
checkpoint_every = 2
bc_epochs = 2
eval_max_turns = 4
model_dim = 4
model_hidden = 8
";

fn mempo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mempo")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mempo(args);
    assert!(
        out.status.success(),
        "mempo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Dataset plus a tiny config in a fresh directory.
fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--k", "2", "--n", "12", "--kb-size", "80", "--seed", "3", "--out", p(&d.join("data")), "--holdout", "4"]);
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    dir
}

fn train_run(d: &Path, out: &str, extra: &[&str]) -> Vec<u8> {
    let (data, dir, cfg) = (d.join("data/train.json"), d.join(out), d.join("tiny.cfg"));
    let mut args = vec!["train", "--dataset", p(&data), "--out-dir", p(&dir), "--config", p(&cfg), "--seed", "5"];
    args.extend_from_slice(extra);
    ok(&args);
    fs::read(d.join(out).join("final.ckpt.json")).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = setup();
    let d = dir.path();
    for f in ["dataset.json", "train.json", "test.json", "manifest.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    ok(&["bc", "--dataset", p(&d.join("data/train.json")), "--out-dir", p(&d.join("bc")), "--config", p(&d.join("tiny.cfg"))]);
    let nll = fs::read_to_string(d.join("bc/bc_nll.csv")).unwrap();
    assert_eq!(nll.lines().count(), 1 + 3);

    let bc = d.join("bc/bc.ckpt.json");
    train_run(d, "run", &["--init", p(&bc)]);
    let run = d.join("run");
    assert!(run.join("checkpoints/update_00002.json").exists());
    let updates = fs::read_to_string(run.join("updates.csv")).unwrap();
    assert!(updates.starts_with("update,surrogate_value,kl_value"));
    assert_eq!(updates.lines().count(), 1 + 3);
    assert!(fs::read_to_string(run.join("audit_trajectories.csv")).unwrap().starts_with("update,question,traj_id,reward_t"));
    assert!(run.join("audit_memory.csv").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["finished"].is_u64());
    assert!(manifest["config"].as_str().unwrap().contains("group_size = 3"));

    let ckpt = run.join("final.ckpt.json");
    let test = d.join("data/test.json");
    let traj = d.join("traj.jsonl");
    ok(&["eval", "--dataset", p(&test), "--checkpoint", p(&ckpt), "--out", p(&d.join("eval.json")), "--trajectories", p(&traj), "--config", p(&d.join("tiny.cfg"))]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["count"], 4);
    assert_eq!(report["mode"], "truncated");
    ok(&["eval", "--dataset", p(&test), "--checkpoint", p(&ckpt), "--mode", "window:2", "--out", p(&d.join("eval2.json"))]);

    let scores = d.join("scores.csv");
    ok(&["score", "--dataset", p(&test), "--checkpoint", p(&ckpt), "--trajectories", p(&traj), "--out", p(&scores)]);
    let text = fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().next(), Some("traj_id,step,p_mem,epsilon,reward"));
    assert!(text.lines().count() > 4);

    ok(&["analyze", "--dataset", p(&test), "--checkpoint", p(&ckpt), "--trajectories", p(&traj), "--out-dir", p(&d.join("an")), "--bins", "5"]);
    let bins = fs::read_to_string(d.join("an/bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 1 + 5);
    assert!(d.join("an/steps.csv").exists());

    let out = ok(&["report", "--run-dir", p(&run)]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["updates"], 3);
    assert!(run.join("summary.json").exists());
}

#[test]
fn training_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    let a = train_run(d, "a", &[]);
    let b = train_run(d, "b", &["--workers", "1"]);
    assert_eq!(a, b);
    assert_eq!(
        fs::read(d.join("a/updates.csv")).unwrap(),
        fs::read(d.join("b/updates.csv")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    let test = d.join("data/test.json");
    // Usage errors.
    assert_eq!(mempo(&["eval", "--dataset", p(&test), "--out", "x.json"]).status.code(), Some(1));
    assert_eq!(mempo(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mempo(&["eval", "--dataset", p(&test), "--checkpoint", "c", "--mode", "sideways", "--out", "x"]).status.code(), Some(1));
    assert_eq!(mempo(&["--help"]).status.code(), Some(0));
    // Data and config errors.
    fs::write(d.join("bad.cfg"), "learning_rat = 0.1\n").unwrap();
    let out = mempo(&["train", "--dataset", p(&test), "--out-dir", p(&d.join("r")), "--config", p(&d.join("bad.cfg"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    let out = mempo(&["train", "--dataset", p(&test), "--out-dir", p(&d.join("r")), "--preset", "huge"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(mempo(&["eval", "--dataset", p(&test), "--checkpoint", p(&d.join("missing")), "--out", "x"]).status.code(), Some(2));

    // A checkpoint trained against another vocabulary is refused.
    ok(&["gen-data", "--k", "1", "--n", "4", "--kb-size", "40", "--seed", "99", "--out", p(&d.join("other"))]);
    ok(&["bc", "--dataset", p(&d.join("other/dataset.json")), "--out-dir", p(&d.join("obc")), "--config", p(&d.join("tiny.cfg"))]);
    let out = mempo(&["eval", "--dataset", p(&test), "--checkpoint", p(&d.join("obc/bc.ckpt.json")), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}
