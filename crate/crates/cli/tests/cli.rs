use std::path::Path;
use std::process::{Command, Output};

fn cia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cia"))
        .args(args)
        .env_remove("CIA_RUN_SEED")
        .output()
        .expect("binary runs")
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {line}"))
}

const TINY: [&str; 16] = [
    "--set", "rl.batch_size=2",
    "--set", "rl.buffer_capacity=8",
    "--set", "net.hidden=8",
    "--set", "net.mixing_embed=4",
    "--set", "log.eval_interval=200",
    "--set", "log.eval_episodes=2",
    "--set", "log.checkpoint_interval=200",
    "--set", "optim.grad_shards=2",
];

fn train_tiny(out: &Path, mode: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--out",
        out.to_str().unwrap(),
        "--mode",
        mode,
        "--steps",
        "500",
        "--log-every",
        "0",
    ];
    args.extend(TINY);
    args.extend(extra);
    cia(&args)
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[rl]\nbatch_sise = 4\n").unwrap();
    let out = cia(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("batch_sise"));
}

#[test]
fn training_is_reproducible_and_analyzable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = train_tiny(d, "cia", &["--seed", "3"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["final.ckpt", "metrics.csv", "checkpoints/step_00000200.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["env_steps"], 500);
    assert_eq!(manifest["seed"], 3);

    let ck = a.join("final.ckpt");
    let ck = ck.to_str().unwrap();
    let eval = cia(&["eval", "--checkpoint", ck, "--episodes", "3", "--seed", "1"]);
    assert!(eval.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(summary["episodes"], 3);

    let an = dir.path().join("an");
    let out = cia(&[
        "analyze", "--checkpoints", ck, ck, "--names", "x", "y", "--episodes", "2", "--out",
        an.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let kl = std::fs::read_to_string(an.join("kl.csv")).unwrap();
    let rows: Vec<&str> = kl.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "model,x,y");
    assert_eq!(rows[1], "x,0e0,0e0");
    assert_eq!(rows[2], "y,0e0,0e0");
    assert!(kl.starts_with("# model x: checkpoint="));

    let single = dir.path().join("single");
    let out = cia(&["analyze", "--checkpoints", ck, "--credits-only", "--out", single.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(single.join("credits_0.csv").exists());
    assert!(!single.join("kl.csv").exists());
    let out = cia(&["analyze", "--checkpoints", ck, "--out", single.to_str().unwrap()]);
    assert_eq!(error_line(&out)["error"], "invalid_argument");

    let csv_path = dir.path().join("credits.csv");
    let out = cia(&["export-credits", "--checkpoint", ck, "--out", csv_path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data[0], "t,k,credit,share,owner");
    assert_eq!(data.len(), 1 + 100 * 2);
}

#[test]
fn interrupted_run_resumes_from_latest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "rs", &[]);
    assert!(out.status.success());
    // pretend the run died after its last periodic checkpoint
    std::fs::remove_file(dir.path().join("final.ckpt")).unwrap();
    let out = cia(&[
        "train", "--out", dir.path().to_str().unwrap(), "--resume", "--log-every", "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming at 400"));
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn oracle_evaluation_reports_the_pinned_return() {
    let out = cia(&["eval", "--oracle", "--episodes", "1000", "--seed", "0"]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["mean_return"].as_f64().unwrap(), cia_core::trainer::ORACLE_RETURN);
}

#[test]
fn bad_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = cia(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(error_line(&out)["error"], "io");

    let corrupt = dir.path().join("bad.ckpt");
    std::fs::write(&corrupt, "not a checkpoint\n").unwrap();
    let out = cia(&["eval", "--checkpoint", corrupt.to_str().unwrap()]);
    assert_eq!(error_line(&out)["error"], "checkpoint");
}
