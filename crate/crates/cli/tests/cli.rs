use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ltnrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltnrl")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ltnrl(&[]).status.code(), Some(1));
    assert_eq!(ltnrl(&["fly"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = ltnrl(&[
        "run", "--experiment", "3", "--condition", "none", "--epsilon", "reset", "--out", path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(ltnrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "gamma = 0.9\nwarp = 9\n").unwrap();
    let out = ltnrl(&[
        "run", "--experiment", "1", "--condition", "types", "--epsilon", "hold", "--out", path(dir.path()),
        "--config", path(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `warp`"));
}

#[test]
fn tiny_run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "train_every = 20\nupdates_per_train = 1\nbatch_size = 4\nreplay_capacity = 100\neval_trajectories = 2\nltn_iterations = 10\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = ltnrl(&[
        "run", "--experiment", "2", "--condition", "types_facts", "--epsilon", "reset", "--seeds", "1",
        "--phase-steps", "40", "--eval-every", "20", "--out", path(&out_dir), "--config", path(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(out_dir.join("records.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,epoch,phase,condition,epsilon_policy,normalized_reward_mean,ci95");
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[8].starts_with("0,8,4,types_facts,reset,"));
    let meta = fs::read_to_string(out_dir.join("metadata.txt")).unwrap();
    assert!(meta.contains("eval_every = 20"));
    assert!(out_dir.join("checkpoints/seed0_phase4.qnet").exists());
    assert!(out_dir.join("checkpoints/seed0_phase1.gnd").exists());

    let svg = dir.path().join("plot.svg");
    let out = ltnrl(&["plot", "--in", path(&out_dir.join("records.csv")), "--out", path(&svg)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(fs::read_to_string(&svg).unwrap().contains("<polyline"));
}

#[test]
fn ltn_train_writes_groundings() {
    let dir = tempfile::tempdir().unwrap();
    let theory = dir.path().join("t.ltn");
    fs::write(&theory, "learnable goto\nlearnable avoid\nforall x: circle(x) <-> goto(x)\nforall x: cross(x) <-> avoid(x)\n").unwrap();
    let out_file = dir.path().join("g.bin");
    let out = ltnrl(&["ltn-train", "--theory", path(&theory), "--iters", "50", "--out", path(&out_file)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("satisfaction"));
    assert!(fs::metadata(&out_file).unwrap().len() > 0);

    fs::write(&theory, "learnable goto\nforall x: blob(x) -> goto(x)\n").unwrap();
    let out = ltnrl(&["ltn-train", "--theory", path(&theory), "--iters", "5", "--out", path(&out_file)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blob"));
}
