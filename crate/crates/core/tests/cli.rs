//! End-to-end runs of the `mvumi` binary: exit codes and stage outputs.

use std::path::Path;
use std::process::{Command, Output};

use mvumi::eval::ablate::AblationRuns;
use mvumi::eval::report::RUNS_FILE;
use mvumi::sim::SimConfig;
use mvumi::sync::read_dataset;

fn mvumi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvumi"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mvumi(&["sim", "--bogus"])), 1);
    assert_eq!(code(&mvumi(&[])), 1);
    assert_eq!(code(&mvumi(&["rollout", "--mode", "sideways"])), 1);
    assert_eq!(code(&mvumi(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(code(&mvumi(&["sync", "--session", s(&missing)])), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "n_containers = 0\n").unwrap();
    let out = mvumi(&[
        "sim",
        "--config",
        s(&cfg),
        "--embodiment",
        "human",
        "--episodes",
        "1",
        "--seed",
        "0",
        "--out",
        s(&missing),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn oracle_pipeline_produces_a_valid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, SimConfig::default().to_toml_string()).unwrap();
    let session = dir.path().join("session");
    let ok = |args: &[&str]| {
        let out = mvumi(args);
        assert_eq!(
            code(&out),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    ok(&[
        "sim",
        "--config",
        s(&cfg),
        "--embodiment",
        "human",
        "--episodes",
        "2",
        "--seed",
        "11",
        "--out",
        s(&session),
    ]);
    let seg = ok(&["segment", "--session", s(&session), "--kind", "oracle"]);
    assert!(!seg.stdout.is_empty());
    ok(&["inpaint", "--session", s(&session), "--masks", "oracle"]);
    ok(&["sync", "--session", s(&session)]);
    let ds = read_dataset(&session).unwrap();
    assert_eq!(ds.episodes.len(), 2);

    let blob = dir.path().join("policy.bin");
    ok(&[
        "train",
        "--dataset",
        s(&session),
        "--p0",
        "0.5",
        "--lambda",
        "0.01",
        "--iters",
        "200",
        "--lr",
        "0.003",
        "--seed",
        "2",
        "--out",
        s(&blob),
    ]);
    assert!(blob.with_extension("loss.csv").exists());
    let traces = dir.path().join("traces.csv");
    let out = ok(&[
        "rollout",
        "--policy",
        s(&blob),
        "--config",
        s(&cfg),
        "--mode",
        "inpaint",
        "--episodes",
        "2",
        "--seed",
        "0",
        "--traces",
        s(&traces),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("success "));
    assert_eq!(std::fs::read_to_string(&traces).unwrap().lines().count(), 3);
}

#[test]
fn failing_report_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let runs = AblationRuns {
        task_id: "context".into(),
        n_containers: 3,
        seeds: vec![0],
        train_episodes: 1,
        eval_episodes: 1,
        arms: Vec::new(),
        controls: Vec::new(),
        saliency: Vec::new(),
        segmenter_iou: vec![1.0],
        random_success_rate: 0.0,
        processed_frames: 10,
        process_seconds: 1.0,
    };
    std::fs::write(
        dir.path().join(RUNS_FILE),
        serde_json::to_vec(&runs).unwrap(),
    )
    .unwrap();
    let out = mvumi(&["report", "--in", s(dir.path())]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ablation_report.txt").exists());
}
