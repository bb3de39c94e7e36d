//! Drives the `semslam` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semslam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn semslam")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, frames: &str) {
    let out = semslam(&["synth", "--out", path(dir), "--straight", "30", "--frames", frames, "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_run_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let results = tmp.path().join("results");
    synth(&data, "6");
    assert_eq!(fs::read_dir(data.join("velodyne")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(data.join("labels")).unwrap().count(), 6);
    assert!(data.join("synthetic.toml").exists());

    let scans = data.join("velodyne");
    let labels = data.join("labels");
    let truth = data.join("poses.txt");
    let run = semslam(&[
        "run",
        "--scans",
        path(&scans),
        "--labels",
        path(&labels),
        "--groundtruth",
        path(&truth),
        "--out",
        path(&results),
        "--single-thread",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let log: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(log["scans"], 6);
    assert_eq!(log["valid_poses"], 6);
    for name in ["trajectory.txt", "odometry.txt", "graph.txt", "map.ply", "run_log.json"] {
        assert!(results.join(name).exists(), "missing {name}");
    }

    let estimate = results.join("trajectory.txt");
    let eval = semslam(&["eval", "--estimate", path(&estimate), "--groundtruth", path(&truth)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["poses"], 6);
    assert!(report["ate_rmse"].as_f64().unwrap() < 0.1);
}

#[test]
fn drop_writes_kept_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let thinned = tmp.path().join("thinned");
    synth(&data, "20");
    let out = semslam(&[
        "drop",
        "--scans",
        path(&data.join("velodyne")),
        "--labels",
        path(&data.join("labels")),
        "--groundtruth",
        path(&data.join("poses.txt")),
        "--out",
        path(&thinned),
        "--run",
        "3",
        "--window",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let kept = fs::read_to_string(thinned.join("kept.txt")).unwrap();
    assert_eq!(kept.lines().count(), 14);
    assert_eq!(fs::read_dir(thinned.join("velodyne")).unwrap().count(), 14);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(semslam(&["run"]).status.code(), Some(2));
    assert_eq!(semslam(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3");
    let scans = data.join("velodyne");
    let out = semslam(&["run", "--scans", path(&scans), "--set", "preprocess.voxel_size=-1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "[preprocess]\nno_such_key = 1\n").unwrap();
    let out = semslam(&["run", "--scans", path(&scans), "--config", path(&config)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_dataset_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing-here");
    let out = semslam(&["run", "--scans", path(&missing)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let out = semslam(&["eval", "--estimate", path(&missing), "--groundtruth", path(&missing)]);
    assert_eq!(out.status.code(), Some(4));
}
