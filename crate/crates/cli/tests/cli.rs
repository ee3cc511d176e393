use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hsm(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hsm"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run hsm")
}

fn json(bytes: &[u8]) -> Value {
    let text = String::from_utf8_lossy(bytes);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    json(&out.stdout)
}

fn failed(out: &Output) -> Value {
    assert!(!out.status.success(), "unexpected success");
    json(&out.stderr)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic ring scene and its verified matches.
fn prepared_ring(dir: &Path, cameras: &str) {
    ok(&hsm(
        &[
            "synth",
            "--cameras",
            cameras,
            "--seed",
            "5",
            "--out",
            s(&dir.join("scene")),
        ],
        &[],
    ));
    let summary = ok(&hsm(
        &[
            "match",
            "--keypoints",
            s(&dir.join("scene/keypoints")),
            "--matches",
            s(&dir.join("matches.txt")),
        ],
        &[],
    ));
    assert!(summary["edges"].as_u64().unwrap() >= 7);
}

fn prepared(dir: &Path) {
    prepared_ring(dir, "8");
}

fn sam_then_eval(dir: &Path, mode: &str, max_ratio: f64) -> Vec<Value> {
    let out = dir.join(mode);
    let kp = dir.join("scene/keypoints");
    let matches = dir.join("matches.txt");
    let intr = dir.join("scene/intrinsics.txt");
    let mut args = vec!["sam", "--keypoints", s(&kp), "--matches", s(&matches)];
    args.extend(["--output", s(&out), "--mode", mode]);
    if mode == "calibrated" {
        args.extend(["--intrinsics", s(&intr)]);
    }
    let summary = ok(&hsm(&args, &[]));
    let models = summary["models"].as_array().unwrap();
    assert!(!models.is_empty());
    assert!(out.join("model_0.ply").exists());
    assert!(out.join("actions.txt").exists());
    for model in models {
        assert_eq!(model["frame"], "euclidean");
        let report = ok(&hsm(
            &[
                "eval",
                "--scene",
                s(&dir.join("scene/scene.txt")),
                "--model",
                model["prefix"].as_str().unwrap(),
                "--baseline",
            ],
            &[],
        ));
        let ratio = report["rms_ratio"].as_f64().unwrap();
        assert!(ratio <= max_ratio, "{mode}: {report}");
    }
    models.clone()
}

#[test]
fn synth_match_sam_eval_calibrated() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    sam_then_eval(dir.path(), "calibrated", 3.0);
}

#[test]
fn synth_match_sam_eval_autocalibrated() {
    let dir = tempfile::tempdir().unwrap();
    prepared_ring(dir.path(), "12");
    let models = sam_then_eval(dir.path(), "autocalibrated", 5.0);
    assert_eq!(models.len(), 1);
    assert_eq!(models[0]["cameras"], 12);
}

#[test]
fn cluster_reports_a_dendrogram() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let out = hsm(
        &[
            "cluster",
            "--keypoints",
            s(&dir.path().join("scene/keypoints")),
            "--matches",
            s(&dir.path().join("matches.txt")),
        ],
        &[],
    );
    let summary = ok(&out);
    assert_eq!(summary["roots"], 1);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("image ").count(), 8);
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let report = failed(&hsm(
        &[
            "match",
            "--keypoints",
            s(&missing),
            "--matches",
            s(&dir.path().join("m.txt")),
        ],
        &[],
    ));
    assert_eq!(report["error"], "io");
    assert_eq!(report["path"], s(&missing));
}

#[test]
fn calibrated_mode_without_intrinsics_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let kp = dir.path().join("scene/keypoints");
    let m = dir.path().join("matches.txt");
    let o = dir.path().join("out");
    let args = [
        "sam",
        "--keypoints",
        s(&kp),
        "--matches",
        s(&m),
        "--output",
        s(&o),
    ];
    let mut with_flag = args.to_vec();
    with_flag.extend(["--mode", "calibrated"]);
    let report = failed(&hsm(&with_flag, &[]));
    assert_eq!(report["error"], "config");
    assert!(report["message"].as_str().unwrap().contains("intrinsics"));

    // The same setting through the environment.
    let report = failed(&hsm(&args, &[("HSM_MODE", "calibrated")]));
    assert_eq!(report["error"], "config");
}

#[test]
fn invalid_values_and_truncated_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let kp = dir.path().join("scene/keypoints");
    let m = dir.path().join("matches.txt");
    let o = dir.path().join("out");
    let report = failed(&hsm(
        &[
            "sam",
            "--keypoints",
            s(&kp),
            "--matches",
            s(&m),
            "--output",
            s(&o),
            "--reproj_divisor",
            "0",
        ],
        &[],
    ));
    assert_eq!(report["error"], "config");
    assert!(report["message"]
        .as_str()
        .unwrap()
        .contains("reproj_divisor"));

    let text = std::fs::read_to_string(&m).unwrap();
    let keep: Vec<&str> = text.lines().take(20).collect();
    std::fs::write(&m, keep.join("\n")).unwrap();
    let report = failed(&hsm(
        &[
            "sam",
            "--keypoints",
            s(&kp),
            "--matches",
            s(&m),
            "--output",
            s(&o),
        ],
        &[],
    ));
    assert_eq!(report["error"], "parse");
    assert_eq!(report["path"], s(&m));
    assert_eq!(report["line"], 21);
}

#[test]
fn config_file_sets_paths() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "keypoints = {}\nmatches = {}\noutput = {}\nmode = calibrated\nintrinsics = {}\n",
            s(&dir.path().join("scene/keypoints")),
            s(&dir.path().join("matches.txt")),
            s(&dir.path().join("cfg_out")),
            s(&dir.path().join("scene/intrinsics.txt")),
        ),
    )
    .unwrap();
    let summary = ok(&hsm(&["sam", "--config", s(&cfg)], &[]));
    assert!(!summary["models"].as_array().unwrap().is_empty());
}
