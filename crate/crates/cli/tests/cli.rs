use std::path::Path;
use std::process::{Command, Output};

fn csfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csfm"))
        .args(args)
        .args(["--output", dir.to_str().unwrap()])
        .env_remove("CSFM_WORKERS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

// small orbit scene keeps the end-to-end runs fast
const SMALL: &[&str] = &["--layout", "orbit", "--cameras", "24", "--points", "600", "--max-cluster-size", "12", "--seed", "7"];

fn status_lines(dir: &Path) -> Vec<(String, String)> {
    let out = csfm(dir, &["status"]);
    assert!(out.status.success());
    stdout(&out)
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].to_string(), f[2].to_string())
        })
        .collect()
}

#[test]
fn invalid_completeness_ratio_exits_with_config_code_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = csfm(&dir, &["run", "--completeness-ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("completeness ratio"));
    assert!(!dir.exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n[bundle]\nroundz = 3\n").unwrap();
    let out = csfm(&tmp.path().join("out"), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_directory_reports_every_stage_absent() {
    let tmp = tempfile::tempdir().unwrap();
    let lines = status_lines(tmp.path());
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|(_, state)| state == "absent"));
}

#[test]
fn missing_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = csfm(&tmp.path().join("nope"), &["status"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stage_without_upstream_artifacts_fails_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = csfm(tmp.path(), &["cluster"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cluster") && err.contains("match_graph.json"), "{err}");
}

#[test]
fn full_run_resume_and_stale_detection() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut args = vec!["run"];
    args.extend_from_slice(SMALL);
    let out = csfm(dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("after bundle adjustment"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    for key in [
        "meanPositionError",
        "medianPositionError",
        "meanRelRotationError",
        "meanRelTranslationError",
        "medianEpipolarError",
        "numRegistered",
        "numConnectedPairs",
        "numPoints",
        "numClusters",
        "alignment",
    ] {
        assert!(!report["bundleAdjusted"][key].is_null(), "{key}");
    }
    assert!(status_lines(dir).iter().all(|(_, s)| s == "current"));

    std::fs::remove_file(dir.join("report.json")).unwrap();
    args.push("--resume");
    let out = csfm(dir, &args);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("evaluate: done"));
    assert_eq!(text.matches("up to date").count(), 7, "{text}");

    // a tampered cluster file invalidates everything downstream of it
    let clusters = dir.join("clusters.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&clusters).unwrap()).unwrap();
    v["discardedEdges"] = serde_json::json!([]);
    std::fs::write(&clusters, serde_json::to_vec(&v).unwrap()).unwrap();
    let lines = status_lines(dir);
    assert_eq!(lines[0].1, "current");
    assert_eq!(lines[1].1, "modified");
    assert!(lines[2..].iter().all(|(_, s)| s == "stale"), "{lines:?}");
}

#[test]
fn worker_count_does_not_change_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for w in ["1", "3"] {
        let dir = tmp.path().join(w);
        let mut args = vec!["run", "--workers", w];
        args.extend_from_slice(SMALL);
        assert!(csfm(&dir, &args).status.success());
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| !p.to_string_lossy().ends_with(".meta.json"))
            .collect();
        files.sort();
        hashes.push(files.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(hashes[0], hashes[1]);
}
