//! End-to-end tests against the compiled binary: exit codes, artifact
//! layout, determinism, and the invalid-config corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn laber() -> Command {
    Command::new(env!("CARGO_BIN_EXE_laber"))
}

fn run(args: &[&str]) -> Output {
    laber().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Every fixture under tests/fixtures/invalid declares the config key its
/// error message must name in a `# expect:` first line. All must exit 2.
#[test]
fn invalid_configs_exit_2_and_name_the_key() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/invalid");
    let mut checked = 0;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for path in entries {
        let text = std::fs::read_to_string(&path).unwrap();
        let needle = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# expect: "))
            .unwrap_or_else(|| panic!("{} lacks an expect line", path.display()))
            .trim()
            .to_string();
        let out = run(&["train", "--config", path.to_str().unwrap(), "--steps", "0"]);
        let stderr = stderr_of(&out);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{}: expected exit 2, stderr: {stderr}",
            path.display()
        );
        assert!(
            stderr.contains(&needle),
            "{}: stderr {stderr:?} does not mention {needle:?}",
            path.display()
        );
        checked += 1;
    }
    assert!(checked >= 16, "fixture corpus shrank to {checked}");
}

#[test]
fn missing_config_file_exits_2() {
    let out = run(&["train", "--config", "/nonexistent/nope.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("nope.toml"));
}

#[test]
fn seed_and_seeds_conflict() {
    let out = run(&["train", "--seed", "1", "--seeds", "0..2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_seed_range_exits_2() {
    for bad in ["5", "3..3", "4..2", "a..b"] {
        let out = run(&["train", "--seeds", bad]);
        assert_eq!(out.status.code(), Some(2), "--seeds {bad}");
    }
}

#[test]
fn zero_step_train_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--steps", "0", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(out_dir.join("manifest.toml").is_file());
    assert!(!out_dir.join("learning_curve.csv").exists());
    let manifest = std::fs::read_to_string(out_dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("sampler = \"uniform\""));
    assert!(manifest.contains("steps = 0"));
}

#[test]
fn train_run_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "--steps".into(),
            "400".into(),
            "--seed".into(),
            "9".into(),
            "--sampler".into(),
            "per".into(),
            "--batch-size".into(),
            "8".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let args = args(out);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let res = run(&refs);
        assert_eq!(res.status.code(), Some(0), "stderr: {}", stderr_of(&res));
    }
    let a = std::fs::read(out_a.join("learning_curve.csv")).unwrap();
    let b = std::fs::read(out_b.join("learning_curve.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let ca = std::fs::read(out_a.join("checkpoint.json")).unwrap();
    let cb = std::fs::read(out_b.join("checkpoint.json")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn shipped_configs_resolve_and_run() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    for name in [
        "chain-uniform.toml",
        "grid-laber.toml",
        "chain-c51-per.toml",
    ] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train",
            "--config",
            configs.join(name).to_str().unwrap(),
            "--steps",
            "300",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{name} stderr: {}",
            stderr_of(&out)
        );
        assert!(out_dir.join("learning_curve.csv").is_file(), "{name}");
    }
}

#[test]
fn seed_sweep_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("sweep");
    let out = run(&[
        "train",
        "--seeds",
        "3..6",
        "--steps",
        "200",
        "--batch-size",
        "8",
        "--out",
        base.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    for seed in 3..6 {
        let sub = base.join(format!("seed-{seed}"));
        assert!(sub.join("learning_curve.csv").is_file(), "seed {seed}");
        let manifest = std::fs::read_to_string(sub.join("manifest.toml")).unwrap();
        assert!(manifest.contains(&format!("seed = {seed}")));
    }
    let stdout = stdout_of(&out);
    for seed in 3..6 {
        assert!(
            stdout.contains(&format!("seed {seed}:")),
            "stdout: {stdout}"
        );
    }
}

#[test]
fn variance_study_prints_exact_values_and_passes() {
    let out = run(&["variance-study"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = stdout_of(&out);
    assert!(stdout.contains("62.5"));
    assert!(stdout.contains("56.25"));
    assert!(stdout.contains("132.8125"));
    assert_eq!(stdout.matches("PASS").count(), 3);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn tv_study_rejects_plain_prioritization() {
    let out = run(&["tv-study", "--sampler", "ger", "--steps", "100"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("agent.sampler"));
}

#[test]
fn tv_study_writes_windows_json() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("tv");
    let out = run(&[
        "tv-study",
        "--sampler",
        "laber-mean",
        "--steps",
        "400",
        "--batch-size",
        "8",
        "--m",
        "2",
        "--seed",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = std::fs::read_to_string(out_dir.join("tv_study.json")).unwrap();
    let study: serde_json::Value = serde_json::from_str(&text).unwrap();
    let windows = study["windows"].as_array().unwrap();
    assert_eq!(windows.len(), 3);
    let labels: Vec<&str> = windows
        .iter()
        .map(|w| w["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["all", "first-tenth", "last-tenth"]);
    let stdout = stdout_of(&out);
    assert!(stdout.contains("p_value"));
}

#[test]
fn bench_emits_csv_with_requested_batches() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bench",
        "--batch-sizes",
        "4,8",
        "--hidden",
        "8",
        "--input-dim",
        "6",
        "--passes",
        "20",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("4,"));
    assert!(lines[2].starts_with("8,"));
}

#[test]
fn bench_rejects_unparseable_batch_list() {
    let out = run(&["bench", "--batch-sizes", "4,huge"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("--batch-sizes"));
}

#[test]
fn log_filter_env_var_enables_progress_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = laber()
        .args([
            "train",
            "--steps",
            "200",
            "--batch-size",
            "8",
            "--out",
            dir.path().join("r").to_str().unwrap(),
        ])
        .env("LABER_LOG", "info")
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0));
    let stderr = stderr_of(&out);
    assert!(stderr.contains("episodes"), "stderr: {stderr}");
    // Without the variable the same run is silent on stderr.
    let quiet = laber()
        .args([
            "train",
            "--steps",
            "200",
            "--batch-size",
            "8",
            "--out",
            dir.path().join("q").to_str().unwrap(),
        ])
        .env_remove("LABER_LOG")
        .output()
        .expect("binary runs");
    assert_eq!(quiet.status.code(), Some(0));
    assert!(stderr_of(&quiet).is_empty());
}
