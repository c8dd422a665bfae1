use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use xagg_cli::output::{sha256_file, Manifest};

fn xagg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xagg"));
    c.env_remove("XAGG_SEED").env_remove("XAGG_TRIALS").env_remove("XAGG_JOBS");
    c
}

fn run(args: &[&str]) -> Output {
    xagg().args(args).output().expect("spawn xagg")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

/// A small synthetic model shared by the tests of this file.
fn model() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&[
            "train",
            "--dataset",
            "synthetic",
            "--train-limit",
            "300",
            "--max-epochs",
            "1",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        stdout_json(&o);
        dir
    });
    dir.path()
}

fn ckpt() -> String {
    model().join("model.xagc").to_string_lossy().into_owned()
}

fn out_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

#[test]
fn help_and_version_exit_zero() {
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
    assert!(run(&["attack", "--help"]).status.success());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["decompose", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "usage");
}

#[test]
fn single_member_aggregate_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "attack",
        "--ckpt",
        &ckpt(),
        "--attacked",
        "agg-mean:sm",
        "--n-images",
        "1",
        "--iters",
        "2",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"]["kind"], "usage");
    assert!(err["error"]["message"].as_str().unwrap().contains("2 distinct members"));

    let o = run(&["explain", "--ckpt", &ckpt(), "--method", "agg-mean", "--members", "gb", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["eval-irof", "--ckpt", "/nonexistent/model.xagc", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"]["kind"], "input");
}

#[test]
fn decompose_passes_and_is_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["decompose", "--out-dir", tmp.path().to_str().unwrap()]);
    let summary = stdout_json(&o);
    assert_eq!(summary["trials"], 1000);
    assert_eq!(summary["identity_holds"], true);
    assert_eq!(summary["inequality_violations"], 0);

    let manifest: Manifest = serde_json::from_slice(&std::fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    for name in ["decompose.json", "decompose_config.json"] {
        let entry = &manifest.artifacts[name];
        assert_eq!(entry.command, "decompose");
        assert_eq!(entry.sha256, sha256_file(&tmp.path().join(name)).unwrap());
    }
}

#[test]
fn config_precedence_is_flag_env_file_default() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("xagg.toml");
    std::fs::write(&cfg, "seed = 11\n[decompose]\ntrials = 5\n").unwrap();
    let dir = tmp.path().to_str().unwrap();
    let cfg = cfg.to_str().unwrap();
    let trials = |o: Output| stdout_json(&o)["trials"].as_u64().unwrap();

    assert_eq!(trials(run(&["decompose", "--out-dir", dir])), 1000);
    assert_eq!(trials(run(&["decompose", "--out-dir", dir, "--config", cfg])), 5);
    let env = xagg().args(["decompose", "--out-dir", dir, "--config", cfg]).env("XAGG_TRIALS", "6").output().unwrap();
    assert_eq!(trials(env), 6);
    let flag = xagg()
        .args(["decompose", "--out-dir", dir, "--config", cfg, "--trials", "7"])
        .env("XAGG_TRIALS", "6")
        .output()
        .unwrap();
    assert_eq!(trials(flag), 7);

    let resolved: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("decompose_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["trials"], 7);
    assert_eq!(resolved["seed"], 11);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[decompose]\ntrails = 5\n").unwrap();
    let o = run(&["decompose", "--out-dir", tmp.path().to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn csv_bytes(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

#[test]
fn irof_csv_is_identical_across_runs_and_job_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let dir = out_dir(tmp.path(), name);
        let o = run(&[
            "eval-irof",
            "--ckpt",
            &ckpt(),
            "--n-images",
            "3",
            "--methods",
            "sm,gb,agg-mean,agg-var",
            "--members",
            "sm,gb,ig",
            "--segments",
            "grid",
            "--seed",
            "3",
            "--jobs",
            jobs,
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        stdout_json(&o);
        outputs.push(csv_bytes(&dir, "irof.csv"));
    }
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn attack_and_sensn_csvs_are_identical_across_job_counts() {
    let tmp = tempfile::tempdir().unwrap();
    for (jobs, name) in [("1", "j1"), ("2", "j2")] {
        let dir = out_dir(tmp.path(), name);
        let d = dir.to_str().unwrap();
        stdout_json(&run(&[
            "attack", "--ckpt", &ckpt(), "--attacked", "sm,agg-mean:sm+gb", "--n-images", "2", "--iters", "4", "--seed", "5",
            "--jobs", jobs, "--out-dir", d,
        ]));
        stdout_json(&run(&[
            "eval-sensn", "--ckpt", &ckpt(), "--methods", "sm,sg", "--n-images", "2", "--n-grid", "3", "--subsets", "5", "--seed",
            "5", "--jobs", jobs, "--out-dir", d,
        ]));
    }
    let (a, b) = (out_dir(tmp.path(), "j1"), out_dir(tmp.path(), "j2"));
    assert_eq!(csv_bytes(&a, "attack_runs.csv"), csv_bytes(&b, "attack_runs.csv"));
    assert_eq!(csv_bytes(&a, "sensn.csv"), csv_bytes(&b, "sensn.csv"));

    let rows = String::from_utf8(csv_bytes(&a, "attack_runs.csv")).unwrap();
    assert!(rows.lines().next().unwrap().starts_with("image_id,attacked_method,evaluated_method,metric"));
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 3);

    let maps = std::fs::read_dir(a.join("heatmaps")).unwrap().count();
    assert_eq!(maps, 2 * 2 * 3);
    assert!(a.join("heatmaps/agg-mean_sm_gb_00000_adv.xagh").is_file());
}

#[test]
fn explain_writes_heatmap_and_png() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["explain", "--ckpt", &ckpt(), "--method", "agg-var", "--image-index", "4", "--out-dir", tmp.path().to_str().unwrap()]);
    let summary = stdout_json(&o);
    assert_eq!(summary["method"], "agg-var");
    assert!(summary["epsilon"].as_f64().unwrap() > 0.0);
    for name in ["heatmap.xagh", "heatmap.png", "explain_config.json", "manifest.json"] {
        assert!(tmp.path().join(name).is_file(), "{name} missing");
    }
    let png = std::fs::read(tmp.path().join("heatmap.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}
