//! End-to-end tests of the command-line binary: every subcommand runs as a
//! real subprocess against a small generated dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eit-hybrid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small dataset shared by every test in this file, generated once through
/// the real `gen` subcommand.
fn shared_data() -> &'static (TempDir, PathBuf) {
    static DATA: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let config = dir.path().join("gen.json");
        std::fs::write(&config, gen_config_json()).unwrap();
        let out = run(&[
            "gen",
            "--config",
            config.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ]);
        assert_ok(&out);
        (dir, data)
    })
}

fn gen_config_json() -> &'static str {
    r#"{
  "n_samples": 10,
  "seed": 11,
  "grid_n": 32,
  "mesh_target_h": 0.06,
  "split_fractions": [0.6, 0.2, 0.2]
}"#
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn generation_is_bitwise_deterministic() {
    let (_keep, data) = shared_data();
    let dir = TempDir::new().unwrap();
    let copy = dir.path().join("copy");
    let config = dir.path().join("gen.json");
    std::fs::write(&config, gen_config_json()).unwrap();
    let out = run(&[
        "gen",
        "--config",
        config.to_str().unwrap(),
        "--out",
        copy.to_str().unwrap(),
    ]);
    assert_ok(&out);
    for name in ["manifest.json", "dv.bin", "u.bin", "sigma.bin", "phantoms.json"] {
        assert_eq!(
            read(&data.join(name)),
            read(&copy.join(name)),
            "{name} differs between identical gen runs"
        );
    }
}

#[test]
fn flags_override_config_file_values() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let config = dir.path().join("gen.json");
    std::fs::write(&config, gen_config_json()).unwrap();
    let out = run(&[
        "gen",
        "--config",
        config.to_str().unwrap(),
        "--n",
        "11",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let manifest: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&data.join("manifest.json"))).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["n_samples"], 11);
    assert_eq!(manifest["config"]["seed"], 11);
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    let out = run(&["gen", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_path_exits_with_failure_and_names_the_path() {
    let out = run(&[
        "evaluate",
        "--data",
        "/no/such/dataset",
        "--results",
        "/no/such/results",
        "--out",
        "/tmp/unused-report.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/no/such/dataset"), "stderr: {stderr}");
}

#[test]
fn reconstruct_rejects_out_of_range_case() {
    let (_keep, data) = shared_data();
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "reconstruct",
        "--data",
        data.to_str().unwrap(),
        "--case",
        "999",
        "--oracle-u",
        "--steps",
        "5",
        "--out",
        dir.path().join("case").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("999"), "stderr: {stderr}");
}

#[test]
fn oracle_reconstruction_emits_all_case_files_reproducibly() {
    let (_keep, data) = shared_data();
    let dir = TempDir::new().unwrap();
    let case_a = dir.path().join("a");
    let case_b = dir.path().join("b");
    for case_dir in [&case_a, &case_b] {
        let out = run(&[
            "reconstruct",
            "--data",
            data.to_str().unwrap(),
            "--case",
            "0",
            "--oracle-u",
            "--steps",
            "40",
            "--seed",
            "3",
            "--out",
            case_dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    for name in ["sigma.bin", "gt_sigma.bin", "loss_history.csv", "run.json"] {
        assert!(case_a.join(name).is_file(), "missing {name}");
    }
    // Same seed and inputs: the whole optimization trace matches bit for bit.
    assert_eq!(
        read(&case_a.join("loss_history.csv")),
        read(&case_b.join("loss_history.csv"))
    );
    assert_eq!(read(&case_a.join("sigma.bin")), read(&case_b.join("sigma.bin")));
    let echo: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&case_a.join("run.json"))).unwrap()).unwrap();
    assert_eq!(echo["case"], 0);
    assert_eq!(echo["oracle_u"], true);
    assert_eq!(echo["steps"], 40);
    assert!(echo["runtime_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluate_scores_cases_and_is_pure_over_its_inputs() {
    let (_keep, data) = shared_data();
    let dir = TempDir::new().unwrap();
    let results = dir.path().join("results");
    for case in ["0", "1"] {
        let out = run(&[
            "reconstruct",
            "--data",
            data.to_str().unwrap(),
            "--case",
            case,
            "--oracle-u",
            "--steps",
            "30",
            "--out",
            results.join(format!("case_{case}")).to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    let report_a = dir.path().join("report_a.json");
    let report_b = dir.path().join("report_b.json");
    for report in [&report_a, &report_b] {
        let out = run(&[
            "evaluate",
            "--data",
            data.to_str().unwrap(),
            "--results",
            results.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    assert_eq!(read(&report_a), read(&report_b));
    let parsed: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&report_a)).unwrap()).unwrap();
    let entry = &parsed["case_0"];
    assert_eq!(entry["case"], 0);
    for field in ["rmse", "rel_l2", "background_mad"] {
        assert!(
            entry["metrics"][field].is_number(),
            "metrics missing {field}: {entry}"
        );
    }
    assert!(entry["metrics"]["runtime_seconds"].as_f64().unwrap() > 0.0);
    assert!(parsed["case_1"].is_object());
}

#[test]
fn plot_renders_panel_and_loss_figures() {
    let (_keep, data) = shared_data();
    let dir = TempDir::new().unwrap();
    let case_dir = dir.path().join("case_2");
    let out = run(&[
        "reconstruct",
        "--data",
        data.to_str().unwrap(),
        "--case",
        "2",
        "--oracle-u",
        "--steps",
        "25",
        "--out",
        case_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let figures = dir.path().join("figures");
    let out = run(&[
        "plot",
        "--results",
        case_dir.to_str().unwrap(),
        "--out",
        figures.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(figures.join("case_2_panel.png").is_file());
    assert!(figures.join("case_2_loss.png").is_file());
    let panel = image::open(figures.join("case_2_panel.png")).unwrap().to_rgb8();
    // Subplots are one pixel per grid node: 2 columns x 3 rows of 32x32.
    assert_eq!((panel.width(), panel.height()), (2 * 32 + 2, 3 * 32 + 4));
}

#[test]
fn trained_checkpoint_drives_reconstruction() {
    let (_keep, data) = shared_data();
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "train-stage1",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch",
        "4",
    ]);
    assert_ok(&out);
    assert!(ckpt.is_file());
    assert!(PathBuf::from(format!("{}.json", ckpt.display())).is_file());
    let report: serde_json::Value = serde_json::from_str(
        &String::from_utf8(read(&PathBuf::from(format!("{}.report.json", ckpt.display()))))
            .unwrap(),
    )
    .unwrap();
    assert_eq!(report["diverged_at"], serde_json::Value::Null);
    let losses = report["train_loss"].as_array().unwrap();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|v| v.as_f64().unwrap().is_finite()));

    let case_dir = dir.path().join("case");
    let out = run(&[
        "reconstruct",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--case",
        "0",
        "--steps",
        "20",
        "--out",
        case_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(case_dir.join("sigma.bin").is_file());
    let echo: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&case_dir.join("run.json"))).unwrap())
            .unwrap();
    assert_eq!(echo["oracle_u"], false);
}

#[test]
fn weights_file_overrides_loss_configuration() {
    let (_keep, data) = shared_data();
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("weights.json");
    std::fs::write(&weights, r#"{"beta": 2.0, "nu": 10.0, "m": 40}"#).unwrap();
    let case_dir = dir.path().join("case");
    let out = run(&[
        "reconstruct",
        "--data",
        data.to_str().unwrap(),
        "--case",
        "1",
        "--oracle-u",
        "--steps",
        "10",
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        case_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let echo: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&case_dir.join("run.json"))).unwrap())
            .unwrap();
    assert_eq!(echo["weights"]["beta"], 2.0);
    assert_eq!(echo["weights"]["nu"], 10.0);
    assert_eq!(echo["weights"]["m"], 40);
    // Untouched weights keep their defaults.
    assert_eq!(echo["weights"]["alpha"], 1.0);
}
