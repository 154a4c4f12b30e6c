use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mcfilter"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// bootstrap → extract (train, test) → accumulate, shared by the tests.
fn workspace() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let boot = dir.join("boot");
        let out = run(&[
            "bootstrap",
            "--out",
            p(&boot),
            "--epochs",
            "30",
            "--train-per-class",
            "60",
            "--test-per-class",
            "10",
        ]);
        assert!(out.status.success());
        let model = boot.join("base_model.json");
        for split in ["train", "test"] {
            let out = run(&[
                "extract",
                "--data",
                p(&boot.join("data").join(split)),
                "--model",
                p(&model),
                "--out",
                p(&dir.join(format!("ex_{split}"))),
            ]);
            assert!(out.status.success());
        }
        let out = run(&[
            "accumulate",
            "--extract",
            p(&dir.join("ex_train")),
            "--model",
            p(&model),
            "--out",
            p(&dir.join("prof")),
            "--tau",
            "0.5",
        ]);
        assert!(out.status.success());
        dir
    })
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in [
        "bootstrap",
        "extract",
        "accumulate",
        "detect",
        "debug",
        "report",
        "pipeline",
        "replay",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let detect = String::from_utf8(run(&["detect", "--help"]).stdout).unwrap();
    for default in ["0.9", "0.15", "0.3", "avg_recall"] {
        assert!(
            detect.contains(default),
            "{default} missing from detect help"
        );
    }
    let debug = String::from_utf8(run(&["debug", "--help"]).stdout).unwrap();
    for default in ["0.001", "0.00005", "0.5"] {
        assert!(debug.contains(default), "{default} missing from debug help");
    }
}

#[test]
fn unknown_metric_is_a_usage_error() {
    let out = run(&[
        "detect",
        "--train",
        "x",
        "--test",
        "y",
        "--profiles",
        "z",
        "--out",
        "w",
        "--metric",
        "precision",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("precision"));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "extract",
        "--data",
        p(&dir.path().join("nope")),
        "--model",
        p(&dir.path().join("model.json")),
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn detect_prints_the_table() {
    let dir = workspace();
    let out = run(&[
        "detect",
        "--train",
        p(&dir.join("ex_train")),
        "--test",
        p(&dir.join("ex_test")),
        "--profiles",
        p(&dir.join("prof/profiles.json")),
        "--out",
        p(&dir.join("det")),
        "--table",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(
        lines[0],
        "Model,Total errors,Skip threshold,Freq. threshold,Metric,Errors detected,New errors"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains(",90%,15%,Avg. Recall,"));
    assert!(lines[3].contains(",0%,0%,Recall < 0.3,"));
    assert!(dir.join("det/manifest.json").exists());

    let single = run(&[
        "detect",
        "--train",
        p(&dir.join("ex_train")),
        "--test",
        p(&dir.join("ex_test")),
        "--profiles",
        p(&dir.join("prof/profiles.json")),
        "--out",
        p(&dir.join("det_f1")),
        "--metric",
        "avg_f1",
        "--skip",
        "0",
        "--threshold",
        "global",
    ]);
    assert!(single.status.success());
    let text = String::from_utf8(single.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .contains(",0%,15%,Avg. F1 score,"));
}

#[test]
fn debug_config_file_is_overridden_by_explicit_flags_then_report_runs() {
    let dir = workspace();
    let cfg = dir.join("debug.toml");
    std::fs::write(
        &cfg,
        "lambda1 = 0.5\nlambda2 = 0.25\nepochs = 1\ntau = 0.5\n",
    )
    .unwrap();
    let boot = dir.join("boot");
    let out_dir = dir.join("dbg");
    let out = run(&[
        "debug",
        "--model",
        p(&boot.join("base_model.json")),
        "--train",
        p(&boot.join("data/train")),
        "--test",
        p(&boot.join("data/test")),
        "--profiles",
        p(&dir.join("prof/profiles.json")),
        "--out",
        p(&out_dir),
        "--config",
        p(&cfg),
        "--lambda2",
        "0.125",
    ]);
    assert!(out.status.success());
    let outcome: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("outcome.json")).unwrap()).unwrap();
    assert_eq!(outcome["lambda1"], 0.5);
    assert_eq!(outcome["lambda2"], 0.125);
    assert_eq!(outcome["epochs"].as_array().unwrap().len(), 1);

    let report = dir.join("report");
    let out = run(&[
        "report",
        "--base",
        p(&boot.join("base_model.json")),
        "--debugged",
        p(&out_dir.join("debugged_model.json")),
        "--test",
        p(&boot.join("data/test")),
        "--out",
        p(&report),
        "--overlays",
        "1",
    ]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("Section,Class,Original recall,Debugged recall,Change"));
    let overlays = std::fs::read_dir(report.join("overlays")).unwrap().count();
    assert_eq!(overlays, 2);
}

#[test]
fn replay_rejects_a_stage_manifest() {
    let dir = workspace();
    let out = run(&[
        "replay",
        "--manifest",
        p(&dir.join("prof/manifest.json")),
        "--out",
        p(&dir.join("replayed")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_precision_bootstrap_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--precision",
        "f32",
        "bootstrap",
        "--out",
        p(dir.path()),
        "--epochs",
        "1",
        "--train-per-class",
        "3",
        "--test-per-class",
        "1",
    ]);
    assert!(out.status.success());
    let ckpt: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("base_model.json")).unwrap())
            .unwrap();
    assert_eq!(ckpt["scalar"], "f32");
    // An f32 checkpoint is refused by the default f64 precision.
    let out = run(&[
        "extract",
        "--data",
        p(&dir.path().join("data/train")),
        "--model",
        p(&dir.path().join("base_model.json")),
        "--out",
        p(&dir.path().join("ex")),
    ]);
    assert!(!out.status.success());
}
