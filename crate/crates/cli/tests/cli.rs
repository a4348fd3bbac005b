use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ksgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksgm"))
        .args(args)
        .env("GMGM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_json(path: &Path, value: Value) -> String {
    fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path.display().to_string()
}

/// Generates a two-modality dataset and returns its run config path.
fn setup(dir: &Path) -> String {
    let scenario = write_json(
        &dir.join("scenario.json"),
        json!({
            "axes": [{"name": "rows", "size": 6}, {"name": "a", "size": 5}, {"name": "b", "size": 4}],
            "modalities": [{"name": "x", "axes": ["rows", "a"]}, {"name": "y", "axes": ["rows", "b"]}],
            "distribution": {"kind": "er", "p_edge": 0.4},
            "samples": 3,
            "seed": 7,
        }),
    );
    let data = dir.join("data");
    let out = ksgm(&["generate", &scenario, "-o", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    write_json(
        &dir.join("run.json"),
        json!({
            "dataset": "data/manifest.json",
            "output": "est",
            "threshold": {"method": "topk", "parameter": 2},
        }),
    )
}

#[test]
fn full_pipeline_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let out = ksgm(&["estimate", &config, "--dense"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let est = tmp.path().join("est");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(est.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert_eq!(report["axes"].as_array().unwrap().len(), 3);
    for axis in ["rows", "a", "b"] {
        assert!(est.join("graphs").join(format!("{axis}.tsv")).exists());
        assert!(est
            .join("spectra")
            .join(format!("{axis}.eigenvalues.bin"))
            .exists());
        assert!(est.join("dense").join(format!("{axis}.bin")).exists());
    }

    let truth = tmp.path().join("data").join("truth");
    let out = ksgm(&[
        "eval",
        est.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(est.join("aupr.csv").exists());

    let labels = write_json(
        &tmp.path().join("labels.json"),
        json!({"a": ["p", "p", "q", "q", "r"]}),
    );
    let eval_out = tmp.path().join("assort");
    let out = ksgm(&[
        "eval",
        est.to_str().unwrap(),
        "--labels",
        &labels,
        "-o",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_out.join("assortativity.csv").exists());
}

#[test]
fn partition_writes_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let out = ksgm(&["partition", &config, "--partition-rho", "0.0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let plan: Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("est").join("partition.json")).unwrap(),
    )
    .unwrap();
    for labels in plan["labels"].as_array().unwrap() {
        assert!(labels.as_array().unwrap().iter().all(|l| l == 0));
    }

    let out = ksgm(&["estimate", &config, "--partition-rho", "1e9"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("est").join("report.json")).unwrap(),
    )
    .unwrap();
    let labels = report["partition"]["plan"]["labels"].as_array().unwrap();
    assert!(labels.iter().all(|l| {
        let l = l.as_array().unwrap();
        l.iter()
            .enumerate()
            .all(|(i, v)| v.as_u64() == Some(i as u64))
    }));
    assert_eq!(report["converged"], true);
}

#[test]
fn nonconvergence_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let out = ksgm(&["estimate", &config, "--max-iter", "1", "--tol", "1e-300"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("est").join("report.json").exists());
}

#[test]
fn missing_input_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.json");
    assert_eq!(code(&ksgm(&["estimate", missing.to_str().unwrap()])), 3);
    let config = write_json(
        &tmp.path().join("run.json"),
        json!({"dataset": "nope/manifest.json", "output": "est"}),
    );
    assert_eq!(code(&ksgm(&["estimate", &config])), 3);
}

#[test]
fn bad_arguments_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_json(
        &tmp.path().join("run.json"),
        json!({"dataset": "d", "output": "o", "unknown": 1}),
    );
    assert_eq!(code(&ksgm(&["estimate", &config])), 1);
    assert_eq!(code(&ksgm(&["eval", tmp.path().to_str().unwrap()])), 1);
    assert_eq!(code(&ksgm(&["no-such-command"])), 1);

    let config = setup(tmp.path());
    let out = ksgm(&["estimate", &config, "--rho", "-1"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}
