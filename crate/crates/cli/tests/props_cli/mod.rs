//! Property suites for the command layer, 100 deterministic cases each.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ksgm::synth::Distribution;
use ksgm_cli::{
    cmd_estimate, cmd_eval, cmd_generate, EvalOutcome, EvalTarget, RunConfig, Scenario,
    ScenarioAxis, ScenarioModality, TRUTH_DIR,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub const CASES: u32 = 100;

pub type Property = fn() -> Result<(), String>;

pub fn suite() -> Vec<(&'static str, Property)> {
    vec![
        ("runs_are_reproducible", runs_are_reproducible),
        (
            "artifacts_are_self_describing",
            artifacts_are_self_describing,
        ),
    ]
}

fn check<S>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
{
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner =
        TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(e: impl ToString) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

/// Two matrices sharing their first axis, or one matrix when `shared` is false.
fn scenario(rows: usize, cols: usize, shared: bool, seed: u64) -> Scenario {
    let mut axes = vec![
        ScenarioAxis {
            name: "rows".into(),
            size: rows,
        },
        ScenarioAxis {
            name: "left".into(),
            size: cols,
        },
    ];
    let mut modalities = vec![ScenarioModality {
        name: "x".into(),
        axes: vec!["rows".into(), "left".into()],
    }];
    if shared {
        axes.push(ScenarioAxis {
            name: "right".into(),
            size: cols + 1,
        });
        modalities.push(ScenarioModality {
            name: "y".into(),
            axes: vec!["rows".into(), "right".into()],
        });
    }
    Scenario {
        axes,
        modalities,
        distribution: Distribution::Er { p_edge: 0.3 },
        samples: 2,
        seed,
    }
}

fn run_config(data: &Path, out: &Path) -> RunConfig {
    serde_json::from_value(serde_json::json!({
        "dataset": data.join("manifest.json"),
        "output": out,
        "threshold": {"method": "topk", "parameter": 1},
    }))
    .unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path, skip: &str) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != skip {
                out.push((
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

pub fn runs_are_reproducible() -> Result<(), String> {
    check(
        (3..8usize, 3..8usize, any::<bool>(), any::<u64>()),
        |(rows, cols, shared, seed)| {
            let tmp = tempfile::tempdir().map_err(fail)?;
            let s = scenario(rows, cols, shared, seed);
            let mut snapshots = Vec::new();
            for run in ["a", "b"] {
                let data = tmp.path().join(run).join("data");
                let est = tmp.path().join(run).join("est");
                cmd_generate(&s, &data).map_err(fail)?;
                cmd_estimate(&run_config(&data, &est)).map_err(fail)?;
                // Timings differ between runs; everything else must not.
                snapshots.push((snapshot(&data, ""), snapshot(&est, "report.json")));
            }
            prop_assert_eq!(&snapshots[0], &snapshots[1]);
            Ok(())
        },
    )
}

pub fn artifacts_are_self_describing() -> Result<(), String> {
    check(
        (3..8usize, 3..8usize, any::<bool>(), any::<u64>()),
        |(rows, cols, shared, seed)| {
            let tmp = tempfile::tempdir().map_err(fail)?;
            let data = tmp.path().join("data");
            let est = tmp.path().join("est");
            let truth = tmp.path().join("truth");
            cmd_generate(&scenario(rows, cols, shared, seed), &data).map_err(fail)?;
            cmd_estimate(&run_config(&data, &est)).map_err(fail)?;
            fs::rename(data.join(TRUTH_DIR), &truth).map_err(fail)?;
            fs::remove_dir_all(&data).map_err(fail)?;
            let has_edges = fs::read_dir(&truth).map_err(fail)?.any(|e| {
                let p = e.unwrap().path();
                p.extension().is_some_and(|x| x == "tsv")
                    && fs::read_to_string(&p).unwrap().lines().count() > 0
            });
            prop_assume!(has_edges);
            let target = EvalTarget::Truth(truth);
            match cmd_eval(&est, &target, &tmp.path().join("eval")).map_err(fail)? {
                EvalOutcome::Pr(rows) => {
                    prop_assert!(!rows.is_empty());
                    prop_assert!(rows.iter().all(|r| r.aupr > 0.0 && r.aupr <= 1.0));
                }
                other => return Err(fail(format!("unexpected outcome {other:?}"))),
            }
            Ok(())
        },
    )
}
