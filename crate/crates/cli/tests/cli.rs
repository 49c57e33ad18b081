use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use didimp::report::{EstimateReport, OlsSummary, WARNING_CODES};

const TWO_BY_THREE: &str = "unit,time,y,d\nA,1,0,0\nA,2,5,1\nA,3,9,1\nB,1,1,0\nB,2,2,0\nB,3,6,1\n";

/// Noise-free 3×3 panel: α = (0, 1, 2), β = (0, 1, 2), τ_A2 = 5, τ_A3 = 7, τ_B3 = 3.
const THREE_BY_THREE: &str = "unit,time,y,e\nA,1,0,2\nA,2,6,2\nA,3,9,2\nB,1,1,3\nB,2,2,3\nB,3,6,3\nC,1,2,never\nC,2,3,never\nC,3,4,never\n";

fn didimp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_didimp"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// The JSON error report, which is the last line on stderr after any log output.
fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

/// Simulated baseline panel, written by the `simulate` subcommand.
fn baseline_panel(dir: &Path) -> String {
    let p: PathBuf = dir.join("baseline.csv");
    let o = didimp(&["simulate", "--panel-out", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    p.display().to_string()
}

#[test]
fn unidentified_horizon_exits_2_with_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "p.csv", TWO_BY_THREE);
    let out = dir.path().join("r.json");
    let o = didimp(&[
        "--input",
        &input,
        "--treated",
        "d",
        "--out",
        out.to_str().unwrap(),
        "estimate",
        "--estimand",
        "h0",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(!out.exists());
    let err: serde_json::Value = error_line(&o);
    assert_eq!(err["error"], "estimator.not_identified");
    assert_eq!(err["certificate"], serde_json::json!(["beta[3]"]));
}

#[test]
fn single_cell_on_three_by_three() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "p.csv", THREE_BY_THREE);
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"estimands": [{"kind": "custom", "label": "b3", "weights": [{"unit": "B", "time": 3, "value": 1.0}]}]}"#,
    );
    let r: EstimateReport = serde_json::from_str(&stdout(&didimp(&[
        "--config",
        &cfg,
        "--input",
        &input,
        "--event-time",
        "e",
        "estimate",
    ])))
    .unwrap();
    let e = &r.estimates[0];
    assert_eq!(e.label, "b3");
    assert!((e.estimate - 3.0).abs() < 1e-12);
    assert!(e.se.abs() < 1e-12);
    assert_eq!((r.n, r.n_untreated, r.n_treated, r.n_units), (9, 6, 3, 3));
}

#[test]
fn baseline_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = baseline_panel(dir.path());
    let tau = dir.path().join("tau.csv");
    let text = stdout(&didimp(&[
        "--input",
        &input,
        "--outcome",
        "outcome",
        "--event-time",
        "event_time",
        "estimate",
        "--estimand",
        "att",
        "--estimand",
        "h0",
        "--pretest",
        "--tau-out",
        tau.to_str().unwrap(),
    ]));
    let r: EstimateReport = serde_json::from_str(&text).unwrap();
    assert_eq!(r.estimates.len(), 2);
    for e in &r.estimates {
        assert!(e.n_h > 0.0 && e.se.is_finite() && e.se > 0.0);
    }
    assert!(r.pretest.is_some());
    let again: EstimateReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again, r);
    let rows = csv_rows(&std::fs::read_to_string(tau).unwrap());
    assert_eq!(rows.len(), r.n_treated);
}

#[test]
fn reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = baseline_panel(dir.path());
    let args = [
        "--input",
        &input,
        "--outcome",
        "outcome",
        "--event-time",
        "event_time",
        "estimate",
        "--pretest",
    ];
    assert_eq!(stdout(&didimp(&args)), stdout(&didimp(&args)));
}

#[test]
fn warnings_use_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Z is treated throughout and dropped; one outcome is missing.
    let text = "unit,time,y,d\nA,1,0,0\nA,2,5,1\nA,3,9,1\nB,1,1,0\nB,2,,0\nB,3,3,0\nC,1,2,0\nC,2,3,0\nC,3,4,1\nZ,1,1,1\nZ,2,1,1\nZ,3,1,1\n";
    let input = write(dir.path(), "p.csv", text);
    let r: EstimateReport = serde_json::from_str(&stdout(&didimp(&[
        "--input",
        &input,
        "--treated",
        "d",
        "estimate",
        "--estimand",
        "h0",
    ])))
    .unwrap();
    let codes: Vec<&str> = r.warnings.iter().map(|w| w.code.as_str()).collect();
    assert!(codes.contains(&"load.dropped_missing_outcome"));
    assert!(codes.contains(&"load.dropped_always_treated"));
    for c in codes {
        assert!(WARNING_CODES.contains(&c), "undocumented warning {c}");
    }
}

#[test]
fn event_study_plot_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = baseline_panel(dir.path());
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"estimands": [{"kind": "horizon", "h": 0}, {"kind": "horizon", "h": 1}, {"kind": "horizon", "h": 2},
            {"kind": "horizon", "h": 3}, {"kind": "horizon", "h": 4}], "pretest": {"leads": 3}}"#,
    );
    let rows = csv_rows(&stdout(&didimp(&[
        "--config",
        &cfg,
        "--input",
        &input,
        "--outcome",
        "outcome",
        "--event-time",
        "event_time",
        "export-plot",
    ])));
    assert_eq!(rows.len(), 8);
    let kinds: Vec<&str> = rows.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(kinds.iter().filter(|&&k| k == "pretrend").count(), 3);
    assert_eq!(kinds.iter().filter(|&&k| k == "effect").count(), 5);
    let times: Vec<i64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(times, [-3, -2, -1, 0, 1, 2, 3, 4]);
}

#[test]
fn null_panel_plots_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("unit,time,y,e\n");
    for i in 0..12 {
        let e = if i % 4 == 3 {
            "never".to_string()
        } else {
            (3 + i % 4).to_string()
        };
        for t in 1..=7 {
            text += &format!("u{i},{t},{},{e}\n", 0.5 * i as f64 - 2.0 * t as f64);
        }
    }
    let input = write(dir.path(), "p.csv", &text);
    let rows = csv_rows(&stdout(&didimp(&[
        "--input",
        &input,
        "--event-time",
        "e",
        "export-plot",
    ])));
    assert!(rows.iter().any(|r| r[3] == "pretrend") && rows.iter().any(|r| r[3] == "effect"));
    for r in rows {
        assert!(r[1].parse::<f64>().unwrap().abs() < 1e-9);
    }
}

#[test]
fn nothing_to_plot() {
    let dir = tempfile::tempdir().unwrap();
    // Every treated cell lacks a counterfactual and no unit has two pre-periods.
    let input = write(
        dir.path(),
        "p.csv",
        "unit,time,y,e\nA,1,0,2\nA,2,1,2\nB,1,0,2\nB,2,3,2\n",
    );
    let o = didimp(&["--input", &input, "--event-time", "e", "export-plot"]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = error_line(&o);
    assert_eq!(err["error"], "cli.nothing_to_plot");
}

#[test]
fn ols_diagnostics_on_two_by_three() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "p.csv", TWO_BY_THREE);
    let s: OlsSummary = serde_json::from_str(&stdout(&didimp(&[
        "--input",
        &input,
        "--treated",
        "d",
        "diagnose-ols",
    ])))
    .unwrap();
    assert!((s.mass_negative + 0.5).abs() < 1e-10);
    assert_eq!(s.negative_cells.len(), 1);
    assert_eq!(
        (s.negative_cells[0].unit.as_str(), s.negative_cells[0].time),
        ("A", 3)
    );
    assert!(s.warnings.iter().any(|w| w.code == "ols.negative_weights"));
}

#[test]
fn large_never_treated_group_has_no_negative_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("unit,time,y,e\n");
    for i in 0..40 {
        let e = match i {
            0..=3 => "2",
            4..=7 => "4",
            _ => "never",
        };
        for t in 1..=5 {
            text += &format!("u{i},{t},{},{e}\n", (i * t % 7) as f64);
        }
    }
    let input = write(dir.path(), "p.csv", &text);
    let s: OlsSummary = serde_json::from_str(&stdout(&didimp(&[
        "--input",
        &input,
        "--event-time",
        "e",
        "diagnose-ols",
    ])))
    .unwrap();
    assert!(s.negative_cells.is_empty());
    assert!(!s.warnings.iter().any(|w| w.code == "ols.negative_weights"));
}

#[test]
fn two_cohorts_without_controls_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("unit,time,y,e\n");
    for (i, e) in [2, 2, 4, 4].iter().enumerate() {
        for t in 1..=7 {
            text += &format!("u{i},{t},{},{e}\n", (i + t) as f64);
        }
    }
    let input = write(dir.path(), "p.csv", &text);
    let weights = dir.path().join("w.csv");
    let s: OlsSummary = serde_json::from_str(&stdout(&didimp(&[
        "--input",
        &input,
        "--event-time",
        "e",
        "diagnose-ols",
        "--weights-out",
        weights.to_str().unwrap(),
    ])))
    .unwrap();
    assert!(s.warnings.iter().any(|w| w.code == "ols.underidentified"));
    assert!(weights.exists());
}

#[test]
fn weights_and_pretest_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "p.csv", THREE_BY_THREE);
    let rows = csv_rows(&stdout(&didimp(&[
        "--input",
        &input,
        "--event-time",
        "e",
        "weights",
        "--estimand",
        "cohort3",
    ])));
    let total: f64 = rows.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
    assert!(total.abs() < 1e-12);
    assert!(rows.iter().any(|r| r[1] == "B" && r[2] == "3" && r[3] == "1"));

    let base = baseline_panel(dir.path());
    let p: serde_json::Value = serde_json::from_str(&stdout(&didimp(&[
        "--input",
        &base,
        "--outcome",
        "outcome",
        "--event-time",
        "event_time",
        "pretest",
        "--leads",
        "2",
        "--cluster",
    ])))
    .unwrap();
    assert_eq!(p["labels"], serde_json::json!(["lead[-2]", "lead[-1]"]));
    assert_eq!(p["mode"], "cluster_wald");
}

#[test]
fn exact_simulation_table() {
    let text = stdout(&didimp(&["simulate", "--exact", "--columns", "baseline"]));
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 15);
    let imp_h0 = rows.iter().find(|r| r[0] == "0" && r[1] == "Imputation").unwrap();
    let v: f64 = imp_h0[3].parse().unwrap();
    assert!((v - 0.0099).abs() < 0.001);
}

#[test]
fn operational_errors_exit_1() {
    let o = didimp(&["--input", "/nonexistent.csv", "--treated", "d", "estimate"]);
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "p.csv", TWO_BY_THREE);
    let o = didimp(&["--input", &input, "--treated", "missing_column", "estimate"]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = error_line(&o);
    assert_eq!(err["error"], "panel.missing_column");
}
