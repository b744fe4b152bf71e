use std::fs;
use std::path::Path;
use std::process::Command;

use changeplane::cli::{read_csv, run, ColumnSpec};
use changeplane::estimator::{fit_binary, fit_continuous, FitOptions};
use changeplane::inference::{coefficient_names, infer_binary, infer_continuous, wald_table};
use changeplane::Bandwidth;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("changeplane").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn continuous_fit_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c.csv");
    let out = dir.path().join("fit");
    let r = cli(&["simulate", "--model", "continuous", "--n", "400", "--seed", "3", "--out", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = cli(&[
        "fit", s(&data), "--model", "continuous", "--response", "y", "--x-cols", "x1,x2", "--q-cols", "q1,q2",
        "--sigma", "0.05", "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let spec = ColumnSpec {
        response: "y".into(),
        x_cols: names(&["x1", "x2"]),
        q_cols: names(&["q1", "q2"]),
        scale: vec![],
    };
    let ds = read_csv(&data, &spec, false).unwrap().continuous().unwrap();
    let fit = fit_continuous(&ds, &Bandwidth::explicit(0.05).unwrap(), &FitOptions::default()).unwrap();
    let inf = infer_continuous(&fit, &ds).unwrap();
    let table = wald_table(&inf, &coefficient_names(&spec.x_cols, &spec.q_cols)).unwrap();
    let mut want = Vec::new();
    table.write_csv(&mut want).unwrap();
    assert_eq!(fs::read(out.join("coefficients.csv")).unwrap(), want);

    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(json["schema"], 1);
    assert_eq!(json["loss"].as_f64().unwrap(), fit.loss);
    assert_eq!(json["converged"].as_bool().unwrap(), fit.converged);
    assert_eq!(json["sigma"].as_f64().unwrap(), 0.05);
    let rows = json["coefficients"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[6]["name"], "psi_q2");
    assert_eq!(rows[6]["estimate"].as_f64().unwrap(), fit.theta.psi_tilde[0]);
}

#[test]
fn binary_fit_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("b.csv");
    let out = dir.path().join("fit");
    assert_eq!(cli(&["simulate", "--model", "binary", "--n", "2000", "--seed", "4", "--out", s(&data)]).code, 0);
    let r = cli(&[
        "fit", s(&data), "--model", "binary", "--response", "y", "--q-cols", "q1,q2,q3", "--sigma-exponent", "0.6",
        "--starts", "4", "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let spec = ColumnSpec {
        response: "y".into(),
        q_cols: names(&["q1", "q2", "q3"]),
        ..ColumnSpec::default()
    };
    let ds = read_csv(&data, &spec, true).unwrap().binary().unwrap();
    let opts = FitOptions {
        n_starts: 4,
        ..FitOptions::default()
    };
    let fit = fit_binary(&ds, &Bandwidth::from_exponent(2000, 0.6).unwrap(), None, &opts).unwrap();
    let table = wald_table(&infer_binary(&fit, &ds).unwrap(), &names(&["psi_q2", "psi_q3"])).unwrap();
    let mut want = Vec::new();
    table.write_csv(&mut want).unwrap();
    assert_eq!(fs::read(out.join("coefficients.csv")).unwrap(), want);
}

#[test]
fn constant_labels_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("b.csv");
    fs::write(&data, "y,q1,q2\n1,0.5,1\n1,-0.3,2\n1,1.2,-1\n1,0.1,0.4\n").unwrap();
    let r = cli(&[
        "fit", s(&data), "--model", "binary", "--response", "y", "--q-cols", "q1,q2", "--sigma", "0.3", "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("uninformative"), "{}", r.stderr);
}

#[test]
fn small_bandwidth_warning_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c.csv");
    let out = dir.path().join("fit");
    assert_eq!(cli(&["simulate", "--model", "continuous", "--n", "100", "--seed", "9", "--out", s(&data)]).code, 0);
    let r = cli(&[
        "fit", s(&data), "--model", "continuous", "--response", "y", "--x-cols", "x1,x2", "--q-cols", "q1,q2",
        "--sigma-exponent", "0.7", "--starts", "4", "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("result.json")).unwrap()).unwrap();
    let warnings: Vec<&str> = json["warnings"].as_array().unwrap().iter().map(|w| w.as_str().unwrap()).collect();
    assert!(warnings.iter().any(|w| w.contains("3.98") && w.contains("< 30")), "{warnings:?}");
}

#[test]
fn dropped_rows_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c.csv");
    assert_eq!(cli(&["simulate", "--model", "continuous", "--n", "200", "--seed", "2", "--out", s(&data)]).code, 0);
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("NA,1,2,3,4\n");
    fs::write(&data, text).unwrap();
    let out = dir.path().join("fit");
    let r = cli(&[
        "fit", s(&data), "--model", "continuous", "--response", "y", "--x-cols", "x1,x2", "--q-cols", "q1,q2",
        "--sigma", "0.1", "--starts", "2", "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(json["n"], 200);
    assert_eq!(json["dropped_rows"], 1);
}

#[test]
fn usage_and_input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("b.csv");
    fs::write(&data, "y,q1,q2\n1,0.5,1\n0,-0.3,2\n").unwrap();
    let o = dir.path().join("o");
    let r = cli(&["fit", s(&data), "--model", "binary", "--response", "y", "--q-cols", "q1,zz", "--sigma", "0.3", "--out", s(&o)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("zz"), "{}", r.stderr);
    let r = cli(&["fit", s(&data), "--model", "binary", "--response", "y", "--q-cols", "q1,q2", "--out", s(&o)]);
    assert_eq!(r.code, 1);
    let r = cli(&[
        "fit", s(&data), "--model", "binary", "--response", "y", "--x-cols", "q1", "--q-cols", "q2", "--sigma", "0.3",
        "--out", s(&o),
    ]);
    assert_eq!(r.code, 1);
    let r = cli(&["fit", s(&dir.path().join("missing.csv")), "--model", "binary", "--response", "y", "--q-cols", "q1,q2", "--sigma", "0.3"]);
    assert_eq!(r.code, 1);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        assert_eq!(cli(&["simulate", "--model", "binary", "--n", "10", "--seed", "1", "--out", s(p)]).code, 0);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 11);
    assert_eq!(text.lines().next().unwrap(), "y,q1,q2,q3");
}

#[test]
fn mc_emits_quantile_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("mc.json");
    fs::write(
        &config,
        r#"{"model": "binary", "n": 5000, "d": 3,
            "true_params": {"psi_tilde": [0.5, -0.5], "alpha0": 0.25, "beta0": 0.75},
            "bandwidth": {"exponent": 0.7}, "reps": 100, "seed": 1,
            "fit": {"n_starts": 4}}"#,
    )
    .unwrap();
    let out = dir.path().join("mc");
    let r = cli(&["mc", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let qq = fs::read_to_string(out.join("qq_2.csv")).unwrap();
    let mut lines = qq.lines();
    assert_eq!(lines.next().unwrap(), "theoretical,empirical");
    assert_eq!(lines.count(), 100);
    assert!(out.join("qq_3.csv").exists());
    assert!(out.join("summary.json").exists());
    assert!(out.join("estimates.csv").exists());
}

#[test]
fn rate_check_reports_predicted_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("rate.json");
    fs::write(
        &config,
        r#"{"model": "binary", "n": 2000, "d": 2,
            "true_params": {"psi_tilde": [0.5], "alpha0": 0.25, "beta0": 0.75},
            "bandwidth": {"exponent": 0.7}, "reps": 4, "seed": 2,
            "fit": {"n_starts": 2}}"#,
    )
    .unwrap();
    let out = dir.path().join("rate");
    let r = cli(&["rate-check", "--config", s(&config), "--n-a", "2000", "--n-b", "8000", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let table = fs::read_to_string(out.join("rate.csv")).unwrap();
    assert!(table.contains(",3.249"), "{table}");
    assert!(r.stdout.contains(",3.249"), "{}", r.stdout);
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(
        &config,
        r#"{"model": "binary", "n": 500, "d": 2,
            "true_params": {"psi_tilde": [0.5], "alpha0": "low", "beta0": 0.75},
            "bandwidth": {"exponent": 0.7}, "reps": 4}"#,
    )
    .unwrap();
    let r = cli(&["mc", "--config", s(&config), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("true_params.alpha0"), "{}", r.stderr);

    fs::write(&config, r#"{"n_starts": 0}"#).unwrap();
    fs::write(dir.path().join("d.csv"), "y,q1,q2\n1,0.5,1\n0,-0.3,2\n").unwrap();
    let r = cli(&[
        "fit", s(&dir.path().join("d.csv")), "--model", "binary", "--response", "y", "--q-cols", "q1,q2", "--sigma",
        "0.3", "--config", s(&config),
    ]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("n_starts"), "{}", r.stderr);
}

#[test]
fn oracle_prints_exact_minimizer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c.csv");
    assert_eq!(cli(&["simulate", "--model", "continuous", "--n", "60", "--seed", "5", "--out", s(&data)]).code, 0);
    let r = cli(&["oracle", s(&data), "--model", "continuous", "--response", "y", "--x-cols", "x1,x2", "--q-cols", "q1,q2"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert!(v["loss"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["beta"].as_array().unwrap().len(), 2);
    assert!((v["psi_tilde"].as_f64().unwrap() - 0.5).abs() < 0.2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_changeplane");
    let status = Command::new(bin).arg("--version").output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    let status = Command::new(bin).arg("frobnicate").output().unwrap().status;
    assert_eq!(status.code(), Some(1));
}
