use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfg_core::analyze::{certify_stability, CertifyOptions};
use mfg_core::fem::{FemSpace, Field};
use mfg_core::mfg::{Coupling, Density, Problem, State};
use mfg_core::solve::{newton_solve, residual_norm, SolverOptions};
use serde_json::{json, Value};
use tempfile::TempDir;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config_path(name: &str) -> PathBuf {
    root().join("configs").join(name)
}

fn run(config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg-stable"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

/// Runs a config given as JSON and returns the output directory and process output.
fn run_json(cfg: &Value) -> (TempDir, Output) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = run(&path, &dir.path().join("out"));
    (dir, out)
}

fn run_named(name: &str) -> (TempDir, Output) {
    let dir = TempDir::new().unwrap();
    let out = run(&config_path(name), &dir.path().join("out"));
    assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    (dir, out)
}

fn summary(dir: &TempDir) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap()
}

fn table(dir: &TempDir, name: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(dir.path().join("out").join(name)).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<Option<f64>> {
    let i = header.iter().position(|h| h == name).unwrap();
    rows.iter()
        .map(|r| if r[i] == "NA" { None } else { Some(r[i].parse().unwrap()) })
        .collect()
}

fn base(experiment: &str) -> Value {
    json!({
        "experiment": experiment,
        "dim": 1,
        "n": 32,
        "lambda": 1.0,
        "coupling": { "family": "atan", "scale": 1.0 },
        "m0": { "family": "cosine", "amplitude": 0.5 }
    })
}

fn schema(name: &str) -> jsonschema::Validator {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("schema").join(name)).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

#[test]
fn zero_coupling_solve_is_trivial_and_stable() {
    let (dir, _) = run_named("trivial_solve.json");
    let s = summary(&dir);
    assert!(s["residual"].as_f64().unwrap() < 1e-13);
    assert!((s["mass"].as_f64().unwrap() - 1.0).abs() < 1e-13);
    assert_eq!(s["stability"]["stable"], json!(true));
    let (header, rows) = table(&dir, "fields_u.csv");
    assert_eq!(header, ["x", "y", "u"]);
    assert_eq!(rows.len(), 32 * 32);
}

fn assert_close(path: &str, a: &Value, b: &Value) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}");
            for (k, v) in x {
                assert_close(&format!("{path}.{k}"), v, &y[k]);
            }
        }
        (Value::Number(x), Value::Number(y)) if x.is_f64() || y.is_f64() => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-5), "{path}: {x} vs {y}");
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

#[test]
fn atan_solve_matches_golden_summary() {
    let (dir, _) = run_named("atan_solve.json");
    let golden: Value = serde_json::from_str(
        &fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/atan_solve.summary.json"))
            .unwrap(),
    )
    .unwrap();
    assert_close("summary", &summary(&dir), &golden);
}

#[test]
fn atan_solve_matches_direct_library_calls() {
    let (dir, _) = run_named("atan_solve.json");
    let s = summary(&dir);
    let space = FemSpace::build(1, 64).unwrap();
    let m0 = Density::Cosine { amplitude: 0.5, phase: 0.0 }.project(&space).unwrap();
    let p = Problem::new(space.clone(), 1.0, m0.clone(), Coupling::Atan { scale: 1.0 }).unwrap();
    let start = State::new(Field::zeros(space.node_count()), m0);
    let (x, report) = newton_solve(&p, &start, &SolverOptions::newton()).unwrap();
    let cert = certify_stability(&p, &x, &CertifyOptions::default()).unwrap();
    assert_eq!(s["iterations"], json!(report.iterations));
    assert_eq!(s["residual"].as_f64().unwrap(), residual_norm(&p, &x).unwrap());
    assert_eq!(s["u_sup"].as_f64().unwrap(), x.u.sup_norm());
    assert_eq!(s["stability"]["sigma_min"].as_f64().unwrap(), cert.sigma_min);
    let (header, rows) = table(&dir, "fields_m.csv");
    let m = column(&header, &rows, "m");
    assert!(m.iter().zip(x.m.coeffs()).all(|(a, b)| a.unwrap() == *b));
}

#[test]
fn malformed_amplitude_exits_with_validation_code() {
    let mut cfg = base("solve");
    cfg["m0"]["amplitude"] = json!(1.5);
    let (_, out) = run_json(&cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m0.amplitude"));
}

#[test]
fn unknown_fields_and_missing_files_are_rejected() {
    let mut cfg = base("solve");
    cfg["lamda"] = json!(1.0);
    let (_, out) = run_json(&cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
    let dir = TempDir::new().unwrap();
    let out = run(&dir.path().join("missing.json"), dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solver_failure_exits_with_solver_code() {
    let mut cfg = base("solve");
    cfg["solver"] = json!({ "max_iter": 1 });
    let (_, out) = run_json(&cfg);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_iterations"));
}

#[test]
fn identical_configs_give_identical_files() {
    for name in ["atan_solve.json", "stability_neg_atan.json", "sensitivity_measure.json"] {
        let (a, _) = run_named(name);
        let (b, _) = run_named(name);
        let mut files: Vec<_> = fs::read_dir(a.path().join("out")).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        assert!(files.len() >= 2);
        for f in files {
            let x = fs::read(a.path().join("out").join(&f)).unwrap();
            let y = fs::read(b.path().join("out").join(&f)).unwrap();
            assert!(x == y, "{name}: {f:?} differs");
        }
    }
}

#[test]
fn shipped_configs_and_summaries_follow_the_schemas() {
    let config_schema = schema("config.schema.json");
    let summary_schema = schema("summary.schema.json");
    let mut names: Vec<String> = fs::read_dir(root().join("configs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    assert!(names.len() >= 10);
    for name in &names {
        let cfg: Value = serde_json::from_str(&fs::read_to_string(config_path(name)).unwrap()).unwrap();
        assert!(config_schema.is_valid(&cfg), "{name}");
        if name.starts_with("converge_atan_2d") {
            continue;
        }
        let (dir, _) = run_named(name);
        let s = summary(&dir);
        let errors: Vec<String> = summary_schema.iter_errors(&s).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name}: {errors:?}");
    }
    let mut bad = base("solve");
    bad["m0"]["amplitude"] = json!(1.5);
    assert!(!config_schema.is_valid(&bad));
}

#[test]
fn sensitivity_is_refused_at_uncertified_solutions() {
    let mut cfg = base("sensitivity");
    cfg["stability_threshold"] = json!(1e6);
    let (dir, out) = run_json(&cfg);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refused"));
    assert!(!dir.path().join("out/taylor_errors.csv").exists());
}

#[test]
fn null_perturbation_has_zero_remainders() {
    let (dir, out) = run_json(&base("sensitivity"));
    assert!(out.status.success());
    let (header, rows) = table(&dir, "taylor_errors.csv");
    assert!(column(&header, &rows, "remainder").iter().all(|r| *r == Some(0.0)));
    assert_eq!(summary(&dir)["observed_order"], Value::Null);
}

#[test]
fn measure_perturbation_is_second_order() {
    let (dir, _) = run_named("sensitivity_measure.json");
    assert!(summary(&dir)["observed_order"].as_f64().unwrap() >= 1.8);
}

#[test]
fn zero_coupling_study_is_exact_with_na_rates() {
    let mut cfg = base("converge");
    cfg["coupling"] = json!({ "family": "zero" });
    cfg["m0"] = json!({ "family": "uniform" });
    cfg["n_list"] = json!([4, 8, 16]);
    cfg["reference_n"] = json!(128);
    let (dir, out) = run_json(&cfg);
    assert!(out.status.success());
    let (header, rows) = table(&dir, "converge.csv");
    for name in ["n", "h", "err_u_H1", "err_m_L2", "rate_u", "rate_m"] {
        assert!(header.iter().any(|h| h == name), "missing column {name}");
    }
    for name in ["err_u_H1", "err_m_L2"] {
        assert!(column(&header, &rows, name).iter().all(|e| e.unwrap() <= 1e-13));
    }
    for name in ["rate_u", "rate_m"] {
        assert!(column(&header, &rows, name).iter().all(Option::is_none));
    }
}

#[test]
fn atan_study_rates_reach_one() {
    let (dir, _) = run_named("converge_atan_1d.json");
    let (header, rows) = table(&dir, "converge.csv");
    assert_eq!(rows.len(), 4);
    for name in ["rate_u", "rate_m"] {
        assert!(column(&header, &rows, name)[3].unwrap() >= 1.0);
    }
}

#[test]
fn manufactured_study_has_textbook_rates() {
    let (dir, _) = run_named("converge_manufactured.json");
    let (header, rows) = table(&dir, "converge.csv");
    let last = |name| column(&header, &rows, name)[rows.len() - 1].unwrap();
    assert!((last("rate_u") - 1.0).abs() < 0.05);
    assert!((last("rate_u_L2") - 2.0).abs() < 0.1);
    assert!((last("rate_m") - 2.0).abs() < 0.1);
    assert_eq!(summary(&dir)["reference"], json!("manufactured"));
}

#[test]
fn trivial_newton_rates_have_one_row() {
    let mut cfg = base("newton-rates");
    cfg["coupling"] = json!({ "family": "zero" });
    cfg["m0"] = json!({ "family": "uniform" });
    let (dir, _) = run_json(&cfg);
    let (header, rows) = table(&dir, "newton_rates.csv");
    assert_eq!(rows.len(), 1);
    assert!(column(&header, &rows, "residual")[0].unwrap() < 1e-13);
}

#[test]
fn newton_is_quadratic_and_picard_linear() {
    let (dir, _) = run_named("newton_rates.json");
    let (header, rows) = table(&dir, "newton_rates.csv");
    let quad: Vec<f64> = column(&header, &rows, "quad_ratio").into_iter().flatten().collect();
    let tail = &quad[quad.len() - 3..];
    let (lo, hi) = tail.iter().fold((f64::MAX, 0.0f64), |(l, h), &q| (l.min(q), h.max(q)));
    assert!(hi / lo <= 100.0, "{tail:?}");

    let (dir, _) = run_named("picard_rates.json");
    let (header, rows) = table(&dir, "newton_rates.csv");
    let rates: Vec<f64> = column(&header, &rows, "rate").into_iter().flatten().collect();
    assert!(rates.len() > 10);
    // geometric decay: a contraction factor that settles to a constant below one
    let settled = &rates[..rates.len() / 2];
    assert!(settled.iter().all(|&r| r > 0.1 && r < 0.9));
    let spread = settled.iter().cloned().fold(0.0f64, f64::max) - settled.iter().cloned().fold(1.0f64, f64::min);
    assert!(spread < 0.05, "{settled:?}");
}

#[test]
fn stability_sweeps_report_every_lambda() {
    let (dir, _) = run_named("stability_monotone.json");
    let (header, rows) = table(&dir, "stability_sweep.csv");
    assert_eq!(rows.len(), 4);
    let stable = header.iter().position(|h| h == "stable").unwrap();
    assert!(rows.iter().all(|r| r[stable] == "true"));

    let (dir, _) = run_named("stability_neg_atan.json");
    let (header, rows) = table(&dir, "stability_sweep.csv");
    let (large, stable) = (
        header.iter().position(|h| h == "large_lambda").unwrap(),
        header.iter().position(|h| h == "stable").unwrap(),
    );
    assert!(rows.iter().any(|r| r[large] == "false"));
    assert!(rows.iter().filter(|r| r[large] == "true").count() >= 2);
    assert!(rows.iter().filter(|r| r[large] == "true").all(|r| r[stable] == "true"));
}

#[test]
fn sweep_records_failures_and_continues() {
    let mut cfg = base("stability-sweep");
    cfg["lambda_list"] = json!([2.0, 1.0]);
    cfg["solver"] = json!({ "max_iter": 2 });
    let (dir, out) = run_json(&cfg);
    assert!(out.status.success());
    let (header, rows) = table(&dir, "stability_sweep.csv");
    assert_eq!(column(&header, &rows, "lambda"), vec![Some(1.0), Some(2.0)]);
    let status = header.iter().position(|h| h == "status").unwrap();
    assert!(rows.iter().any(|r| r[status] == "max_iterations"));
}

#[test]
fn empty_lambda_list_is_a_validation_error() {
    let mut cfg = base("stability-sweep");
    cfg["lambda_list"] = json!([]);
    let (_, out) = run_json(&cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_list"));
}
