use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdeplus::pdeplus::PdePlusModel;
use serde_json::Value;

fn pdeplus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdeplus"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = pdeplus(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    pdeplus(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate(dir: &Path, example: &str, n: &str, seed: &str) -> PathBuf {
    let out = dir.join(format!("sim-{example}-{n}-{seed}"));
    ok(&["simulate", "--example", example, "--n", n, "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn simulate_writes_one_row_per_location_and_time() {
    let dir = tempfile::tempdir().unwrap();
    let ex1 = simulate(dir.path(), "1", "100", "7");
    assert_eq!(line_count(&ex1.join("data.csv")), 100 * 20 + 1);
    let ex2 = simulate(dir.path(), "2", "150", "1");
    assert_eq!(line_count(&ex2.join("data.csv")), 150 * 20 + 1);
    let truth = json(&ex2.join("truth.json"));
    assert_eq!(truth["example"], "ProductSum");
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["simulate", "--example", "2", "--n", "40", "--seed", "3", "--out", s(out)]);
    }
    for file in ["data.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn fit_writes_model_diagnostics_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "1", "60", "2");
    let fit = dir.path().join("fit");
    ok(&[
        "fit",
        "--data",
        s(&sim.join("data.csv")),
        "--truth",
        s(&sim.join("truth.json")),
        "--example",
        "1",
        "--out",
        s(&fit),
    ]);
    let diag = json(&fit.join("diagnostics.json"));
    let basis = diag["basis"].as_array().unwrap();
    assert_eq!(basis.len(), 2);
    assert!(basis.iter().all(|b| b.as_array().unwrap().len() == 20));
    assert_eq!(diag["cos_vs_truth"].as_array().unwrap().len(), 2);
    assert!(!diag["passes"][0]["eigenvalue_profiles"].as_array().unwrap().is_empty());
    assert!(diag["passes"][0]["iterations"].as_u64().unwrap() >= 1);
    for j in 1..=2 {
        assert_eq!(line_count(&fit.join(format!("basis_{j}.csv"))), 21);
        assert_eq!(line_count(&fit.join(format!("index_{j}.csv"))), 61);
    }
    let model = json(&fit.join("model.json"));
    assert_eq!(model["times"].as_array().unwrap().len(), 20);
}

#[test]
fn kappa_flag_gives_one_series() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "1", "50", "4");
    let fit = dir.path().join("fit");
    ok(&["fit", "--data", s(&sim.join("data.csv")), "--kappa", "1", "--out", s(&fit)]);
    let diag = json(&fit.join("diagnostics.json"));
    assert_eq!(diag["kappa"], 1);
    assert_eq!(diag["basis"].as_array().unwrap().len(), 1);
    assert!(fit.join("basis_1.csv").exists());
    assert!(!fit.join("basis_2.csv").exists());
}

#[test]
fn predict_reads_the_fitted_model() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "1", "50", "5");
    let fit = dir.path().join("fit");
    ok(&["fit", "--data", s(&sim.join("data.csv")), "--example", "1", "--out", s(&fit)]);
    let queries = dir.path().join("queries.csv");
    fs::write(&queries, "id,s1,s2,t\na,0.1,0.2,3\nb,-0.5,0.5,20\na,0.1,0.2,4\n").unwrap();
    let pred = dir.path().join("pred");
    ok(&["predict", "--model", s(&fit.join("model.json")), "--queries", s(&queries), "--out", s(&pred)]);

    let text = fs::read_to_string(pred.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,s1,s2,t,z"));
    let z: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();

    let model = PdePlusModel::from_json(&fs::read_to_string(fit.join("model.json")).unwrap()).unwrap();
    let locs = nalgebra::DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.5, 0.5, 0.1, 0.2]);
    let direct = model.predict_points(&locs, &[3.0, 20.0, 4.0]).unwrap();
    assert_eq!(z, direct);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "1", "50", "6");
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"example": 1}"#).unwrap();
    let fit = dir.path().join("fit");
    ok(&[
        "fit",
        "--data",
        s(&sim.join("data.csv")),
        "--config",
        s(&config),
        "--h-x",
        "0.7",
        "--knn",
        "2",
        "--out",
        s(&fit),
    ]);
    let diag = json(&fit.join("diagnostics.json"));
    assert_eq!(diag["config"]["pde"]["h_x"], 0.7);
    assert_eq!(diag["config"]["pde"]["h_y"], 3.0);
    assert_eq!(diag["config"]["knn"], 2);
}

/// Synthetic data shaped like a year of daily records at 35 stations.
fn station_year(path: &Path) {
    let mut text = String::from("id,s1,s2,t,y\n");
    for i in 0..35 {
        let lon = -130.0 + 75.0 * ((i * 11 % 35) as f64 / 35.0);
        let lat = 43.0 + 27.0 * ((i * 23 % 35) as f64 / 35.0);
        for t in 1..=365 {
            let phase = 2.0 * std::f64::consts::PI * t as f64 / 365.0;
            let wobble = ((i * 365 + t) as f64 * 12.9898).sin() * 0.5;
            let y = -0.8 * (lat - 55.0) * (phase - 3.4).cos() + 0.05 * (lon + 90.0) * phase.sin() - 0.3 * lat + wobble;
            writeln!(text, "st{i},{lon},{lat},{t},{y}").unwrap();
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn station_year_shape_fits() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    station_year(&data);
    let fit = dir.path().join("fit");
    ok(&["fit", "--data", s(&data), "--out", s(&fit)]);
    let model = json(&fit.join("model.json"));
    assert_eq!(model["times"].as_array().unwrap().len(), 365);
    assert_eq!(model["learn_ids"].as_array().unwrap().len(), 35);
}

#[test]
fn benchmark_with_one_replicate_has_no_spread() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&["benchmark", "--example", "1", "--n", "40", "--replicates", "1", "--seed", "2", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("benchmark.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[2], "");
        assert_eq!(cells[4], "");
    }
    let table = fs::read_to_string(out.join("benchmark.txt")).unwrap();
    assert!(table.contains("PDE+") && table.contains("naive") && table.contains("kriging"));
    assert!(table.contains("NA"));
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&["fit", "--data", s(&missing), "--out", s(&out)]), 1);

    let malformed = dir.path().join("bad.csv");
    fs::write(&malformed, "id,s1,s2,t,y\n0,0,0,1,x\n").unwrap();
    assert_eq!(code(&["fit", "--data", s(&malformed), "--out", s(&out)]), 1);

    let sim = simulate(dir.path(), "1", "30", "1");
    let data = sim.join("data.csv");
    assert_eq!(code(&["fit", "--data", s(&data), "--h-y", "-1", "--out", s(&out)]), 2);
    assert_eq!(code(&["fit", "--data", s(&data), "--kappa", "0", "--out", s(&out)]), 2);

    let mut flat = String::from("id,s1,s2,t,y\n");
    for i in 0..30 {
        let (a, b) = ((i as f64 * 0.37).sin(), (i as f64 * 0.91).cos());
        for t in 1..=10 {
            writeln!(flat, "{i},{a},{b},{t},2.5").unwrap();
        }
    }
    let flat_path = dir.path().join("flat.csv");
    fs::write(&flat_path, flat).unwrap();
    assert_eq!(code(&["fit", "--data", s(&flat_path), "--out", s(&out)]), 3);
}
