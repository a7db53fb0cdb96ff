use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gmfm::evalsim::{ccor, simulate_case, SimCase, SimulationSpec};
use gmfm::io::{read_bundle, read_json, FitFile, TruthFile};
use gmfm::selection::CRITERION_HEADER;
use gmfm::model::total_loglik;
use serde_json::Value;
use tempfile::TempDir;

fn gmfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmfm"))
        .args(args)
        .env_remove("GMFM_JOBS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(dir: &Path, case: &str, p1: usize, p2: usize, t: usize, seed: u64) {
    let o = gmfm(&[
        "simulate",
        "--case",
        case,
        "--p1",
        &p1.to_string(),
        "--p2",
        &p2.to_string(),
        "--T",
        &t.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_writes_the_generated_data() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("b");
    simulate(&dir, "4", 6, 5, 4, 9);
    let bundle = read_bundle(&dir).unwrap();
    let sim = simulate_case(&SimulationSpec::new(SimCase::Case4, 6, 5, 4, 9)).unwrap();
    assert_eq!(bundle.data.families(), sim.data.families());
    let n = sim.data.series().len();
    for idx in 0..n {
        assert_eq!(bundle.data.is_observed(idx), sim.data.is_observed(idx));
        if sim.data.is_observed(idx) {
            assert_eq!(bundle.data.value(idx), sim.data.value(idx));
        }
    }

    let truth: TruthFile = read_json(&dir.join("truth.json")).unwrap();
    let theta = truth.params.to_params().unwrap();
    assert!((ccor(&theta.r, &sim.truth.r).unwrap() - 1.0).abs() <= 1e-12);
    assert!((ccor(&theta.c, &sim.truth.c).unwrap() - 1.0).abs() <= 1e-12);

    let header = fs::read_to_string(dir.join("data.csv")).unwrap();
    assert!(header.starts_with("t,i,j,x\n"));
}

#[test]
fn fit_and_report_round_trip() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("b");
    simulate(&dir, "1", 12, 10, 15, 3);
    let fit_path = tmp.path().join("fit.json");
    let o = gmfm(&[
        "fit",
        "--data",
        dir.to_str().unwrap(),
        "--k1",
        "2",
        "--k2",
        "2",
        "--with-se",
        "--restarts",
        "2",
        "--out",
        fit_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("loglik="));

    let file: FitFile = read_json(&fit_path).unwrap();
    assert_eq!((file.k1, file.k2), (2, 2));
    assert!(file.variances.is_some());
    let bundle = read_bundle(&dir).unwrap();
    let again = total_loglik(&bundle.data, &file.theta().unwrap()).unwrap();
    assert!((again - file.report.loglik).abs() <= 1e-8 * file.report.loglik.abs().max(1.0));

    let raw: Value = serde_json::from_str(&fs::read_to_string(&fit_path).unwrap()).unwrap();
    assert_eq!(raw["R"].as_array().unwrap().len(), 12);
    assert_eq!(raw["C"].as_array().unwrap().len(), 10);
    assert_eq!(raw["F"].as_array().unwrap().len(), 15);

    let o = gmfm(&[
        "report",
        "--fit",
        fit_path.to_str().unwrap(),
        "--data",
        dir.to_str().unwrap(),
        "--truth",
        dir.join("truth.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let recomputed = summary["loglik_recomputed"].as_f64().unwrap();
    assert!((recomputed - file.report.loglik).abs() <= 1e-8 * recomputed.abs().max(1.0));
    assert!(summary["ccorR"].as_f64().unwrap() > 0.5);
}

#[test]
fn mm_solver_is_selectable() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("b");
    simulate(&dir, "1", 8, 8, 10, 5);
    let fit_path = tmp.path().join("fit.json");
    let o = gmfm(&[
        "fit", "--data", dir.to_str().unwrap(), "--k1", "1", "--k2", "1", "--algo", "mm", "--restarts", "1",
        "--out", fit_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let file: FitFile = read_json(&fit_path).unwrap();
    assert!(file.variances.is_none());
}

#[test]
fn select_prints_the_pair_and_table() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("b");
    simulate(&dir, "1", 20, 20, 30, 1);
    let table = tmp.path().join("criterion.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_gmfm"))
        .args([
            "select", "--data", dir.to_str().unwrap(), "--l1-max", "3", "--l2-max", "3", "--warm-grid", "--restarts",
            "1", "--out", table.to_str().unwrap(),
        ])
        .env("GMFM_JOBS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "k1=2 k2=2");
    let text = fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CRITERION_HEADER));
    assert_eq!(lines.count(), 9);
}

#[test]
fn bench_emits_one_row_per_method_and_rep() {
    let o = gmfm(&["bench", "--cases", "1,3", "--p1", "8", "--p2", "8", "--T", "10", "--reps", "2", "--restarts", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("case,p1,p2,T,rep,method,ccorR,ccorC,seconds"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 9);
        let r: f64 = fields[6].parse().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn validate_reports_rolling_scores() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("b");
    simulate(&dir, "1", 8, 8, 24, 2);
    for extra in [&["--baseline"][..], &["--restarts", "1"][..]] {
        let mut args = vec!["validate", "--data", dir.to_str().unwrap(), "--window", "3", "--period-len", "4", "--k", "2"];
        args.extend_from_slice(extra);
        let o = gmfm(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let res: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(res["periods"].as_array().unwrap().len(), 3);
        let rho = res["rho_bar"].as_f64().unwrap();
        assert!(rho.is_finite() && rho >= 0.0);
    }
}

#[test]
fn input_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nothing");
    let o = gmfm(&["fit", "--data", missing.to_str().unwrap(), "--k1", "1", "--k2", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let dir = tmp.path().join("bad");
    fs::create_dir(&dir).unwrap();
    fs::write(dir.join("meta.json"), r#"{"p1":2,"p2":2,"T":1,"family":"poisson"}"#).unwrap();
    fs::write(dir.join("data.csv"), "t,i,j,x\n1,1,1,1\n1,1,2,-3\n1,2,1,0\n1,2,2,2\n").unwrap();
    let o = gmfm(&["fit", "--data", dir.to_str().unwrap(), "--k1", "1", "--k2", "1"]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.join("data.csv"), "t,i,j,x\n1,3,1,1\n").unwrap();
    let o = gmfm(&["fit", "--data", dir.to_str().unwrap(), "--k1", "1", "--k2", "1"]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(gmfm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gmfm(&["simulate", "--case", "9", "--p1", "4", "--p2", "4", "--T", "3", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn degenerate_fit_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("zeros");
    fs::create_dir(&dir).unwrap();
    fs::write(dir.join("meta.json"), r#"{"p1":3,"p2":3,"T":2,"family":"gaussian"}"#).unwrap();
    let mut csv = String::from("t,i,j,x\n");
    for t in 1..=2 {
        for i in 1..=3 {
            for j in 1..=3 {
                csv.push_str(&format!("{t},{i},{j},0\n"));
            }
        }
    }
    fs::write(dir.join("data.csv"), csv).unwrap();
    let o = gmfm(&["fit", "--data", dir.to_str().unwrap(), "--k1", "1", "--k2", "1", "--out", tmp.path().join("f.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
