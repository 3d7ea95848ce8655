mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;

const BIN: &str = env!("CARGO_BIN_EXE_transport-mi");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_owned(args: &[String]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_STUDY: &str = r#"{
  "scenario": {"n_target": 1500, "alpha": [-3.2, 1, 1, 1]},
  "n_sim": 5,
  "m_rule": {"explicit": 2},
  "maxit": 2
}"#;

#[test]
fn simulate_default_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pop.csv");
    let o = run(&["simulate", "--out", p(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "X1,X2,X3,S,A,Y");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10_000);
    let trial = rows.iter().filter(|l| l.split(',').nth(3) == Some("1.0")).count();
    assert!((350..=650).contains(&trial), "trial size {trial}");
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary.get("true_pate_s0").is_some(), "{summary}");
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    for (f, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        assert!(run(&["simulate", "--out", p(f), "--seed", seed]).status.success());
    }
    let read = |f: &Path| std::fs::read(f).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"n_target": "many"}"#).unwrap();
    let o = run(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_target"), "{}", stderr(&o));

    std::fs::write(&cfg, r#"{"n_sims": 3}"#).unwrap();
    let o = run(&["study", "--config", p(&cfg), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_sims"), "{}", stderr(&o));

    std::fs::write(&cfg, "{not json").unwrap();
    let o = run(&["study", "--config", p(&cfg), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn study_smoke_writes_all_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    std::fs::write(&cfg, SMALL_STUDY).unwrap();
    let out = dir.path().join("out");
    let o = run(&["study", "--config", p(&cfg), "--out-dir", p(&out), "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,missing_trial,bias,bias_mcse,emp_se,emp_se_mcse,avg_robust_se,mse,mse_mcse,n_completed,n_failed"
    );
    assert_eq!(lines.count(), 17);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 17);
    assert!(out.join("replicates.csv").exists());
}

#[test]
fn m1a_requires_zero_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    std::fs::write(&cfg, r#"{"trial_fractions": [0.1], "methods": ["M1A"]}"#).unwrap();
    let o = run(&["study", "--config", p(&cfg), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("M1A requires fully observed trial"), "{}", stderr(&o));
}

#[test]
fn apply_without_bootstrap_notes_it() {
    let dir = tempfile::tempdir().unwrap();
    let pop = with_mar(population(&small_scenario(1_500, 31)), 0.1);
    let (trial, target) = write_pair(&pop, dir.path());
    let report = dir.path().join("report.json");
    let mut args: Vec<String> = ["apply", "--trial", p(&trial), "--target", p(&target), "--m", "3", "--B", "0", "--seed", "4"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.extend(role_args());
    args.extend(["--out".to_string(), p(&report).to_string()]);
    let o = run_owned(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(r["estimate"].as_f64().unwrap().is_finite());
    assert_eq!(r["per_dataset"].as_array().unwrap().len(), 3);
    assert!(r["notes"].to_string().contains("bootstrap skipped"), "{r}");
}

#[test]
fn apply_rejects_m1a_with_incomplete_trial() {
    let dir = tempfile::tempdir().unwrap();
    let pop = with_mar(population(&small_scenario(1_500, 32)), 0.1);
    let (trial, target) = write_pair(&pop, dir.path());
    let mut args: Vec<String> = ["apply", "--trial", p(&trial), "--target", p(&target), "--method", "m1a", "--B", "0"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.extend(role_args());
    let o = run_owned(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("M1A"), "{}", stderr(&o));
}

#[test]
fn apply_unknown_role_column_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(&small_scenario(800, 33));
    let (trial, target) = write_pair(&pop, dir.path());
    let o = run(&[
        "apply", "--trial", p(&trial), "--target", p(&target), "--role", "X9=covariate", "--role", "A=treatment",
        "--role", "Y=outcome", "--B", "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("X9"), "{}", stderr(&o));
}

fn diagnose(trial: &Path, target: &Path, out: &Path) -> Output {
    run(&[
        "diagnose", "--trial", p(trial), "--target", p(target), "--out-dir", p(out), "--role", "X1=covariate",
        "--role", "X2=covariate", "--role", "X3=covariate",
    ])
}

#[test]
fn diagnose_identical_samples_overlap_fully() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(&small_scenario(1_000, 34));
    let flags = pop.trial_flags().unwrap();
    let rows: Vec<usize> = (0..pop.n_rows()).filter(|&r| !flags[r]).take(300).collect();
    let x = pop.select_rows(&rows).drop_column("S").unwrap().drop_column("A").unwrap().drop_column("Y").unwrap();
    let f = dir.path().join("same.csv");
    x.write_csv_path(&f).unwrap();
    let out = dir.path().join("diag");
    let o = diagnose(&f, &f, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("balance.json")).unwrap()).unwrap();
    assert!(b["tipton_index"].as_f64().unwrap() >= 0.99, "{b}");
    let hist = std::fs::read_to_string(out.join("ps_histogram.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "bin_lower,bin_upper,trial_count,target_count,trial_frac,target_frac");
    assert_eq!(hist.lines().count(), 21);
}

#[test]
fn diagnose_disjoint_samples_warn() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(&small_scenario(1_000, 35));
    let x1 = pop.column("X1").unwrap().values();
    let lo: Vec<usize> = (0..pop.n_rows()).filter(|&r| x1[r] < -0.5).collect();
    let hi: Vec<usize> = (0..pop.n_rows()).filter(|&r| x1[r] > 0.5).collect();
    let strip = |rows: &[usize], name: &str| {
        let d = pop.select_rows(rows).drop_column("S").unwrap().drop_column("A").unwrap().drop_column("Y").unwrap();
        let f = dir.path().join(name);
        d.write_csv_path(&f).unwrap();
        f
    };
    let a = strip(&lo, "lo.csv");
    let b = strip(&hi, "hi.csv");
    let o = diagnose(&a, &b, &dir.path().join("diag"));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("warning"), "{text}");
}
