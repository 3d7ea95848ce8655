//! Acceptance criteria. Each test writes one `ACCEPTANCE <n> PASS|FAIL` line
//! and fails when its criterion is not met. Criteria 1-6 share one run of the
//! default 200-replicate study.

mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use common::*;
use transport_mi::datagen::{make_superpopulation, ScenarioConfig};
use transport_mi::diagnostics::tipton_index;
use transport_mi::glm::{fit_logistic, fit_wls, DesignMatrix};
use transport_mi::ipsw::{compute_weights, estimate_pate, WeightScheme};
use transport_mi::mice::{self, impute, pmm_impute_with, ModelKind, MRule, ParamDraw, SpecOptions};
use transport_mi::missingness::{induce_mar, MarSpec};
use transport_mi::study::{performance_metrics, run_study, CellResult, StudyConfig, StudyMethod, StudyResult};

const BIN: &str = env!("CARGO_BIN_EXE_transport-mi");
const MASTER_SEED: u64 = 20240601;
const LEVELS: [f64; 3] = [0.0, 0.10, 0.30];

fn study() -> &'static StudyResult {
    static RESULT: OnceLock<StudyResult> = OnceLock::new();
    RESULT.get_or_init(|| {
        let cfg = StudyConfig {
            master_seed: MASTER_SEED,
            ..Default::default()
        };
        assert_eq!(cfg.n_sim, 200);
        let r = run_study(&cfg, None).expect("study runs");
        let e = &r.estimands;
        emit(format!(
            "study: truth {:.4} mean PATE(S=0) {:.4} mean TATE {:.4} (sd {:.4})",
            e.truth_value, e.mean_true_pate_s0, e.mean_realized_tate, e.sd_realized_tate
        ));
        for c in &r.cells {
            let m = &c.metrics;
            emit(format!(
                "study: {:<9} {:>5} bias {:>8.4} ({:.4}) emp_se {:>7.4} ({:.4}) rob_se {:>7.4} mse {:>7.4} n {}",
                c.method.to_string(),
                c.level.map_or("-".into(), |l| format!("{l}")),
                m.bias,
                m.bias_mcse,
                m.emp_se,
                m.emp_se_mcse,
                m.avg_robust_se,
                m.mse,
                c.n_completed
            ));
        }
        r
    })
}

/// Writes to the stderr handle directly so the line survives output capture.
fn emit(line: String) {
    std::io::stderr().write_all(format!("{line}\n").as_bytes()).unwrap();
}

fn cell(method: StudyMethod, level: Option<f64>) -> &'static CellResult {
    study().cell(method, level).unwrap_or_else(|| panic!("missing cell {method} {level:?}"))
}

fn within(v: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&v)
}

/// Prints the criterion line and fails the test when any check failed.
fn report(n: u32, checks: &[(String, bool)]) {
    let ok = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    let detail: Vec<&str> = checks.iter().map(|c| c.0.as_str()).collect();
    emit(format!("ACCEPTANCE {n} {} {}", if ok { "PASS" } else { "FAIL" }, detail.join("; ")));
    assert!(ok, "criterion {n} failed: {}", failed.join("; "));
}

#[test]
fn criterion_1_estimands() {
    let r = study();
    let n = r.replicate_estimands.len() as f64;
    let pate = r.replicate_estimands.iter().map(|e| e.true_pate_s0.abs()).sum::<f64>() / n;
    let tates: Vec<f64> = r.replicate_estimands.iter().map(|e| e.realized_tate.abs()).collect();
    let tate = tates.iter().sum::<f64>() / n;
    let sd = (tates.iter().map(|t| (t - tate).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    report(
        1,
        &[
            (format!("mean |PATE(S=0)| {pate:.4} in [0.88, 1.10]"), within(pate, 0.88, 1.10)),
            (format!("mean |TATE| {tate:.4} in [2.45, 2.70]"), within(tate, 2.45, 2.70)),
            (format!("sd TATE {sd:.4} in [0.10, 0.20]"), within(sd, 0.10, 0.20)),
        ],
    );
}

#[test]
fn criterion_2_full_data() {
    let m = &cell(StudyMethod::FullData, None).metrics;
    report(
        2,
        &[
            (format!("|bias| {:.4} <= 0.15", m.bias.abs()), m.bias.abs() <= 0.15),
            (format!("emp_se {:.4} in [0.45, 0.72]", m.emp_se), within(m.emp_se, 0.45, 0.72)),
            (format!("mse {:.4} in [0.2, 0.5]", m.mse), within(m.mse, 0.2, 0.5)),
        ],
    );
}

#[test]
fn criterion_3_complete_case() {
    let mut checks = Vec::new();
    for l in LEVELS {
        let m = &cell(StudyMethod::CC, Some(l)).metrics;
        checks.push((format!("level {l}: |bias| {:.4} in [0.30, 0.65]", m.bias.abs()), within(m.bias.abs(), 0.30, 0.65)));
        checks.push((format!("level {l}: emp_se {:.4} in [1.0, 1.7]", m.emp_se), within(m.emp_se, 1.0, 1.7)));
        let others = study()
            .cells
            .iter()
            .filter(|c| c.method != StudyMethod::CC && (c.level == Some(l) || c.level.is_none()))
            .map(|c| c.metrics.emp_se)
            .fold(0.0f64, f64::max);
        checks.push((format!("level {l}: CC emp_se above all others ({others:.4})"), m.emp_se > others));
    }
    report(3, &checks);
}

const MI: [StudyMethod; 5] = [StudyMethod::M1A, StudyMethod::M1B, StudyMethod::M2, StudyMethod::M3A, StudyMethod::M3B];

#[test]
fn criterion_4_m1b() {
    let mut checks = Vec::new();
    for l in LEVELS {
        let m = &cell(StudyMethod::M1B, Some(l)).metrics;
        checks.push((format!("level {l}: |bias| {:.4} in [0.50, 0.72]", m.bias.abs()), within(m.bias.abs(), 0.50, 0.72)));
        checks.push((format!("level {l}: emp_se {:.4} in [0.20, 0.36]", m.emp_se), within(m.emp_se, 0.20, 0.36)));
        let peers: Vec<&CellResult> = MI
            .iter()
            .filter(|&&k| k != StudyMethod::M1B)
            .filter_map(|&k| study().cell(k, Some(l)))
            .collect();
        let largest_bias = peers.iter().all(|c| c.metrics.bias.abs() < m.bias.abs());
        let smallest_se = peers.iter().all(|c| c.metrics.emp_se > m.emp_se);
        checks.push((format!("level {l}: largest MI bias and smallest MI emp_se"), largest_bias && smallest_se));
    }
    report(4, &checks);
}

#[test]
fn criterion_5_m1a() {
    let m = &cell(StudyMethod::M1A, Some(0.0)).metrics;
    report(
        5,
        &[
            (format!("|bias| {:.4} <= 0.06", m.bias.abs()), m.bias.abs() <= 0.06),
            (format!("emp_se {:.4} in [0.24, 0.37]", m.emp_se), within(m.emp_se, 0.24, 0.37)),
            (format!("mse {:.4} <= 0.13", m.mse), m.mse <= 0.13),
        ],
    );
}

#[test]
fn criterion_6_congenial_methods() {
    let full = &cell(StudyMethod::FullData, None).metrics;
    let mut checks = Vec::new();
    for l in LEVELS {
        for k in [StudyMethod::M2, StudyMethod::M3A, StudyMethod::M3B] {
            let m = &cell(k, Some(l)).metrics;
            let bias_band = 2.0 * m.bias_mcse.hypot(full.bias_mcse);
            let se_band = 2.0 * m.emp_se_mcse.hypot(full.emp_se_mcse);
            checks.push((format!("{k} {l}: |bias| {:.4} <= 0.13", m.bias.abs()), m.bias.abs() <= 0.13));
            checks.push((format!("{k} {l}: emp_se {:.4} in [0.45, 0.72]", m.emp_se), within(m.emp_se, 0.45, 0.72)));
            checks.push((
                format!("{k} {l}: bias within {bias_band:.4} of full data"),
                (m.bias - full.bias).abs() <= bias_band,
            ));
            checks.push((
                format!("{k} {l}: emp_se within {se_band:.4} of full data"),
                (m.emp_se - full.emp_se).abs() <= se_band,
            ));
        }
        let (m2, cc) = (cell(StudyMethod::M2, Some(l)).metrics.mse, cell(StudyMethod::CC, Some(l)).metrics.mse);
        checks.push((format!("level {l}: mse M2 {m2:.4} < CC {cc:.4}"), m2 < cc));
    }
    report(6, &checks);
}

fn run_cli(args: &[&str]) -> bool {
    let o = Command::new(BIN).args(args).output().expect("binary runs");
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    o.status.success()
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> bool {
    names.iter().all(|n| std::fs::read(a.join(n)).ok() == std::fs::read(b.join(n)).ok() && a.join(n).exists())
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn cli_determinism() -> Vec<(String, bool)> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut out = Vec::new();

    for w in ["1", "2"] {
        std::fs::create_dir_all(d.join(w)).unwrap();
    }
    let sim_ok = ["1", "2"].iter().all(|w| run_cli(&["simulate", "--out", s(&d.join(w).join("pop.csv")), "--seed", "5"]));
    out.push(("simulate bytes repeat".to_string(), sim_ok && same_files(&d.join("1"), &d.join("2"), &["pop.csv"])));

    let cfg = d.join("study.json");
    std::fs::write(
        &cfg,
        r#"{"scenario": {"n_target": 1500, "alpha": [-3.2, 1, 1, 1]}, "n_sim": 4, "m_rule": {"explicit": 2}, "maxit": 2}"#,
    )
    .unwrap();
    let study_ok = ["1", "2"].iter().all(|w| {
        run_cli(&["study", "--config", s(&cfg), "--out-dir", s(&d.join(w).join("study")), "--seed", "7", "--workers", w])
    });
    out.push((
        "study bytes at 1 and 2 workers".to_string(),
        study_ok
            && same_files(
                &d.join("1").join("study"),
                &d.join("2").join("study"),
                &["results.csv", "results.json", "replicates.csv"],
            ),
    ));

    let pop = with_mar(population(&small_scenario(1_500, 41)), 0.1);
    let (trial, target) = write_pair(&pop, d);
    let roles: Vec<String> = role_args();
    let apply_ok = ["1", "2"].iter().all(|w| {
        let report = d.join(w).join("apply.json");
        let mut args: Vec<&str> =
            vec!["apply", "--trial", s(&trial), "--target", s(&target), "--m", "3", "--B", "20", "--seed", "9", "--workers", w];
        args.extend(roles.iter().map(|r| r.as_str()));
        args.extend(["--out", s(&report)]);
        run_cli(&args)
    });
    out.push((
        "apply bytes at 1 and 2 workers".to_string(),
        apply_ok && same_files(&d.join("1"), &d.join("2"), &["apply.json"]),
    ));

    let diag_ok = ["1", "2"].iter().all(|w| {
        let mut args: Vec<&str> = vec!["diagnose", "--trial", s(&trial), "--target", s(&target), "--out-dir"];
        let dir = d.join(w).join("diag");
        let dir = s(&dir).to_string();
        args.push(&dir);
        args.extend(roles.iter().map(|r| r.as_str()));
        run_cli(&args)
    });
    out.push((
        "diagnose bytes repeat".to_string(),
        diag_ok && same_files(&d.join("1").join("diag"), &d.join("2").join("diag"), &["balance.json", "ps_histogram.csv"]),
    ));
    out
}

#[test]
fn criterion_7_property_suite() {
    let mut checks = Vec::new();
    let mut r = rng(70);

    // IRLS vs a grid-search MLE (1e-4).
    let x = [-2.0, -1.2, -0.5, 0.0, 0.3, 0.9, 1.4, 2.2];
    let y = [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    let ll = |b0: f64, b1: f64| -> f64 {
        x.iter()
            .zip(&y)
            .map(|(&xi, &yi)| {
                let eta: f64 = b0 + b1 * xi;
                yi * eta - eta.exp().ln_1p()
            })
            .sum()
    };
    let (mut c, mut half) = ([0.0f64, 0.0], 8.0f64);
    while half > 1e-8 {
        let step = half / 10.0;
        let mut best = (f64::NEG_INFINITY, c);
        for i in -10..=10 {
            for j in -10..=10 {
                let cand = [c[0] + i as f64 * step, c[1] + j as f64 * step];
                let v = ll(cand[0], cand[1]);
                if v > best.0 {
                    best = (v, cand);
                }
            }
        }
        c = best.1;
        half = step;
    }
    let d = DesignMatrix::new(vec!["x".into()], &[&x]).unwrap();
    let fit = fit_logistic(&d, &y, None).unwrap();
    let irls_err = (fit.coef[0] - c[0]).abs().max((fit.coef[1] - c[1]).abs());
    checks.push((format!("IRLS vs grid {irls_err:.1e} <= 1e-4"), irls_err <= 1e-4));

    // WLS vs explicit 2x2 normal equations (1e-10).
    let xw = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let yw = [1.1, 2.9, 5.2, 6.8, 9.3, 10.9];
    let ww = [1.0, 2.0, 0.5, 1.5, 3.0, 1.0];
    let sum = |f: &dyn Fn(usize) -> f64| (0..6).map(f).sum::<f64>();
    let (s0, sx, sxx) = (sum(&|i| ww[i]), sum(&|i| ww[i] * xw[i]), sum(&|i| ww[i] * xw[i] * xw[i]));
    let (sy, sxy) = (sum(&|i| ww[i] * yw[i]), sum(&|i| ww[i] * xw[i] * yw[i]));
    let det = s0 * sxx - sx * sx;
    let oracle = [(sxx * sy - sx * sxy) / det, (s0 * sxy - sx * sy) / det];
    let wfit = fit_wls(&DesignMatrix::new(vec!["x".into()], &[&xw]).unwrap(), &yw, &ww).unwrap();
    let wls_err = (wfit.coef[0] - oracle[0]).abs().max((wfit.coef[1] - oracle[1]).abs());
    checks.push((format!("WLS vs normal equations {wls_err:.1e} <= 1e-10"), wls_err <= 1e-10));

    // PMM donor membership.
    let xs = normals(60, &mut r);
    let observed: Vec<bool> = (0..60).map(|i| i % 3 != 0).collect();
    let ys: Vec<f64> = (0..60).map(|i| if observed[i] { xs[i] * 2.0 + (i as f64).sin() } else { f64::NAN }).collect();
    let imp = pmm_impute_with(
        &ys,
        &DesignMatrix::new(vec!["x".into()], &[&xs]).unwrap(),
        &observed,
        5,
        &ParamDraw::Posterior,
        &mut r,
    )
    .unwrap();
    let pool: Vec<f64> = (0..60).filter(|&i| observed[i]).map(|i| ys[i]).collect();
    let members = (0..60).filter(|&i| !observed[i]).all(|i| pool.contains(&imp[i]));
    checks.push(("PMM imputes only observed donor values".to_string(), members));

    // Passive identity and observed-entry immutability.
    let ds = with_mar(population(&small_scenario(1_500, 71)), 0.1);
    let opts = SpecOptions {
        m_rule: MRule::Explicit(2),
        seed: 3,
        ..Default::default()
    };
    let set = impute(&ds, &mice::build_spec(ModelKind::M3B, &ds, &opts).unwrap()).unwrap();
    let mut passive = true;
    let mut immutable = true;
    for d in &set.datasets {
        let a = d.column("A").unwrap().values();
        for src in ["X1", "X2"] {
            let (xv, pv) = (d.column(src).unwrap().values(), d.column(&format!("{src}A")).unwrap().values());
            passive &= (0..d.n_rows()).all(|i| pv[i] == xv[i] * a[i]);
        }
        for c in ds.columns() {
            let o = d.column(&c.name).unwrap().values();
            immutable &= (0..ds.n_rows()).filter(|&i| c.observed()[i]).all(|i| o[i].to_bits() == c.values()[i].to_bits());
        }
    }
    checks.push(("passive X1A = X1*A exactly".to_string(), passive));
    checks.push(("observed entries unchanged by imputation".to_string(), immutable));

    // Weight support and scale invariance.
    let pop = population(&small_scenario(2_000, 72));
    let covs: Vec<String> = ["X1", "X2", "X3"].iter().map(|c| c.to_string()).collect();
    let ps = transport_mi::ipsw::estimate_ps(&pop, &covs).unwrap();
    let flags = pop.trial_flags().unwrap();
    let w = compute_weights(&pop, &ps, &vec![None; pop.n_rows()], WeightScheme::Transport).unwrap();
    let support = w.iter().zip(&flags).all(|(&v, &t)| if t { v > 0.0 } else { v == 0.0 });
    checks.push(("weights positive on trial rows, zero elsewhere".to_string(), support));
    let base = estimate_pate(&pop, &w).unwrap().estimate;
    let scaled: Vec<f64> = w.iter().map(|v| v * 37.5).collect();
    let diff = (estimate_pate(&pop, &scaled).unwrap().estimate - base).abs();
    checks.push((format!("weight scale invariance {diff:.1e}"), diff <= 1e-10 * (1.0 + base.abs())));

    // mse identity.
    let est: Vec<f64> = normals(200, &mut r).iter().map(|v| 1.3 + 0.7 * v).collect();
    let pm = performance_metrics(&est, 1.0, &vec![0.7; 200]).unwrap();
    let gap = (pm.mse - (pm.bias.powi(2) + pm.emp_se.powi(2) * 199.0 / 200.0)).abs();
    checks.push((format!("mse identity gap {gap:.1e} <= 1e-10"), gap <= 1e-10));

    // Tipton endpoints.
    let a: Vec<f64> = (0..500).map(|i| 0.05 + 0.3 * (i as f64 / 500.0)).collect();
    let b: Vec<f64> = (0..500).map(|i| 0.6 + 0.35 * (i as f64 / 500.0)).collect();
    let same = tipton_index(&a, &a, 20).unwrap();
    let disjoint = tipton_index(&a, &b, 20).unwrap();
    checks.push((format!("Tipton identical {same:.4}, disjoint {disjoint:.4}"), (same - 1.0).abs() < 1e-12 && disjoint == 0.0));

    checks.extend(cli_determinism());
    report(7, &checks);
}

#[test]
fn criterion_8_applied_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig {
        n_target: 4_000,
        alpha: [-3.2, 1.0, 1.0, 1.0],
        seed: 80,
        ..Default::default()
    };
    let sp = make_superpopulation(&cfg).unwrap();
    let known = sp.true_pate_s0;
    // Below 2% missing overall: percent_missing would give m = 2.
    let spec = MarSpec {
        frac_nontrial: 0.015,
        ..Default::default()
    };
    let ds = induce_mar(sp.data, &spec, &mut rng(0)).unwrap();
    assert_eq!(mice::percent_missing_m(&ds), 2);
    let (trial, target) = write_pair(&ds, dir.path());
    let out = dir.path().join("apply.json");
    let roles = role_args();
    let mut args: Vec<&str> = vec![
        "apply", "--trial", s(&trial), "--target", s(&target), "--method", "m2", "--scheme", "transport", "--m", "5",
        "--B", "200", "--seed", "8",
    ];
    args.extend(roles.iter().map(|r| r.as_str()));
    args.extend(["--out", s(&out)]);
    let ran = run_cli(&args);
    let mut checks = vec![("apply exits 0".to_string(), ran)];
    if ran {
        let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
        let est = rep["estimate"].as_f64().unwrap();
        let se = rep["bootstrap"]["se"].as_f64().unwrap();
        let m = rep["pooled"]["m"].as_u64().unwrap();
        checks.push((
            format!("|{est:.4} - known {known:.4}| <= 3 x bootstrap SE {se:.4}"),
            (est - known).abs() <= 3.0 * se,
        ));
        checks.push((format!("m reported {m}"), m == 5 && rep["per_dataset"].as_array().unwrap().len() == 5));
    }
    report(8, &checks);
}
