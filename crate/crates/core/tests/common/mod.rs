#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use transport_mi::datagen::{make_superpopulation, ScenarioConfig};
use transport_mi::missingness::{induce_mar, MarSpec};
use transport_mi::tabular::{build_dataset, ColumnRole, Dataset};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

pub fn roles(pairs: &[(&str, ColumnRole)]) -> HashMap<String, ColumnRole> {
    pairs.iter().map(|(n, r)| (n.to_string(), *r)).collect()
}

pub fn standard_roles() -> HashMap<String, ColumnRole> {
    roles(&[
        ("X1", ColumnRole::Covariate),
        ("X2", ColumnRole::Covariate),
        ("X3", ColumnRole::Covariate),
        ("S", ColumnRole::TrialIndicator),
        ("A", ColumnRole::Treatment),
        ("Y", ColumnRole::Outcome),
    ])
}

/// Small version of the simulation scenario (roughly 10% trial).
pub fn small_scenario(n: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_target: n,
        alpha: [-3.2, 1.0, 1.0, 1.0],
        seed,
        ..Default::default()
    }
}

pub fn population(cfg: &ScenarioConfig) -> Dataset {
    make_superpopulation(cfg).unwrap().data
}

pub fn with_mar(ds: Dataset, frac_trial: f64) -> Dataset {
    let spec = MarSpec {
        frac_trial,
        ..Default::default()
    };
    induce_mar(ds, &spec, &mut rng(0)).unwrap()
}

pub fn dataset(cols: Vec<(&str, Vec<f64>)>, roles: &HashMap<String, ColumnRole>) -> Dataset {
    build_dataset(cols.into_iter().map(|(n, v)| (n.to_string(), v)).collect(), roles).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Splits a population into a trial file (S=1 rows: covariates, A, Y) and a
/// target file (S=0 rows: covariates only). Returns the two paths.
pub fn write_pair(ds: &Dataset, dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let flags = ds.trial_flags().unwrap();
    let trial_rows: Vec<usize> = (0..ds.n_rows()).filter(|&r| flags[r]).collect();
    let target_rows: Vec<usize> = (0..ds.n_rows()).filter(|&r| !flags[r]).collect();
    let trial = ds.select_rows(&trial_rows).drop_column("S").unwrap();
    let target = ds
        .select_rows(&target_rows)
        .drop_column("S")
        .unwrap()
        .drop_column("A")
        .unwrap()
        .drop_column("Y")
        .unwrap();
    let (tp, gp) = (dir.join("trial.csv"), dir.join("target.csv"));
    trial.write_csv_path(&tp).unwrap();
    target.write_csv_path(&gp).unwrap();
    (tp, gp)
}

pub fn role_args() -> Vec<String> {
    ["X1=covariate", "X2=covariate", "X3=covariate", "A=treatment", "Y=outcome"]
        .iter()
        .flat_map(|r| ["--role".to_string(), r.to_string()])
        .collect()
}
