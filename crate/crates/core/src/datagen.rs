//! Superpopulation generator for simulation mode.
//!
//! Three independent standard-normal covariates, logistic trial selection,
//! randomized treatment inside the trial, and linear potential outcomes with
//! effect modification. Treatment effects are always treated minus control.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams;
use crate::tabular::{build_dataset, ColumnRole, Dataset, TableError};

pub const COVARIATES: [&str; 3] = ["X1", "X2", "X3"];
pub const TRIAL: &str = "S";
pub const TREATMENT: &str = "A";
pub const OUTCOME: &str = "Y";

const MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("degenerate superpopulation after {attempts} attempts: {reason}")]
    Degenerate { attempts: u64, reason: String },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_target: usize,
    pub alpha: [f64; 4],
    pub beta1: [f64; 4],
    pub beta0: [f64; 4],
    pub noise_sd: f64,
    pub treat_prob: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_target: 10_000,
            alpha: [-4.10, 1.0, 1.0, 1.0],
            beta1: [1.0, 1.0, 1.0, 1.0],
            beta0: [0.0, 0.0, 0.0, 1.0],
            noise_sd: 1.0,
            treat_prob: 0.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |msg: &str| Err(DatagenError::InvalidConfig(msg.to_string()));
        if self.n_target < 2 {
            return bad("n_target must be at least 2");
        }
        if self.alpha.iter().chain(&self.beta1).chain(&self.beta0).any(|v| !v.is_finite()) {
            return bad("alpha, beta1 and beta0 must be finite");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.treat_prob) {
            return bad("treat_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Superpopulation {
    /// Covariates, trial indicator, treatment and observed outcome. Treatment
    /// and outcome are masked outside the trial.
    pub data: Dataset,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub true_pate_s0: f64,
    pub true_pate_all: f64,
    pub realized_tate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimandSummary {
    pub n_target: usize,
    pub n_trial: usize,
    pub n_treated: usize,
    pub true_pate_s0: f64,
    pub true_pate_all: f64,
    pub realized_tate: f64,
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn linear(coef: &[f64; 4], x: &[Vec<f64>; 3], i: usize) -> f64 {
    coef[0] + coef[1] * x[0][i] + coef[2] * x[1][i] + coef[3] * x[2][i]
}

/// Three i.i.d. standard normal columns, drawn column by column.
pub fn gen_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> [Vec<f64>; 3] {
    std::array::from_fn(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

pub fn selection_probability(alpha: &[f64; 4], x: &[f64; 3]) -> f64 {
    expit(alpha[0] + alpha[1] * x[0] + alpha[2] * x[1] + alpha[3] * x[2])
}

pub fn gen_trial_indicator<R: Rng + ?Sized>(
    x: &[Vec<f64>; 3],
    alpha: &[f64; 4],
    rng: &mut R,
) -> Vec<bool> {
    (0..x[0].len())
        .map(|i| {
            let p = expit(linear(alpha, x, i));
            rng.random::<f64>() < p
        })
        .collect()
}

/// Bernoulli(`treat_prob`) assignment on trial rows; `None` elsewhere.
pub fn gen_treatment<R: Rng + ?Sized>(
    in_trial: &[bool],
    treat_prob: f64,
    rng: &mut R,
) -> Vec<Option<bool>> {
    in_trial
        .iter()
        .map(|&s| s.then(|| rng.random::<f64>() < treat_prob))
        .collect()
}

pub fn gen_potential_outcomes<R: Rng + ?Sized>(
    x: &[Vec<f64>; 3],
    beta1: &[f64; 4],
    beta0: &[f64; 4],
    noise_sd: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let n = x[0].len();
    let noise = Normal::new(0.0, noise_sd).expect("noise_sd validated non-negative");
    let mut draw = |coef: &[f64; 4]| -> Vec<f64> {
        (0..n)
            .map(|i| linear(coef, x, i) + noise.sample(rng))
            .collect()
    };
    let y1 = draw(beta1);
    let y0 = draw(beta0);
    (y1, y0)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn attempt<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Superpopulation, String> {
    let n = cfg.n_target;
    let x = gen_covariates(n, rng);
    let s = gen_trial_indicator(&x, &cfg.alpha, rng);
    let a = gen_treatment(&s, cfg.treat_prob, rng);
    let (y1, y0) = gen_potential_outcomes(&x, &cfg.beta1, &cfg.beta0, cfg.noise_sd, rng);

    let n_trial = s.iter().filter(|&&v| v).count();
    let n_treated = a.iter().filter(|v| **v == Some(true)).count();
    if n_trial < 2 {
        return Err(format!("only {n_trial} trial rows"));
    }
    if n_trial == n {
        return Err("empty S=0 stratum".to_string());
    }
    if n_treated == 0 || n_treated == n_trial {
        return Err("single-arm trial".to_string());
    }

    let y: Vec<f64> = (0..n)
        .map(|i| match a[i] {
            Some(true) => y1[i],
            Some(false) => y0[i],
            None => f64::NAN,
        })
        .collect();
    let effect = |i: usize| y1[i] - y0[i];
    let true_pate_s0 = mean((0..n).filter(|&i| !s[i]).map(effect));
    let true_pate_all = mean((0..n).map(effect));
    let realized_tate = mean((0..n).filter(|&i| a[i] == Some(true)).map(|i| y[i]))
        - mean((0..n).filter(|&i| a[i] == Some(false)).map(|i| y[i]));

    let [x1, x2, x3] = x;
    let s_col: Vec<f64> = s.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let a_col: Vec<f64> = a
        .iter()
        .map(|v| v.map_or(f64::NAN, |t| if t { 1.0 } else { 0.0 }))
        .collect();
    let roles: HashMap<String, ColumnRole> = [
        (COVARIATES[0], ColumnRole::Covariate),
        (COVARIATES[1], ColumnRole::Covariate),
        (COVARIATES[2], ColumnRole::Covariate),
        (TRIAL, ColumnRole::TrialIndicator),
        (TREATMENT, ColumnRole::Treatment),
        (OUTCOME, ColumnRole::Outcome),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let data = build_dataset(
        vec![
            (COVARIATES[0].into(), x1),
            (COVARIATES[1].into(), x2),
            (COVARIATES[2].into(), x3),
            (TRIAL.into(), s_col),
            (TREATMENT.into(), a_col),
            (OUTCOME.into(), y),
        ],
        &roles,
    )
    .map_err(|e| e.to_string())?;

    Ok(Superpopulation {
        data,
        y1,
        y0,
        true_pate_s0,
        true_pate_all,
        realized_tate,
    })
}

/// Generates a superpopulation, redrawing (up to 100 times) when the trial is
/// degenerate: fewer than two members, a single arm, or no non-trial rows.
pub fn make_superpopulation(cfg: &ScenarioConfig) -> Result<Superpopulation, DatagenError> {
    cfg.validate()?;
    let mut reason = String::new();
    for k in 0..MAX_ATTEMPTS {
        let mut rng = streams::stream(cfg.seed, &[k]);
        match attempt(cfg, &mut rng) {
            Ok(pop) => return Ok(pop),
            Err(r) => reason = r,
        }
    }
    Err(DatagenError::Degenerate {
        attempts: MAX_ATTEMPTS,
        reason,
    })
}

impl Superpopulation {
    pub fn summary(&self) -> EstimandSummary {
        let s = self.data.column(TRIAL).expect("generated S");
        let a = self.data.column(TREATMENT).expect("generated A");
        EstimandSummary {
            n_target: self.data.n_rows(),
            n_trial: s.values().iter().filter(|&&v| v == 1.0).count(),
            n_treated: (0..a.len()).filter(|&i| a.get(i) == Some(1.0)).count(),
            true_pate_s0: self.true_pate_s0,
            true_pate_all: self.true_pate_all,
            realized_tate: self.realized_tate,
        }
    }

    /// Writes the observed columns, optionally followed by `Y1` and `Y0`.
    pub fn write_csv<W: Write>(&self, writer: W, reveal_potential: bool) -> Result<(), DatagenError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.data.names().collect();
        if reveal_potential {
            header.extend(["Y1", "Y0"]);
        }
        wtr.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for row in 0..self.data.n_rows() {
            record.clear();
            for col in self.data.columns() {
                record.push(col.get(row).map_or("NA".to_string(), |v| format!("{v:?}")));
            }
            if reveal_potential {
                record.push(format!("{:?}", self.y1[row]));
                record.push(format!("{:?}", self.y0[row]));
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
