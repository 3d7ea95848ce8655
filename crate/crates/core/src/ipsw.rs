//! Inverse probability of sampling weights and the weighted treatment-effect
//! estimator, including pooling across imputations and the bootstrap.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{self, fit_logistic_with, fit_wls, DesignMatrix, GlmError};
use crate::mice::ImputedSet;
use crate::streams;
use crate::tabular::{ColumnRole, Dataset, TableError};

#[derive(Debug, Error)]
pub enum IpswError {
    #[error("propensity score {value} at trial row {row} is not strictly inside (0, 1)")]
    ExtremePs { row: usize, value: f64 },
    #[error("trial has a single arm")]
    SingleArm,
    #[error("arm {arm} has {count} trial rows with positive weight, need at least 2")]
    DegenerateArm { arm: u8, count: usize },
    #[error("{0} stratum is empty")]
    EmptyStratum(&'static str),
    #[error("length mismatch: {what} has {found} entries, dataset has {expected} rows")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("imputed dataset {index}: {source}")]
    Dataset {
        index: usize,
        #[source]
        source: Box<IpswError>,
    },
    #[error("bootstrap: {failed} of {total} resamples failed (limit 1%)")]
    BootstrapFailures { failed: usize, total: usize },
    #[error("bootstrap needs at least 2 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("no imputed datasets")]
    NoImputations,
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// Trial to the combined trial + target population.
    #[default]
    Generalize,
    /// Trial to the target population only.
    Transport,
}

/// How the within-trial treatment probability is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EMode {
    #[default]
    Marginal,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightsSummary {
    pub min: f64,
    pub max: f64,
    pub sum: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimate: f64,
    pub robust_se: f64,
    pub model_se: f64,
    pub n_used: usize,
    pub weights_summary: WeightsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub estimate: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    pub m: usize,
}

impl PooledEstimate {
    pub fn total_se(&self) -> f64 {
        self.total_var.sqrt()
    }
}

fn trial_rows(ds: &Dataset) -> Result<(Vec<bool>, Vec<usize>), IpswError> {
    let flags = ds
        .trial_flags()
        .ok_or(TableError::MissingRequiredRole(ColumnRole::TrialIndicator))?;
    let rows: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
    if rows.is_empty() {
        return Err(IpswError::EmptyStratum("trial"));
    }
    if rows.len() == flags.len() {
        return Err(IpswError::EmptyStratum("target"));
    }
    Ok((flags, rows))
}

/// Fitted `P(S = 1 | X)` for every row from a main-effects logistic model.
pub fn estimate_ps(ds: &Dataset, covariates: &[String]) -> Result<Vec<f64>, IpswError> {
    let s = ds.require_role(ColumnRole::TrialIndicator)?;
    let all: Vec<usize> = (0..ds.n_rows()).collect();
    let x = DesignMatrix::from_dataset(ds, covariates, &all)?;
    let fit = fit_logistic_with(&x, s.values(), None, false)?;
    Ok(fit.fitted)
}

/// `ê_a` for each trial row: the probability of the arm actually received.
/// `None` on non-trial rows.
pub fn treatment_prob(
    ds: &Dataset,
    covariates: &[String],
    mode: EMode,
) -> Result<Vec<Option<f64>>, IpswError> {
    let (flags, rows) = trial_rows(ds)?;
    let a = ds.require_role(ColumnRole::Treatment)?;
    let mut arm = Vec::with_capacity(rows.len());
    for &r in &rows {
        arm.push(a.get(r).ok_or_else(|| GlmError::MaskedEntry {
            column: a.name.clone(),
            row: r,
        })?);
    }
    let treated = arm.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == rows.len() {
        return Err(IpswError::SingleArm);
    }
    let p1: Vec<f64> = match mode {
        EMode::Marginal => vec![treated as f64 / rows.len() as f64; rows.len()],
        EMode::Logistic => {
            let x = DesignMatrix::from_dataset(ds, covariates, &rows)?;
            fit_logistic_with(&x, &arm, None, false)?.fitted
        }
    };
    let mut out = vec![None; flags.len()];
    for ((&r, &av), p) in rows.iter().zip(&arm).zip(p1) {
        out[r] = Some(if av == 1.0 { p } else { 1.0 - p });
    }
    Ok(out)
}

/// Sampling weights: positive on trial rows, zero elsewhere.
pub fn compute_weights(
    ds: &Dataset,
    ps: &[f64],
    e_a: &[Option<f64>],
    scheme: WeightScheme,
) -> Result<Vec<f64>, IpswError> {
    let n = ds.n_rows();
    for (what, len) in [("ps", ps.len()), ("e_a", e_a.len())] {
        if len != n {
            return Err(IpswError::LengthMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    let (flags, rows) = trial_rows(ds)?;
    let n1 = rows.len() as f64;
    let odds_marginal = n1 / (n as f64 - n1);
    let mut w = vec![0.0; n];
    for &r in &rows {
        let p = ps[r];
        if !(p > 0.0 && p < 1.0) {
            return Err(IpswError::ExtremePs { row: r, value: p });
        }
        w[r] = match scheme {
            WeightScheme::Generalize => {
                let e = e_a[r].ok_or_else(|| IpswError::Other(format!("missing treatment probability at trial row {r}")))?;
                if !(e > 0.0 && e <= 1.0) {
                    return Err(IpswError::Other(format!("treatment probability {e} at row {r}")));
                }
                1.0 / (p * e)
            }
            WeightScheme::Transport => (1.0 - p) / p * odds_marginal,
        };
    }
    debug_assert!(w.iter().zip(&flags).all(|(&wi, &s)| (wi > 0.0) == s));
    Ok(w)
}

fn summarize(w: &[f64]) -> WeightsSummary {
    let pos: Vec<f64> = w.iter().copied().filter(|&v| v > 0.0).collect();
    let sum: f64 = pos.iter().sum();
    let sq: f64 = pos.iter().map(|v| v * v).sum();
    WeightsSummary {
        min: pos.iter().copied().fold(f64::INFINITY, f64::min),
        max: pos.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sum,
        ess: if sq > 0.0 { sum * sum / sq } else { 0.0 },
    }
}

/// Weighted regression of the outcome on an intercept and treatment over
/// the trial rows; the estimate is the treatment coefficient with an HC0
/// robust standard error.
pub fn estimate_pate(ds: &Dataset, w: &[f64]) -> Result<EstimateResult, IpswError> {
    if w.len() != ds.n_rows() {
        return Err(IpswError::LengthMismatch {
            what: "weights",
            expected: ds.n_rows(),
            found: w.len(),
        });
    }
    let (_, rows) = trial_rows(ds)?;
    let a_name = ds.require_role(ColumnRole::Treatment)?.name.clone();
    let y = ds.require_role(ColumnRole::Outcome)?;
    let x = DesignMatrix::from_dataset(ds, std::slice::from_ref(&a_name), &rows)?;
    let mut yv = Vec::with_capacity(rows.len());
    for &r in &rows {
        yv.push(y.get(r).ok_or_else(|| GlmError::MaskedEntry {
            column: y.name.clone(),
            row: r,
        })?);
    }
    let wv: Vec<f64> = rows.iter().map(|&r| w[r]).collect();
    for arm in [0u8, 1] {
        let count = (0..rows.len())
            .filter(|&i| x.row(i)[1] == arm as f64 && wv[i] > 0.0)
            .count();
        if count < 2 {
            return Err(IpswError::DegenerateArm { arm, count });
        }
    }
    let fit = fit_wls(&x, &yv, &wv)?;
    let estimate = fit.coef[1];
    if !estimate.is_finite() {
        return Err(IpswError::Other("non-finite estimate".into()));
    }
    Ok(EstimateResult {
        estimate,
        robust_se: fit.robust_se()[1],
        model_se: fit.model_se()[1],
        n_used: wv.iter().filter(|&&v| v > 0.0).count(),
        weights_summary: summarize(&wv),
    })
}

/// Rubin's rules over per-imputation point estimates and variances.
pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> PooledEstimate {
    let m = estimates.len();
    assert!(m > 0 && variances.len() == m, "rubin_pool needs matching non-empty inputs");
    let mf = m as f64;
    let estimate = estimates.iter().sum::<f64>() / mf;
    let within_var = variances.iter().sum::<f64>() / mf;
    let between_var = if m > 1 {
        estimates.iter().map(|e| (e - estimate).powi(2)).sum::<f64>() / (mf - 1.0)
    } else {
        0.0
    };
    PooledEstimate {
        estimate,
        within_var,
        between_var,
        total_var: within_var + (1.0 + 1.0 / mf) * between_var,
        m,
    }
}

/// The complete estimation chain applied to one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpswPipeline {
    pub covariates: Vec<String>,
    pub scheme: WeightScheme,
    pub e_mode: EMode,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub ps: Vec<f64>,
    pub weights: Vec<f64>,
    pub result: EstimateResult,
}

impl IpswPipeline {
    pub fn new(covariates: Vec<String>, scheme: WeightScheme) -> Self {
        IpswPipeline {
            covariates,
            scheme,
            e_mode: EMode::Marginal,
        }
    }

    pub fn run_full(&self, ds: &Dataset) -> Result<PipelineOutput, IpswError> {
        let ps = estimate_ps(ds, &self.covariates)?;
        let e_a = match self.scheme {
            WeightScheme::Generalize => treatment_prob(ds, &self.covariates, self.e_mode)?,
            WeightScheme::Transport => vec![None; ds.n_rows()],
        };
        let weights = compute_weights(ds, &ps, &e_a, self.scheme)?;
        let result = estimate_pate(ds, &weights)?;
        Ok(PipelineOutput { ps, weights, result })
    }

    pub fn run(&self, ds: &Dataset) -> Result<EstimateResult, IpswError> {
        Ok(self.run_full(ds)?.result)
    }

    /// Runs the pipeline inside every imputed dataset and pools with Rubin's
    /// rules over the robust variances.
    pub fn psi_within(&self, imputed: &ImputedSet) -> Result<PooledEstimate, IpswError> {
        let results = self.per_imputation(&imputed.datasets)?;
        Ok(pool_results(&results))
    }

    pub fn per_imputation(&self, datasets: &[Dataset]) -> Result<Vec<EstimateResult>, IpswError> {
        if datasets.is_empty() {
            return Err(IpswError::NoImputations);
        }
        datasets
            .iter()
            .enumerate()
            .map(|(index, d)| {
                self.run(d).map_err(|e| IpswError::Dataset {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Drops rows with any masked analysis variable, then runs the pipeline.
    /// Treatment and outcome only count on trial rows.
    pub fn complete_case(&self, ds: &Dataset) -> Result<EstimateResult, IpswError> {
        self.run(&complete_cases(ds, &self.covariates)?)
    }
}

pub fn pool_results(results: &[EstimateResult]) -> PooledEstimate {
    let est: Vec<f64> = results.iter().map(|r| r.estimate).collect();
    let var: Vec<f64> = results.iter().map(|r| r.robust_se * r.robust_se).collect();
    rubin_pool(&est, &var)
}

/// Rows with every covariate observed and, on trial rows, observed
/// treatment and outcome.
pub fn complete_cases(ds: &Dataset, covariates: &[String]) -> Result<Dataset, IpswError> {
    let flags = ds
        .trial_flags()
        .ok_or(TableError::MissingRequiredRole(ColumnRole::TrialIndicator))?;
    let covs = covariates
        .iter()
        .map(|c| ds.try_column(c))
        .collect::<Result<Vec<_>, _>>()?;
    let a = ds.require_role(ColumnRole::Treatment)?;
    let y = ds.require_role(ColumnRole::Outcome)?;
    let keep: Vec<usize> = (0..ds.n_rows())
        .filter(|&r| {
            covs.iter().all(|c| c.observed()[r])
                && (!flags[r] || (a.observed()[r] && y.observed()[r]))
        })
        .collect();
    Ok(ds.select_rows(&keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub se: f64,
    pub b: usize,
    pub n_ok: usize,
    pub n_failed: usize,
}

/// Row indices of one bootstrap resample drawn within each trial stratum.
pub fn stratified_resample<R: Rng + ?Sized>(flags: &[bool], rng: &mut R) -> Vec<usize> {
    let (trial, target): (Vec<usize>, Vec<usize>) = (0..flags.len()).partition(|&i| flags[i]);
    let mut rows = Vec::with_capacity(flags.len());
    for group in [&trial, &target] {
        for _ in 0..group.len() {
            rows.push(group[rng.random_range(0..group.len())]);
        }
    }
    rows
}

/// Standard deviation of `stat` over `b` stratified resamples. Resample `k`
/// draws its rows from stream `(seed, k)` and is passed `k`, so the result
/// does not depend on thread count. Failed resamples are skipped; more than
/// 1% failing is an error.
pub fn bootstrap_se<F>(ds: &Dataset, b: usize, seed: u64, stat: F) -> Result<BootstrapResult, IpswError>
where
    F: Fn(&Dataset, usize) -> Result<f64, IpswError> + Sync,
{
    if b < 2 {
        return Err(IpswError::TooFewResamples(b));
    }
    let flags = ds
        .trial_flags()
        .ok_or(TableError::MissingRequiredRole(ColumnRole::TrialIndicator))?;
    let values: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = streams::stream(seed, &[k as u64]);
            let rows = stratified_resample(&flags, &mut rng);
            stat(&ds.select_rows(&rows), k).ok().filter(|v| v.is_finite())
        })
        .collect();
    let ok: Vec<f64> = values.into_iter().flatten().collect();
    let failed = b - ok.len();
    if failed as f64 > 0.01 * b as f64 || ok.len() < 2 {
        return Err(IpswError::BootstrapFailures { failed, total: b });
    }
    let n = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / n;
    let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BootstrapResult {
        se: var.sqrt(),
        b,
        n_ok: ok.len(),
        n_failed: failed,
    })
}

/// Fitted logistic coefficients of the sampling model, for inspection.
pub fn ps_model(ds: &Dataset, covariates: &[String]) -> Result<glm::GlmFit, IpswError> {
    let s = ds.require_role(ColumnRole::TrialIndicator)?;
    let all: Vec<usize> = (0..ds.n_rows()).collect();
    let x = DesignMatrix::from_dataset(ds, covariates, &all)?;
    Ok(fit_logistic_with(&x, s.values(), None, false)?)
}
