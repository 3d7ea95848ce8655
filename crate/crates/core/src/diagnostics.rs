//! Covariate balance and overlap diagnostics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::{ColumnRole, Dataset, TableError};

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("covariate `{0}` has zero pooled variance")]
    ZeroVariance(String),
    #[error("covariate `{column}` is masked at row {row}")]
    Masked { column: String, row: usize },
    #[error("weights sum to zero")]
    ZeroWeights,
    #[error("{0} sample is empty")]
    Empty(&'static str),
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn ess(w: &[f64]) -> Result<f64, DiagnosticsError> {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 == 0.0 || s <= 0.0 {
        return Err(DiagnosticsError::ZeroWeights);
    }
    Ok(s * s / s2)
}

/// Weighted mean and variance. Non-binary variances use the
/// reliability-weights correction, which reduces to the `n - 1` sample
/// variance for equal weights.
fn moments(x: &[f64], w: &[f64], binary: bool) -> Result<(f64, f64), DiagnosticsError> {
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        return Err(DiagnosticsError::ZeroWeights);
    }
    let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    if binary {
        return Ok((mean, mean * (1.0 - mean)));
    }
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let denom = sw - sw2 / sw;
    let ss: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum();
    Ok((mean, if denom > 0.0 { ss / denom } else { 0.0 }))
}

/// Absolute standardized difference between trial rows (optionally
/// weighted) and non-trial rows for one covariate.
pub fn asd(ds: &Dataset, covariate: &str, w: Option<&[f64]>) -> Result<f64, DiagnosticsError> {
    let flags = ds
        .trial_flags()
        .ok_or(TableError::MissingRequiredRole(ColumnRole::TrialIndicator))?;
    let col = ds.try_column(covariate)?;
    if let Some(w) = w {
        if w.len() != ds.n_rows() {
            return Err(DiagnosticsError::LengthMismatch {
                what: "weights",
                expected: ds.n_rows(),
                found: w.len(),
            });
        }
    }
    let (mut x1, mut w1, mut x0) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..ds.n_rows() {
        let v = col.get(r).ok_or_else(|| DiagnosticsError::Masked {
            column: covariate.to_string(),
            row: r,
        })?;
        if flags[r] {
            x1.push(v);
            w1.push(w.map_or(1.0, |w| w[r]));
        } else {
            x0.push(v);
        }
    }
    if x1.is_empty() {
        return Err(DiagnosticsError::Empty("trial"));
    }
    if x0.is_empty() {
        return Err(DiagnosticsError::Empty("target"));
    }
    asd_samples(&x1, &w1, &x0, col.is_binary()).map_err(|e| match e {
        DiagnosticsError::ZeroVariance(_) => DiagnosticsError::ZeroVariance(covariate.to_string()),
        other => other,
    })
}

/// ASD from raw samples; `w1` weights the first sample.
pub fn asd_samples(x1: &[f64], w1: &[f64], x0: &[f64], binary: bool) -> Result<f64, DiagnosticsError> {
    let (m1, v1) = moments(x1, w1, binary)?;
    let (m0, v0) = moments(x0, &vec![1.0; x0.len()], binary)?;
    let pooled = ((v1 + v0) / 2.0).sqrt();
    if pooled == 0.0 {
        return Err(DiagnosticsError::ZeroVariance(String::new()));
    }
    Ok((m1 - m0).abs() / pooled)
}

fn bin_of(p: f64, bins: usize) -> usize {
    ((p.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

/// Bin counts of probabilities over equal-width bins on [0, 1].
pub fn histogram(ps: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &p in ps {
        counts[bin_of(p, bins)] += 1;
    }
    counts
}

/// Generalizability index: Bhattacharyya coefficient `Σ √(f_b g_b)` of the
/// binned propensity distributions of the two samples.
pub fn tipton_index(ps_trial: &[f64], ps_target: &[f64], bins: usize) -> Result<f64, DiagnosticsError> {
    if bins < 2 {
        return Err(DiagnosticsError::TooFewBins(bins));
    }
    if ps_trial.is_empty() {
        return Err(DiagnosticsError::Empty("trial"));
    }
    if ps_target.is_empty() {
        return Err(DiagnosticsError::Empty("target"));
    }
    let (f, g) = (histogram(ps_trial, bins), histogram(ps_target, bins));
    let norm = ((ps_trial.len() * ps_target.len()) as f64).sqrt();
    let s: f64 = f.iter().zip(&g).map(|(&a, &b)| ((a * b) as f64).sqrt()).sum();
    Ok((s / norm).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub asd_unweighted: f64,
    pub asd_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<CovariateBalance>,
    pub tipton_index: f64,
    pub ess_trial: f64,
    pub n_trial: usize,
    pub n_target: usize,
}

impl BalanceReport {
    pub fn render_table(&self) -> String {
        let mut out = format!("{:<16} {:>12} {:>12}\n", "covariate", "ASD before", "ASD after");
        for c in &self.covariates {
            out.push_str(&format!(
                "{:<16} {:>12.4} {:>12.4}\n",
                c.covariate, c.asd_unweighted, c.asd_weighted
            ));
        }
        out.push_str(&format!("tipton index     {:.4}\n", self.tipton_index));
        out.push_str(&format!(
            "trial ESS        {:.1} of {} rows\n",
            self.ess_trial, self.n_trial
        ));
        out
    }
}

/// Balance before and after weighting plus overlap of the propensity scores.
pub fn balance_report(
    ds: &Dataset,
    covariates: &[String],
    ps: &[f64],
    weights: &[f64],
    bins: usize,
) -> Result<BalanceReport, DiagnosticsError> {
    let flags = ds
        .trial_flags()
        .ok_or(TableError::MissingRequiredRole(ColumnRole::TrialIndicator))?;
    if ps.len() != ds.n_rows() {
        return Err(DiagnosticsError::LengthMismatch {
            what: "ps",
            expected: ds.n_rows(),
            found: ps.len(),
        });
    }
    let mut rows = Vec::with_capacity(covariates.len());
    for c in covariates {
        rows.push(CovariateBalance {
            covariate: c.clone(),
            asd_unweighted: asd(ds, c, None)?,
            asd_weighted: asd(ds, c, Some(weights))?,
        });
    }
    let (p1, p0): (Vec<f64>, Vec<f64>) = {
        let mut p1 = Vec::new();
        let mut p0 = Vec::new();
        for (p, &s) in ps.iter().zip(&flags) {
            if s { p1.push(*p) } else { p0.push(*p) }
        }
        (p1, p0)
    };
    let w_trial: Vec<f64> = (0..ds.n_rows()).filter(|&r| flags[r]).map(|r| weights[r]).collect();
    Ok(BalanceReport {
        covariates: rows,
        tipton_index: tipton_index(&p1, &p0, bins)?,
        ess_trial: ess(&w_trial)?,
        n_trial: p1.len(),
        n_target: p0.len(),
    })
}
