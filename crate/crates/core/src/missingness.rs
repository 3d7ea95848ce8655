//! Missing-at-random masking driven by fully observed ranking columns.
//!
//! Within each trial stratum the rows with the largest sum of the ranking
//! columns lose their target value. Counts are floored and ties are broken by
//! ascending row index, so the masked set is a deterministic function of the
//! ranking columns and the trial indicator.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::{ColumnRole, Dataset, TableError};

#[derive(Debug, Error)]
pub enum MissingnessError {
    #[error("fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("column `{0}` must be fully observed")]
    NotFullyObserved(String),
    #[error("target column `{0}` already has missing entries")]
    AlreadyMissing(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// How trial rows are chosen for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialMar {
    /// Same top-ranked rule as the non-trial stratum.
    #[default]
    Ranked,
    /// Uniformly random rows (exact count).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarSpec {
    pub target_col: String,
    pub rank_cols: Vec<String>,
    pub frac_nontrial: f64,
    pub frac_trial: f64,
    pub trial_mar: TrialMar,
}

impl Default for MarSpec {
    fn default() -> Self {
        MarSpec {
            target_col: "X1".to_string(),
            rank_cols: vec!["X2".to_string(), "X3".to_string()],
            frac_nontrial: 0.30,
            frac_trial: 0.0,
            trial_mar: TrialMar::Ranked,
        }
    }
}

/// Indices of the `floor(frac * rows.len())` rows with the largest scores.
/// Ties go to the lower row index.
fn top_ranked(rows: &[usize], score: &[f64], frac: f64) -> Vec<usize> {
    let k = (frac * rows.len() as f64).floor() as usize;
    let mut order = rows.to_vec();
    order.sort_by(|&i, &j| score[j].total_cmp(&score[i]).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Rows that `induce_mar` would mask, without touching the dataset.
pub fn mar_rows<R: Rng + ?Sized>(
    ds: &Dataset,
    spec: &MarSpec,
    rng: &mut R,
) -> Result<Vec<usize>, MissingnessError> {
    for f in [spec.frac_nontrial, spec.frac_trial] {
        if !(0.0..=1.0).contains(&f) {
            return Err(MissingnessError::BadFraction(f));
        }
    }
    let s = ds.require_role(ColumnRole::TrialIndicator)?;
    if !s.fully_observed() {
        return Err(MissingnessError::NotFullyObserved(s.name.clone()));
    }
    let mut score = vec![0.0; ds.n_rows()];
    for name in &spec.rank_cols {
        let c = ds.try_column(name)?;
        if !c.fully_observed() {
            return Err(MissingnessError::NotFullyObserved(name.clone()));
        }
        for (acc, v) in score.iter_mut().zip(c.values()) {
            *acc += v;
        }
    }

    let (trial, nontrial): (Vec<usize>, Vec<usize>) =
        (0..ds.n_rows()).partition(|&i| s.values()[i] == 1.0);
    let mut masked = top_ranked(&nontrial, &score, spec.frac_nontrial);
    match spec.trial_mar {
        TrialMar::Ranked => masked.extend(top_ranked(&trial, &score, spec.frac_trial)),
        TrialMar::Random => {
            let k = (spec.frac_trial * trial.len() as f64).floor() as usize;
            let picks = rand::seq::index::sample(rng, trial.len(), k);
            masked.extend(picks.iter().map(|p| trial[p]));
        }
    }
    masked.sort_unstable();
    Ok(masked)
}

/// Masks the target column according to `spec`. The target must start fully
/// observed. `rng` is only consumed by [`TrialMar::Random`].
pub fn induce_mar<R: Rng + ?Sized>(
    ds: Dataset,
    spec: &MarSpec,
    rng: &mut R,
) -> Result<Dataset, MissingnessError> {
    let target = ds.try_column(&spec.target_col)?;
    if !target.fully_observed() {
        return Err(MissingnessError::AlreadyMissing(spec.target_col.clone()));
    }
    let rows = mar_rows(&ds, spec, rng)?;
    Ok(ds.mask_rows(&spec.target_col, &rows)?)
}
