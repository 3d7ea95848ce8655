//! Multiple imputation by chained equations.
//!
//! Continuous columns are imputed by predictive mean matching (type-1
//! matching, five donors by default) and binary columns by logistic
//! regression, both with posterior parameter draws. Product columns can be
//! imputed actively (as ordinary variables) or passively (recomputed from
//! their sources after every update).

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{
    self, draw_coef, expit, fit_logistic_with, fit_wls_with, DesignMatrix, GlmError,
};
use crate::streams;
use crate::tabular::{ColumnRole, Dataset, TableError};

pub const DEFAULT_DONORS: usize = 5;
pub const DEFAULT_MAXIT: usize = 5;

#[derive(Debug, Error)]
pub enum MiceError {
    #[error("M1A is only applicable when there was no missing data in the trial population (column `{0}` is masked on trial rows)")]
    M1aNotApplicable(String),
    #[error("invalid imputation spec: {0}")]
    InvalidSpec(String),
    #[error("column `{column}` has {observed} observed rows in scope, need at least {needed}")]
    TooFewObserved {
        column: String,
        observed: usize,
        needed: usize,
    },
    #[error("imputed dataset {chain}: model for `{column}` failed at iteration {iteration}: {source}")]
    ColumnFit {
        chain: usize,
        column: String,
        iteration: usize,
        #[source]
        source: GlmError,
    },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pmm,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnModel {
    pub target: String,
    pub predictors: Vec<String>,
    pub method: Method,
    pub donor_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowScope {
    NontrialOnly,
    Superpopulation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivedMode {
    Active,
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedSpec {
    pub a: String,
    pub b: String,
    pub out: String,
    pub mode: DerivedMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSpec {
    pub row_scope: RowScope,
    /// Models in visit order.
    pub column_models: Vec<ColumnModel>,
    pub derived: Vec<DerivedSpec>,
    pub m: usize,
    pub maxit: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    M1A,
    M1B,
    M2,
    M3A,
    M3B,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::M1A,
        ModelKind::M1B,
        ModelKind::M2,
        ModelKind::M3A,
        ModelKind::M3B,
    ];
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MRule {
    /// m equals the percentage of incomplete rows (at least 2).
    PercentMissing,
    Explicit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecOptions {
    pub m_rule: MRule,
    /// Covariates interacted with treatment under M3A/M3B; `None` means all.
    pub interactions: Option<Vec<String>>,
    pub maxit: usize,
    pub donor_k: usize,
    pub seed: u64,
}

impl Default for SpecOptions {
    fn default() -> Self {
        SpecOptions {
            m_rule: MRule::PercentMissing,
            interactions: None,
            maxit: DEFAULT_MAXIT,
            donor_k: DEFAULT_DONORS,
            seed: 0,
        }
    }
}

/// How imputation models obtain their coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamDraw {
    /// Draw from the approximate posterior (proper imputation).
    Posterior,
    /// Use the point estimate.
    PointEstimate,
    /// Use these coefficients (intercept first).
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLogEntry {
    pub chain: usize,
    pub iteration: usize,
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct ImputedSet {
    pub datasets: Vec<Dataset>,
    pub spec: ImputationSpec,
    pub chain_log: Vec<ChainLogEntry>,
}

impl ImputedSet {
    pub fn write_chain_log<W: Write>(&self, writer: W) -> Result<(), MiceError> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "chain,iteration,column,mean,sd")?;
        for e in &self.chain_log {
            writeln!(w, "{},{},{},{:?},{:?}", e.chain, e.iteration, e.column, e.mean, e.sd)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Percentage-of-incomplete-rows rule: `round(100 * rows with any masked
/// covariate / rows)`, floored at 2.
pub fn percent_missing_m(ds: &Dataset) -> usize {
    let covs: Vec<_> = ds
        .columns()
        .iter()
        .filter(|c| c.role == ColumnRole::Covariate)
        .collect();
    let incomplete = (0..ds.n_rows())
        .filter(|&r| covs.iter().any(|c| !c.observed()[r]))
        .count();
    let pct = 100.0 * incomplete as f64 / ds.n_rows().max(1) as f64;
    (pct.round() as usize).max(2)
}

fn scope_rows(ds: &Dataset, scope: RowScope) -> Result<Vec<usize>, MiceError> {
    match scope {
        RowScope::Superpopulation => Ok((0..ds.n_rows()).collect()),
        RowScope::NontrialOnly => {
            let flags = ds
                .trial_flags()
                .ok_or(TableError::MissingRequiredRole(ColumnRole::TrialIndicator))?;
            Ok((0..ds.n_rows()).filter(|&r| !flags[r]).collect())
        }
    }
}

fn masked_in(ds: &Dataset, name: &str, rows: &[usize]) -> usize {
    ds.column(name)
        .map_or(0, |c| rows.iter().filter(|&&r| !c.observed()[r]).count())
}

fn method_for(ds: &Dataset, name: &str) -> Method {
    match ds.column(name) {
        Some(c) if matches!(c.role, ColumnRole::Treatment | ColumnRole::TrialIndicator) => {
            Method::Logistic
        }
        Some(c) if c.role == ColumnRole::Covariate && c.is_binary() => Method::Logistic,
        _ => Method::Pmm,
    }
}

/// Builds one of the five named imputation models for `ds`.
///
/// * M1A: covariates on each other, non-trial rows only.
/// * M1B: covariates on each other, all rows.
/// * M2: covariates, trial indicator, treatment and outcome, all rows;
///   treatment and outcome are imputed on non-trial rows too.
/// * M3A / M3B: M2 plus covariate-by-treatment products, imputed actively
///   (own models) or passively (recomputed).
///
/// A column never predicts itself through a product it is a source of.
pub fn build_spec(kind: ModelKind, ds: &Dataset, opts: &SpecOptions) -> Result<ImputationSpec, MiceError> {
    let covariates = ds.covariate_names();
    let s = ds.require_role(ColumnRole::TrialIndicator)?.name.clone();

    let row_scope = match kind {
        ModelKind::M1A => RowScope::NontrialOnly,
        _ => RowScope::Superpopulation,
    };
    if kind == ModelKind::M1A {
        let flags = ds.trial_flags().expect("indicator present");
        for name in &covariates {
            let c = ds.try_column(name)?;
            if (0..ds.n_rows()).any(|r| flags[r] && !c.observed()[r]) {
                return Err(MiceError::M1aNotApplicable(name.clone()));
            }
        }
    }
    let rows = scope_rows(ds, row_scope)?;

    let mut analysis: Vec<String> = covariates.clone();
    let mut derived = Vec::new();
    if matches!(kind, ModelKind::M2 | ModelKind::M3A | ModelKind::M3B) {
        let a = ds.require_role(ColumnRole::Treatment)?.name.clone();
        let y = ds.require_role(ColumnRole::Outcome)?.name.clone();
        analysis.extend([s.clone(), a.clone(), y]);
        if matches!(kind, ModelKind::M3A | ModelKind::M3B) {
            let mode = if kind == ModelKind::M3A {
                DerivedMode::Active
            } else {
                DerivedMode::Passive
            };
            let chosen = opts.interactions.clone().unwrap_or_else(|| covariates.clone());
            for cov in chosen {
                if !covariates.contains(&cov) {
                    return Err(MiceError::InvalidSpec(format!(
                        "interaction covariate `{cov}` is not a covariate"
                    )));
                }
                derived.push(DerivedSpec {
                    out: format!("{cov}{a}"),
                    a: cov,
                    b: a.clone(),
                    mode,
                });
            }
        }
    }

    let is_source_of = |var: &str, d: &DerivedSpec| d.a == var || d.b == var;
    let mut models = Vec::new();
    for var in &analysis {
        if masked_in(ds, var, &rows) == 0 {
            continue;
        }
        let mut predictors: Vec<String> = analysis.iter().filter(|v| *v != var).cloned().collect();
        predictors.extend(derived.iter().filter(|d| !is_source_of(var, d)).map(|d| d.out.clone()));
        models.push(ColumnModel {
            target: var.clone(),
            predictors,
            method: method_for(ds, var),
            donor_k: opts.donor_k,
        });
    }
    models.sort_by_key(|m| masked_in(ds, &m.target, &rows));

    for d in derived.iter().filter(|d| d.mode == DerivedMode::Active) {
        let mask_count = {
            let (ca, cb) = (ds.try_column(&d.a)?, ds.try_column(&d.b)?);
            rows.iter()
                .filter(|&&r| !(ca.observed()[r] && cb.observed()[r]))
                .count()
        };
        if mask_count == 0 {
            continue;
        }
        let mut predictors = analysis.clone();
        predictors.extend(derived.iter().filter(|o| o.out != d.out).map(|o| o.out.clone()));
        models.push(ColumnModel {
            target: d.out.clone(),
            predictors,
            method: Method::Pmm,
            donor_k: opts.donor_k,
        });
    }

    let m = match opts.m_rule {
        MRule::PercentMissing => percent_missing_m(ds),
        MRule::Explicit(k) => k.max(1),
    };
    Ok(ImputationSpec {
        row_scope,
        column_models: models,
        derived,
        m,
        maxit: opts.maxit,
        seed: opts.seed,
    })
}

impl ImputationSpec {
    /// Checks the spec against a dataset that already carries every derived
    /// column.
    fn validate(&self, ds: &Dataset, rows: &[usize]) -> Result<(), MiceError> {
        let bad = |msg: String| Err(MiceError::InvalidSpec(msg));
        if self.maxit == 0 {
            return bad("maxit must be positive".into());
        }
        for (i, model) in self.column_models.iter().enumerate() {
            let target = ds.try_column(&model.target)?;
            if model.predictors.contains(&model.target) {
                return bad(format!("`{}` predicts itself", model.target));
            }
            if self.column_models[..i].iter().any(|o| o.target == model.target) {
                return bad(format!("`{}` has two models", model.target));
            }
            if self.derived.iter().any(|d| d.out == model.target && d.mode == DerivedMode::Passive) {
                return bad(format!("passive column `{}` cannot have a model", model.target));
            }
            if model.method == Method::Logistic && !target.is_binary() {
                return bad(format!("logistic model on non-binary `{}`", model.target));
            }
            if model.method == Method::Pmm && model.donor_k == 0 {
                return bad("donor_k must be positive".into());
            }
            for p in &model.predictors {
                ds.try_column(p)?;
                let masked = masked_in(ds, p, rows) > 0;
                let modeled = self.column_models.iter().any(|o| &o.target == p);
                let passive = self.derived.iter().any(|d| &d.out == p && d.mode == DerivedMode::Passive);
                if masked && !modeled && !passive {
                    return bad(format!(
                        "predictor `{p}` of `{}` has missing entries but no model",
                        model.target
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Fits a linear model on the observed rows and fills the masked rows by
/// predictive mean matching with `donor_k` donors and posterior parameter
/// draws. Returns the target with masked entries replaced.
pub fn pmm_impute<R: Rng + ?Sized>(
    target: &[f64],
    predictors: &DesignMatrix,
    observed: &[bool],
    donor_k: usize,
    rng: &mut R,
) -> Result<Vec<f64>, MiceError> {
    pmm_impute_with(target, predictors, observed, donor_k, &ParamDraw::Posterior, rng)
}

fn split_rows(observed: &[bool]) -> (Vec<usize>, Vec<usize>) {
    (0..observed.len()).partition(|&i| observed[i])
}

pub fn pmm_impute_with<R: Rng + ?Sized>(
    target: &[f64],
    predictors: &DesignMatrix,
    observed: &[bool],
    donor_k: usize,
    draw: &ParamDraw,
    rng: &mut R,
) -> Result<Vec<f64>, MiceError> {
    let (obs, mis) = split_rows(observed);
    let x_obs = select_design_rows(predictors, &obs);
    let x_mis = select_design_rows(predictors, &mis);
    let y_obs: Vec<f64> = obs.iter().map(|&i| target[i]).collect();
    let filled = pmm_fill(&y_obs, &x_obs, &x_mis, donor_k, draw, rng, "target")?;
    let mut out = target.to_vec();
    for (&row, v) in mis.iter().zip(filled) {
        out[row] = v;
    }
    Ok(out)
}

fn select_design_rows(x: &DesignMatrix, rows: &[usize]) -> DesignMatrix {
    let p = x.ncols();
    let cols: Vec<Vec<f64>> = (1..p).map(|j| rows.iter().map(|&r| x.row(r)[j]).collect()).collect();
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    if refs.is_empty() {
        return DesignMatrix::intercept(rows.len());
    }
    DesignMatrix::new(x.names().to_vec(), &refs).expect("consistent shapes")
}

fn coefficients<R: Rng + ?Sized>(
    fit: &glm::GlmFit,
    draw: &ParamDraw,
    rng: &mut R,
) -> Result<Vec<f64>, GlmError> {
    match draw {
        ParamDraw::Posterior => Ok(draw_coef(fit, rng)?.coef),
        ParamDraw::PointEstimate => Ok(fit.coef.clone()),
        ParamDraw::Fixed(c) => {
            if c.len() != fit.coef.len() {
                return Err(GlmError::LengthMismatch {
                    what: "fixed coefficients",
                    expected: fit.coef.len(),
                    found: c.len(),
                });
            }
            Ok(c.clone())
        }
    }
}

/// Indices of the `k` entries of `sorted` (ascending by key) nearest to
/// `value`. Equal distances prefer the lower side.
pub(crate) fn nearest_k(sorted_keys: &[f64], value: f64, k: usize) -> Vec<usize> {
    let n = sorted_keys.len();
    let pos = sorted_keys.partition_point(|&v| v < value);
    let (mut lo, mut hi) = (pos, pos); // candidates: lo-1 downward, hi upward
    let mut out = Vec::with_capacity(k);
    while out.len() < k && (lo > 0 || hi < n) {
        let take_low = match (lo > 0, hi < n) {
            (true, true) => value - sorted_keys[lo - 1] <= sorted_keys[hi] - value,
            (true, false) => true,
            _ => false,
        };
        if take_low {
            lo -= 1;
            out.push(lo);
        } else {
            out.push(hi);
            hi += 1;
        }
    }
    out
}

fn pmm_fill<R: Rng + ?Sized>(
    y_obs: &[f64],
    x_obs: &DesignMatrix,
    x_mis: &DesignMatrix,
    donor_k: usize,
    draw: &ParamDraw,
    rng: &mut R,
    column: &str,
) -> Result<Vec<f64>, MiceError> {
    if y_obs.len() < donor_k.max(1) {
        return Err(MiceError::TooFewObserved {
            column: column.to_string(),
            observed: y_obs.len(),
            needed: donor_k.max(1),
        });
    }
    if x_mis.nrows() == 0 {
        return Ok(Vec::new());
    }
    let fit = fit_wls_with(x_obs, y_obs, None, false)?;
    let beta_star = coefficients(&fit, draw, rng)?;
    let yhat_obs = &fit.fitted;
    let yhat_mis = x_mis.mul_vec(&beta_star);

    let mut pairs: Vec<(f64, usize)> = yhat_obs.iter().copied().zip(0..).collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (keys, order): (Vec<f64>, Vec<usize>) = pairs.into_iter().unzip();
    Ok(yhat_mis
        .iter()
        .map(|&v| {
            let donors = nearest_k(&keys, v, donor_k);
            let pick = donors[rng.random_range(0..donors.len())];
            y_obs[order[pick]]
        })
        .collect())
}

/// Fits a logistic model on the observed rows and fills the masked rows
/// with Bernoulli draws under posterior coefficient draws.
pub fn logistic_impute<R: Rng + ?Sized>(
    target: &[f64],
    predictors: &DesignMatrix,
    observed: &[bool],
    rng: &mut R,
) -> Result<Vec<f64>, MiceError> {
    logistic_impute_with(target, predictors, observed, &ParamDraw::Posterior, rng)
}

pub fn logistic_impute_with<R: Rng + ?Sized>(
    target: &[f64],
    predictors: &DesignMatrix,
    observed: &[bool],
    draw: &ParamDraw,
    rng: &mut R,
) -> Result<Vec<f64>, MiceError> {
    let (obs, mis) = split_rows(observed);
    let x_obs = select_design_rows(predictors, &obs);
    let x_mis = select_design_rows(predictors, &mis);
    let y_obs: Vec<f64> = obs.iter().map(|&i| target[i]).collect();
    let filled = logistic_fill(&y_obs, &x_obs, &x_mis, draw, rng)?;
    let mut out = target.to_vec();
    for (&row, v) in mis.iter().zip(filled) {
        out[row] = v;
    }
    Ok(out)
}

fn logistic_fill<R: Rng + ?Sized>(
    y_obs: &[f64],
    x_obs: &DesignMatrix,
    x_mis: &DesignMatrix,
    draw: &ParamDraw,
    rng: &mut R,
) -> Result<Vec<f64>, MiceError> {
    if x_mis.nrows() == 0 {
        return Ok(Vec::new());
    }
    let fit = fit_logistic_with(x_obs, y_obs, None, false)?;
    let beta = coefficients(&fit, draw, rng)?;
    Ok(x_mis
        .mul_vec(&beta)
        .into_iter()
        .map(|eta| if rng.random::<f64>() < expit(eta) { 1.0 } else { 0.0 })
        .collect())
}

/// Per-chain working state: current values of every column.
struct Chain<'a> {
    ds: &'a Dataset,
    values: Vec<Vec<f64>>,
    index: std::collections::HashMap<&'a str, usize>,
}

impl<'a> Chain<'a> {
    fn new(ds: &'a Dataset) -> Self {
        Chain {
            ds,
            values: ds.columns().iter().map(|c| c.values().to_vec()).collect(),
            index: ds.names().enumerate().map(|(i, n)| (n, i)).collect(),
        }
    }

    fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    fn observed(&self, name: &str) -> &[bool] {
        self.ds.columns()[self.idx(name)].observed()
    }

    fn design(&self, predictors: &[String], rows: &[usize]) -> DesignMatrix {
        let cols: Vec<Vec<f64>> = predictors
            .iter()
            .map(|p| {
                let v = &self.values[self.idx(p)];
                rows.iter().map(|&r| v[r]).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        if refs.is_empty() {
            DesignMatrix::intercept(rows.len())
        } else {
            DesignMatrix::new(predictors.to_vec(), &refs).expect("consistent shapes")
        }
    }

    fn recompute_passive(&mut self, d: &DerivedSpec, rows: &[usize]) {
        let (ia, ib, io) = (self.idx(&d.a), self.idx(&d.b), self.idx(&d.out));
        let obs = self.ds.columns()[io].observed();
        for &r in rows {
            if !obs[r] {
                self.values[io][r] = self.values[ia][r] * self.values[ib][r];
            }
        }
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

fn run_chain(
    ds: &Dataset,
    spec: &ImputationSpec,
    rows: &[usize],
    chain_idx: usize,
) -> Result<(Dataset, Vec<ChainLogEntry>), MiceError> {
    let mut rng = streams::stream(spec.seed, &[chain_idx as u64]);
    let mut chain = Chain::new(ds);
    let mut log = Vec::new();

    struct Prepared {
        obs: Vec<usize>,
        mis: Vec<usize>,
    }
    let prepared: Vec<Prepared> = spec
        .column_models
        .iter()
        .map(|m| {
            let o = chain.observed(&m.target);
            let (obs, mis): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| o[r]);
            Prepared { obs, mis }
        })
        .collect();

    // Start from random draws of each column's observed values.
    for (model, prep) in spec.column_models.iter().zip(&prepared) {
        if prep.mis.is_empty() {
            continue;
        }
        if prep.obs.is_empty() {
            return Err(MiceError::TooFewObserved {
                column: model.target.clone(),
                observed: 0,
                needed: 1,
            });
        }
        let j = chain.idx(&model.target);
        for &r in &prep.mis {
            let donor = prep.obs[rng.random_range(0..prep.obs.len())];
            chain.values[j][r] = chain.values[j][donor];
        }
    }
    let passive: Vec<&DerivedSpec> = spec
        .derived
        .iter()
        .filter(|d| d.mode == DerivedMode::Passive)
        .collect();
    for d in &passive {
        chain.recompute_passive(d, rows);
    }

    for iteration in 1..=spec.maxit {
        for (model, prep) in spec.column_models.iter().zip(&prepared) {
            if prep.mis.is_empty() {
                continue;
            }
            let wrap = |source: GlmError| MiceError::ColumnFit {
                chain: chain_idx,
                column: model.target.clone(),
                iteration,
                source,
            };
            let x_obs_full = chain.design(&model.predictors, &prep.obs);
            let keep = glm::independent_columns(&x_obs_full, &vec![1.0; prep.obs.len()]);
            let x_obs = x_obs_full.subset_columns(&keep);
            let x_mis = chain.design(&model.predictors, &prep.mis).subset_columns(&keep);
            let j = chain.idx(&model.target);
            let y_obs: Vec<f64> = prep.obs.iter().map(|&r| chain.values[j][r]).collect();
            let filled = match model.method {
                Method::Pmm => pmm_fill(
                    &y_obs,
                    &x_obs,
                    &x_mis,
                    model.donor_k,
                    &ParamDraw::Posterior,
                    &mut rng,
                    &model.target,
                ),
                Method::Logistic => logistic_fill(&y_obs, &x_obs, &x_mis, &ParamDraw::Posterior, &mut rng),
            }
            .map_err(|e| match e {
                MiceError::Glm(g) => wrap(g),
                other => other,
            })?;
            for (&r, &v) in prep.mis.iter().zip(&filled) {
                chain.values[j][r] = v;
            }
            for d in passive.iter().filter(|d| d.a == model.target || d.b == model.target) {
                chain.recompute_passive(d, rows);
            }
            let (mean, sd) = mean_sd(&filled);
            log.push(ChainLogEntry {
                chain: chain_idx,
                iteration,
                column: model.target.clone(),
                mean,
                sd,
            });
        }
    }

    // Completed dataset: every imputed column becomes observed on scope rows.
    let mut out = ds.clone();
    let mut touched: Vec<&str> = spec.column_models.iter().map(|m| m.target.as_str()).collect();
    touched.extend(passive.iter().map(|d| d.out.as_str()));
    for name in touched {
        let j = chain.idx(name);
        let mut observed = ds.columns()[j].observed().to_vec();
        for &r in rows {
            observed[r] = true;
        }
        out = out.with_column_data(name, std::mem::take(&mut chain.values[j]), observed)?;
    }
    Ok((out, log))
}

/// Runs `spec.m` independent chains of `spec.maxit` sweeps each. Derived
/// columns named in the spec are added to the data when absent.
pub fn impute(ds: &Dataset, spec: &ImputationSpec) -> Result<ImputedSet, MiceError> {
    let mut base = ds.clone();
    for d in &spec.derived {
        if base.column(&d.out).is_none() {
            base = base.add_derived_product(&d.a, &d.b, &d.out)?;
        }
    }
    let rows = scope_rows(&base, spec.row_scope)?;
    spec.validate(&base, &rows)?;
    if spec.m == 0 {
        return Err(MiceError::InvalidSpec("m must be positive".into()));
    }

    let results: Vec<Result<(Dataset, Vec<ChainLogEntry>), MiceError>> = (0..spec.m)
        .into_par_iter()
        .map(|c| run_chain(&base, spec, &rows, c))
        .collect();
    let mut datasets = Vec::with_capacity(spec.m);
    let mut chain_log = Vec::new();
    for r in results {
        let (d, log) = r?;
        datasets.push(d);
        chain_log.extend(log);
    }
    Ok(ImputedSet {
        datasets,
        spec: spec.clone(),
        chain_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::build_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::collections::HashMap;

    fn design1(x: &[f64]) -> DesignMatrix {
        DesignMatrix::new(vec!["x".into()], &[x]).unwrap()
    }

    #[test]
    fn nearest_k_picks_closest() {
        let keys = [0.0, 1.0, 2.0, 3.0, 10.0];
        let mut got = nearest_k(&keys, 2.2, 3);
        got.sort();
        assert_eq!(got, vec![1, 2, 3]);
        let mut got = nearest_k(&keys, 100.0, 2);
        got.sort();
        assert_eq!(got, vec![3, 4]);
        assert_eq!(nearest_k(&keys, -5.0, 1), vec![0]);
    }

    #[test]
    fn pmm_single_donor_exact_match() {
        // y = 2x exactly on observed rows; masked row has x = 2 -> yhat 4,
        // which coincides with observed row 2.
        let x = [0.0, 1.0, 2.0, 3.0, 2.0];
        let y = [0.0, 2.0, 4.0, 6.0, 0.0];
        let observed = [true, true, true, true, false];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = pmm_impute_with(&y, &design1(&x), &observed, 1, &ParamDraw::PointEstimate, &mut rng).unwrap();
        assert_eq!(out[4], 4.0);
    }

    #[test]
    fn pmm_constant_target() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let y = [3.5, 3.5, 3.5, 3.5, 3.5, 3.5, 0.0, 0.0];
        let observed = [true, true, true, true, true, true, false, false];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = pmm_impute(&y, &design1(&x), &observed, 5, &mut rng).unwrap();
        assert_eq!(&out[6..], &[3.5, 3.5]);
    }

    #[test]
    fn pmm_requires_enough_donors() {
        let x = [0.0, 1.0, 2.0];
        let err = pmm_impute(&[1.0, 2.0, 0.0], &design1(&x), &[true, true, false], 5, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, MiceError::TooFewObserved { .. }));
    }

    #[test]
    fn logistic_impute_fixed_zero_slope() {
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let observed: Vec<bool> = (0..n).map(|i| i < 1000).collect();
        let out = logistic_impute_with(&y, &design1(&x), &observed, &ParamDraw::Fixed(vec![0.0, 0.0]), &mut rng).unwrap();
        let rate = out[1000..].iter().sum::<f64>() / 3000.0;
        // expit(0) = 0.5, SE = sqrt(.25/3000) ~ 0.0091
        assert!((rate - 0.5).abs() < 4.0 * 0.0092, "{rate}");
    }

    #[test]
    fn logistic_impute_single_class_errors() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let err = logistic_impute(&[1.0, 1.0, 1.0, 0.0], &design1(&x), &[true, true, true, false], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, MiceError::Glm(GlmError::SingleClass)));
    }

    fn sim_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: HashMap<&str, Vec<f64>> = HashMap::new();
        let x1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let s: Vec<f64> = (0..n).map(|i| (i % 5 == 0) as u8 as f64).collect();
        let a: Vec<f64> = (0..n)
            .map(|i| if s[i] == 1.0 { (rng.random::<f64>() < 0.5) as u8 as f64 } else { f64::NAN })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| if s[i] == 1.0 { x1[i] + x2[i] + a[i] * (1.0 + x1[i]) + rng.sample::<f64, _>(StandardNormal) } else { f64::NAN })
            .collect();
        let x1m: Vec<f64> = (0..n).map(|i| if i % 3 == 1 { f64::NAN } else { x1[i] }).collect();
        cols.insert("X1", x1m);
        cols.insert("X2", x2);
        cols.insert("S", s);
        cols.insert("A", a);
        cols.insert("Y", y);
        let roles: HashMap<String, ColumnRole> = [
            ("X1", ColumnRole::Covariate),
            ("X2", ColumnRole::Covariate),
            ("S", ColumnRole::TrialIndicator),
            ("A", ColumnRole::Treatment),
            ("Y", ColumnRole::Outcome),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let order = ["X1", "X2", "S", "A", "Y"];
        build_dataset(order.iter().map(|k| (k.to_string(), cols.remove(k).unwrap())).collect(), &roles).unwrap()
    }

    #[test]
    fn build_spec_shapes() {
        let ds = sim_dataset(300, 1);
        let opts = SpecOptions {
            m_rule: MRule::Explicit(3),
            ..Default::default()
        };
        let m1b = build_spec(ModelKind::M1B, &ds, &opts).unwrap();
        assert_eq!(m1b.column_models.len(), 1);
        assert_eq!(m1b.column_models[0].predictors, vec!["X2".to_string()]);

        let m2 = build_spec(ModelKind::M2, &ds, &opts).unwrap();
        let targets: Vec<&str> = m2.column_models.iter().map(|m| m.target.as_str()).collect();
        assert_eq!(targets, vec!["X1", "A", "Y"]);
        assert_eq!(m2.column_models[1].method, Method::Logistic);

        let m3a = build_spec(ModelKind::M3A, &ds, &opts).unwrap();
        let x1 = &m3a.column_models[0];
        assert!(x1.predictors.contains(&"X2A".to_string()));
        assert!(!x1.predictors.contains(&"X1A".to_string()));
        let a_model = m3a.column_models.iter().find(|m| m.target == "A").unwrap();
        assert!(!a_model.predictors.iter().any(|p| p.ends_with('A')));
        assert_eq!(m3a.column_models.last().unwrap().target, "X2A");

        let m3b = build_spec(ModelKind::M3B, &ds, &opts).unwrap();
        assert!(m3b.column_models.iter().all(|m| !m.target.ends_with("A") || m.target == "A"));

        // X1 is masked on trial rows too.
        let err = build_spec(ModelKind::M1A, &ds, &opts).unwrap_err();
        assert!(err.to_string().contains("M1A is only applicable"));
    }

    #[test]
    fn percent_rule_for_m() {
        let ds = sim_dataset(300, 1);
        // rows with i % 3 == 1 -> 100 of 300
        assert_eq!(percent_missing_m(&ds), 33);
    }

    #[test]
    fn impute_preserves_observed_and_passive_identity() {
        let ds = sim_dataset(400, 2);
        let opts = SpecOptions {
            m_rule: MRule::Explicit(3),
            seed: 5,
            ..Default::default()
        };
        let spec = build_spec(ModelKind::M3B, &ds, &opts).unwrap();
        let set = impute(&ds, &spec).unwrap();
        assert_eq!(set.datasets.len(), 3);
        for out in &set.datasets {
            for col in ds.columns() {
                let oc = out.column(&col.name).unwrap();
                for r in 0..ds.n_rows() {
                    if col.observed()[r] {
                        assert_eq!(oc.values()[r], col.values()[r]);
                    }
                    assert!(oc.observed()[r]);
                }
            }
            let x1 = out.column("X1").unwrap().values();
            let a = out.column("A").unwrap().values();
            let x1a = out.column("X1A").unwrap().values();
            for r in 0..ds.n_rows() {
                assert_eq!(x1a[r], x1[r] * a[r]);
            }
        }
        let again = impute(&ds, &spec).unwrap();
        assert_eq!(set.datasets, again.datasets);
    }

    #[test]
    fn zero_missing_gives_identical_copies() {
        let ds = sim_dataset(200, 3);
        let full = ds.clone().drop_column("A").unwrap().drop_column("Y").unwrap();
        let full = full
            .clone()
            .with_column_data("X1", vec![0.5; 200], vec![true; 200])
            .unwrap();
        let spec = build_spec(
            ModelKind::M1B,
            &full,
            &SpecOptions {
                m_rule: MRule::Explicit(4),
                ..Default::default()
            },
        )
        .unwrap();
        let set = impute(&full, &spec).unwrap();
        assert!(set.datasets.iter().all(|d| d == &full));
    }

    #[test]
    fn chain_log_csv() {
        let ds = sim_dataset(200, 4);
        let spec = build_spec(
            ModelKind::M1B,
            &ds,
            &SpecOptions {
                m_rule: MRule::Explicit(2),
                ..Default::default()
            },
        )
        .unwrap();
        let set = impute(&ds, &spec).unwrap();
        assert_eq!(set.chain_log.len(), 2 * DEFAULT_MAXIT);
        let mut buf = Vec::new();
        set.write_chain_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("chain,iteration,column,mean,sd\n"));
        assert_eq!(text.lines().count(), 11);
    }
}
