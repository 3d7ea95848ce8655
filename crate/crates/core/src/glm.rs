//! Logistic regression by IRLS, weighted least squares, HC0 sandwich
//! covariance, and approximate-posterior coefficient draws.
//!
//! Design matrices always carry an implicit leading intercept column, so a
//! fit on `k` named predictors has `k + 1` coefficients.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use thiserror::Error;

use crate::tabular::{Dataset, TableError};

const MAX_IRLS_ITER: usize = 50;
const SCORE_TOL: f64 = 1e-8;
const DEVIANCE_TOL: f64 = 1e-10;
const SEPARATION_COEF: f64 = 30.0;
const RIDGE: f64 = 1e-8;
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("response is not binary at row {0}")]
    NotBinary(usize),
    #[error("response has a single class")]
    SingleClass,
    #[error("complete separation: coefficients diverge (max |coef| {max_coef:.1} after {iterations} iterations)")]
    Separation { iterations: usize, max_coef: f64 },
    #[error("rank deficient design: column `{0}` is collinear with earlier columns")]
    RankDeficient(String),
    #[error("no rows with positive weight")]
    NoSupport,
    #[error("invalid weight {value} at row {row}")]
    BadWeight { row: usize, value: f64 },
    #[error("length mismatch: {what} has {found} entries, design has {expected} rows")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("column `{column}` is masked at row {row}")]
    MaskedEntry { column: String, row: usize },
    #[error("predictor mismatch: fit uses {expected:?}, design has {found:?}")]
    PredictorMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("operation requires a {0:?} fit")]
    WrongFamily(Family),
    #[error("fit did not converge")]
    NotConverged,
    #[error("{0}")]
    Table(String),
}

impl From<TableError> for GlmError {
    fn from(e: TableError) -> Self {
        GlmError::Table(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Logistic,
    Linear,
}

/// Row-major design with a leading intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    /// `columns[j]` holds the values of predictor `names[j]`.
    pub fn new(names: Vec<String>, columns: &[&[f64]]) -> Result<Self, GlmError> {
        let nrows = columns.first().map_or(0, |c| c.len());
        if names.len() != columns.len() {
            return Err(GlmError::LengthMismatch {
                what: "names",
                expected: columns.len(),
                found: names.len(),
            });
        }
        for c in columns {
            if c.len() != nrows {
                return Err(GlmError::LengthMismatch {
                    what: "predictor column",
                    expected: nrows,
                    found: c.len(),
                });
            }
        }
        let ncols = names.len() + 1;
        let mut data = Vec::with_capacity(nrows * ncols);
        for i in 0..nrows {
            data.push(1.0);
            data.extend(columns.iter().map(|c| c[i]));
        }
        Ok(DesignMatrix {
            names,
            nrows,
            ncols,
            data,
        })
    }

    /// Intercept-only design.
    pub fn intercept(nrows: usize) -> Self {
        DesignMatrix {
            names: Vec::new(),
            nrows,
            ncols: 1,
            data: vec![1.0; nrows],
        }
    }

    /// Builds the design from dataset columns restricted to `rows`. Every
    /// selected entry must be observed.
    pub fn from_dataset(ds: &Dataset, predictors: &[String], rows: &[usize]) -> Result<Self, GlmError> {
        let cols = predictors
            .iter()
            .map(|name| ds.try_column(name))
            .collect::<Result<Vec<_>, _>>()?;
        let ncols = cols.len() + 1;
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for &r in rows {
            data.push(1.0);
            for c in &cols {
                if !c.observed()[r] {
                    return Err(GlmError::MaskedEntry {
                        column: c.name.clone(),
                        row: r,
                    });
                }
                data.push(c.values()[r]);
            }
        }
        Ok(DesignMatrix {
            names: predictors.to_vec(),
            nrows: rows.len(),
            ncols,
            data,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    /// Number of columns including the intercept.
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.nrows).map(|i| dot(self.row(i), beta)).collect()
    }

    fn column_label(&self, j: usize) -> String {
        if j == 0 {
            "(Intercept)".to_string()
        } else {
            self.names[j - 1].clone()
        }
    }

    /// Keeps the intercept plus the named predictors at positions `keep`
    /// (indices into the full column list, 0 = intercept).
    pub(crate) fn subset_columns(&self, keep: &[usize]) -> DesignMatrix {
        let ncols = keep.len();
        let mut data = Vec::with_capacity(self.nrows * ncols);
        for i in 0..self.nrows {
            let row = self.row(i);
            data.extend(keep.iter().map(|&j| row[j]));
        }
        DesignMatrix {
            names: keep.iter().filter(|&&j| j > 0).map(|&j| self.names[j - 1].clone()).collect(),
            nrows: self.nrows,
            ncols,
            data,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Symmetric `X' diag(w) X`, stored densely row-major.
fn cross_product(x: &DesignMatrix, w: &[f64]) -> Vec<f64> {
    let p = x.ncols;
    let mut a = vec![0.0; p * p];
    for i in 0..x.nrows {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let r = x.row(i);
        for j in 0..p {
            let wj = wi * r[j];
            for (slot, &rk) in a[j * p..j * p + j + 1].iter_mut().zip(r) {
                *slot += wj * rk;
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[k * p + j] = a[j * p + k];
        }
    }
    a
}

/// Cholesky factor that skips (zeroes) columns whose residual pivot falls
/// below `tol` relative to their diagonal. Returns the factor and the set of
/// retained columns.
pub(crate) fn cholesky_skipping(a: &[f64], p: usize, tol: f64) -> (Vec<f64>, Vec<bool>) {
    let mut l = vec![0.0; p * p];
    let mut keep = vec![true; p];
    for j in 0..p {
        let ajj = a[j * p + j];
        let mut d = ajj;
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(ajj > 0.0) || !(d > tol * ajj) {
            keep[j] = false;
            continue;
        }
        let ljj = d.sqrt();
        l[j * p + j] = ljj;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / ljj;
        }
    }
    (l, keep)
}

fn chol_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..p {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l[k * p + i] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    y
}

fn chol_inverse(l: &[f64], p: usize) -> DMatrix<f64> {
    let mut inv = DMatrix::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = chol_solve(l, p, &e);
        for i in 0..p {
            inv[(i, j)] = col[i];
        }
    }
    symmetrize(inv)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Factorizes a symmetric matrix, failing with the first collinear column.
fn factor_or_rank_error(a: &[f64], x: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    let p = x.ncols;
    let (l, keep) = cholesky_skipping(a, p, PIVOT_TOL);
    match keep.iter().position(|k| !k) {
        Some(j) => Err(GlmError::RankDeficient(x.column_label(j))),
        None => Ok(l),
    }
}

/// Indices (0 = intercept) of a maximal linearly independent prefix-greedy
/// set of design columns over the weighted rows.
pub(crate) fn independent_columns(x: &DesignMatrix, w: &[f64]) -> Vec<usize> {
    let a = cross_product(x, w);
    let (_, keep) = cholesky_skipping(&a, x.ncols, 1e-8);
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| j).collect()
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub family: Family,
    /// Predictor names, excluding the intercept.
    pub predictors: Vec<String>,
    pub coef: Vec<f64>,
    pub cov_model: DMatrix<f64>,
    pub cov_robust: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Prior weights, when supplied.
    pub weights_used: Option<Vec<f64>>,
    /// Fitted means (probabilities for the logistic family).
    pub fitted: Vec<f64>,
    /// Response residuals `y - fitted`.
    pub residuals: Vec<f64>,
    /// Residual variance estimate (1 for logistic).
    pub sigma2: f64,
    pub df_resid: usize,
    pub deviance: f64,
    /// Whether the ridge fallback was needed to invert the information.
    pub ridge_applied: bool,
}

impl GlmFit {
    pub fn model_se(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|j| self.cov_model[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn robust_se(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|j| self.cov_robust[(j, j)].max(0.0).sqrt()).collect()
    }

    fn check_names(&self, x: &DesignMatrix) -> Result<(), GlmError> {
        if self.predictors != x.names {
            return Err(GlmError::PredictorMismatch {
                expected: self.predictors.clone(),
                found: x.names.clone(),
            });
        }
        Ok(())
    }

    pub fn linear_predictor(&self, x: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
        self.check_names(x)?;
        Ok(x.mul_vec(&self.coef))
    }
}

fn resolve_weights(n: usize, w: Option<&[f64]>) -> Result<Vec<f64>, GlmError> {
    match w {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(GlmError::LengthMismatch {
                    what: "weights",
                    expected: n,
                    found: w.len(),
                });
            }
            if let Some((row, &value)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(GlmError::BadWeight { row, value });
            }
            if !w.iter().any(|&v| v > 0.0) {
                return Err(GlmError::NoSupport);
            }
            Ok(w.to_vec())
        }
    }
}

fn check_len(what: &'static str, x: &DesignMatrix, len: usize) -> Result<(), GlmError> {
    if len != x.nrows {
        return Err(GlmError::LengthMismatch {
            what,
            expected: x.nrows,
            found: len,
        });
    }
    Ok(())
}

fn logistic_deviance(y: &[f64], eta: &[f64], w: &[f64]) -> f64 {
    -2.0 * y
        .iter()
        .zip(eta)
        .zip(w)
        .map(|((&yi, &e), &wi)| {
            if wi == 0.0 {
                0.0
            } else {
                // log-likelihood y*eta - log(1 + e^eta), computed stably
                wi * (yi * e - softplus(e))
            }
        })
        .sum::<f64>()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted logistic log-likelihood at `beta`.
pub fn logistic_loglik(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>, beta: &[f64]) -> f64 {
    let w = w.map_or_else(|| vec![1.0; x.nrows], <[f64]>::to_vec);
    -0.5 * logistic_deviance(y, &x.mul_vec(beta), &w)
}

/// Gradient of [`logistic_loglik`]: `X' diag(w) (y - mu)`.
pub fn logistic_score(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>, beta: &[f64]) -> Vec<f64> {
    let p = x.ncols;
    let mut g = vec![0.0; p];
    for i in 0..x.nrows {
        let wi = w.map_or(1.0, |w| w[i]);
        let r = x.row(i);
        let resid = wi * (y[i] - expit(dot(r, beta)));
        for j in 0..p {
            g[j] += resid * r[j];
        }
    }
    g
}

/// HC0 sandwich `B^-1 M B^-1` with bread `B = X' diag(w v) X` (v the
/// variance function at the fitted mean) and meat `M = sum (w_i e_i)^2 x_i x_i'`.
/// Weights are treated as fixed.
pub fn sandwich_cov(fit: &GlmFit, x: &DesignMatrix) -> Result<DMatrix<f64>, GlmError> {
    fit.check_names(x)?;
    check_len("residuals", x, fit.residuals.len())?;
    let n = x.nrows;
    let prior = fit.weights_used.clone().unwrap_or_else(|| vec![1.0; n]);
    let bread_w: Vec<f64> = match fit.family {
        Family::Linear => prior.clone(),
        Family::Logistic => prior
            .iter()
            .zip(&fit.fitted)
            .map(|(w, m)| w * m * (1.0 - m))
            .collect(),
    };
    let meat_w: Vec<f64> = prior
        .iter()
        .zip(&fit.residuals)
        .map(|(w, e)| (w * e) * (w * e))
        .collect();
    let bread = cross_product(x, &bread_w);
    let (l, keep) = cholesky_skipping(&bread, x.ncols, 0.0);
    let l = if keep.iter().all(|&k| k) {
        l
    } else {
        let mut ridged = bread.clone();
        for j in 0..x.ncols {
            ridged[j * x.ncols + j] += RIDGE;
        }
        cholesky_skipping(&ridged, x.ncols, 0.0).0
    };
    let bread_inv = chol_inverse(&l, x.ncols);
    let meat = DMatrix::from_row_slice(x.ncols, x.ncols, &cross_product(x, &meat_w));
    Ok(symmetrize(&bread_inv * meat * &bread_inv))
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares. Converges when the largest score component drops below 1e-8 or
/// the relative deviance change below 1e-10, within 50 iterations.
pub fn fit_logistic(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>) -> Result<GlmFit, GlmError> {
    fit_logistic_with(x, y, w, true)
}

pub(crate) fn fit_logistic_with(
    x: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
    robust: bool,
) -> Result<GlmFit, GlmError> {
    check_len("response", x, y.len())?;
    let prior = resolve_weights(x.nrows, w)?;
    let mut ones = 0.0;
    let mut total = 0.0;
    for (i, (&yi, &wi)) in y.iter().zip(&prior).enumerate() {
        if yi != 0.0 && yi != 1.0 {
            return Err(GlmError::NotBinary(i));
        }
        if wi > 0.0 {
            ones += yi;
            total += 1.0;
        }
    }
    if ones == 0.0 || ones == total {
        return Err(GlmError::SingleClass);
    }
    factor_or_rank_error(&cross_product(x, &prior), x)?;

    let p = x.ncols;
    let n = x.nrows;
    let mut beta = vec![0.0; p];
    let mut eta = vec![0.0; n];
    let mut dev = logistic_deviance(y, &eta, &prior);
    let mut converged = false;
    let mut ridge_applied = false;
    let mut iterations = 0;
    let mut work_w = vec![0.0; n];

    while iterations < MAX_IRLS_ITER {
        iterations += 1;
        let mut score = vec![0.0; p];
        for i in 0..n {
            let mu = expit(eta[i]);
            work_w[i] = prior[i] * mu * (1.0 - mu);
            let r = x.row(i);
            let resid = prior[i] * (y[i] - mu);
            for j in 0..p {
                score[j] += resid * r[j];
            }
        }
        if score.iter().all(|g| g.abs() < SCORE_TOL) {
            converged = true;
            iterations -= 1;
            break;
        }
        let info = cross_product(x, &work_w);
        let (mut l, keep) = cholesky_skipping(&info, p, 1e-14);
        if keep.iter().any(|k| !k) {
            let mut ridged = info.clone();
            for j in 0..p {
                ridged[j * p + j] += RIDGE;
            }
            l = cholesky_skipping(&ridged, p, 0.0).0;
            ridge_applied = true;
        }
        let step = chol_solve(&l, p, &score);

        // Newton step with halving on deviance increase.
        let mut scale = 1.0;
        let (new_beta, new_eta, new_dev) = loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let cand_eta = x.mul_vec(&cand);
            let cand_dev = logistic_deviance(y, &cand_eta, &prior);
            if cand_dev <= dev * (1.0 + 1e-12) + 1e-12 || scale < 1e-3 {
                break (cand, cand_eta, cand_dev);
            }
            scale *= 0.5;
        };
        let rel = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        beta = new_beta;
        eta = new_eta;
        dev = new_dev;
        if rel < DEVIANCE_TOL {
            converged = true;
            break;
        }
    }

    let max_coef = beta.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
    if separates(y, &eta, &prior) || (!converged && max_coef > SEPARATION_COEF) {
        return Err(GlmError::Separation {
            iterations,
            max_coef,
        });
    }

    let fitted: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
    for i in 0..n {
        work_w[i] = prior[i] * fitted[i] * (1.0 - fitted[i]);
    }
    let info = cross_product(x, &work_w);
    let (mut l, keep) = cholesky_skipping(&info, p, 1e-14);
    if keep.iter().any(|k| !k) {
        let mut ridged = info;
        for j in 0..p {
            ridged[j * p + j] += RIDGE;
        }
        l = cholesky_skipping(&ridged, p, 0.0).0;
        ridge_applied = true;
    }
    let cov_model = chol_inverse(&l, p);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let n_support = prior.iter().filter(|&&v| v > 0.0).count();
    let mut fit = GlmFit {
        family: Family::Logistic,
        predictors: x.names.clone(),
        coef: beta,
        cov_robust: DMatrix::zeros(p, p),
        cov_model,
        iterations,
        converged,
        weights_used: w.map(<[f64]>::to_vec),
        fitted,
        residuals,
        sigma2: 1.0,
        df_resid: n_support.saturating_sub(p),
        deviance: dev,
        ridge_applied,
    };
    if robust {
        fit.cov_robust = sandwich_cov(&fit, x)?;
    }
    Ok(fit)
}

/// True when the linear predictor strictly separates the two classes, in
/// which case no finite maximum-likelihood estimate exists.
fn separates(y: &[f64], eta: &[f64], w: &[f64]) -> bool {
    let mut min_one = f64::INFINITY;
    let mut max_zero = f64::NEG_INFINITY;
    for ((&yi, &e), &wi) in y.iter().zip(eta).zip(w) {
        if wi == 0.0 {
            continue;
        }
        if yi == 1.0 {
            min_one = min_one.min(e);
        } else {
            max_zero = max_zero.max(e);
        }
    }
    min_one > max_zero
}

/// Weighted least squares `argmin sum w_i (y_i - x_i b)^2`.
pub fn fit_wls(x: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<GlmFit, GlmError> {
    fit_wls_with(x, y, Some(w), true)
}

pub(crate) fn fit_wls_with(
    x: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
    robust: bool,
) -> Result<GlmFit, GlmError> {
    check_len("response", x, y.len())?;
    let prior = resolve_weights(x.nrows, w)?;
    let p = x.ncols;
    let xtwx = cross_product(x, &prior);
    let l = factor_or_rank_error(&xtwx, x)?;

    let xtwy = |resp: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut b = vec![0.0; p];
        for i in 0..x.nrows {
            let wy = prior[i] * resp(i);
            if wy == 0.0 {
                continue;
            }
            for (bj, xj) in b.iter_mut().zip(x.row(i)) {
                *bj += wy * xj;
            }
        }
        b
    };
    let mut beta = chol_solve(&l, p, &xtwy(&|i| y[i]));
    // One step of iterative refinement on the normal equations.
    let fitted0 = x.mul_vec(&beta);
    let correction = chol_solve(&l, p, &xtwy(&|i| y[i] - fitted0[i]));
    for (b, c) in beta.iter_mut().zip(&correction) {
        *b += c;
    }

    let fitted = x.mul_vec(&beta);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let n_support = prior.iter().filter(|&&v| v > 0.0).count();
    let df_resid = n_support.saturating_sub(p);
    let rss: f64 = residuals.iter().zip(&prior).map(|(e, w)| w * e * e).sum();
    let sigma2 = if df_resid > 0 { rss / df_resid as f64 } else { 0.0 };
    let cov_model = chol_inverse(&l, p) * sigma2;
    let mut fit = GlmFit {
        family: Family::Linear,
        predictors: x.names.clone(),
        coef: beta,
        cov_model,
        cov_robust: DMatrix::zeros(p, p),
        iterations: 1,
        converged: true,
        weights_used: w.map(<[f64]>::to_vec),
        fitted,
        residuals,
        sigma2,
        df_resid,
        deviance: rss,
        ridge_applied: false,
    };
    if robust {
        fit.cov_robust = sandwich_cov(&fit, x)?;
    }
    Ok(fit)
}

pub fn predict_proba(fit: &GlmFit, x: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    if fit.family != Family::Logistic {
        return Err(GlmError::WrongFamily(Family::Logistic));
    }
    Ok(fit.linear_predictor(x)?.into_iter().map(expit).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefDraw {
    pub coef: Vec<f64>,
    /// Set when the covariance had negative eigenvalues that were clipped.
    pub clipped: bool,
}

/// Lower-triangular square root of a covariance matrix, falling back to an
/// eigen square root (negative eigenvalues clipped at zero).
fn covariance_root(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let p = cov.nrows();
    let flat: Vec<f64> = (0..p * p).map(|k| cov[(k / p, k % p)]).collect();
    let (l, keep) = cholesky_skipping(&flat, p, 1e-13);
    if keep.iter().all(|&k| k) {
        return (DMatrix::from_row_slice(p, p, &l), false);
    }
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let clipped = eig.eigenvalues.iter().any(|&v| v < -1e-12 * scale);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
    (root, clipped)
}

/// Draws coefficients from their approximate posterior. For linear fits the
/// residual variance is drawn first as `sigma2 * df / chi2(df)` and the
/// covariance rescaled by it.
pub fn draw_coef<R: Rng + ?Sized>(fit: &GlmFit, rng: &mut R) -> Result<CoefDraw, GlmError> {
    if !fit.converged {
        return Err(GlmError::NotConverged);
    }
    let mut cov = fit.cov_model.clone();
    if fit.family == Family::Linear && fit.df_resid > 0 {
        let chi = ChiSquared::new(fit.df_resid as f64).expect("positive df");
        let g: f64 = chi.sample(rng);
        cov *= fit.df_resid as f64 / g;
    }
    let (root, clipped) = covariance_root(&cov);
    let p = fit.coef.len();
    let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let coef = (0..p)
        .map(|i| fit.coef[i] + (0..p).map(|k| root[(i, k)] * z[k]).sum::<f64>())
        .collect();
    Ok(CoefDraw { coef, clipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn design(cols: &[&[f64]]) -> DesignMatrix {
        let names = (0..cols.len()).map(|j| format!("x{}", j + 1)).collect();
        DesignMatrix::new(names, cols).unwrap()
    }

    #[test]
    fn logistic_symmetric_null() {
        let x = [-2.0, -1.0, 1.0, 2.0, -2.0, -1.0, 1.0, 2.0];
        let y = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let fit = fit_logistic(&design(&[&x]), &y, None).unwrap();
        assert!(fit.converged);
        assert!(fit.coef[0].abs() < 1e-6 && fit.coef[1].abs() < 1e-6, "{:?}", fit.coef);
    }

    #[test]
    fn logistic_separation_is_reported() {
        let x = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let err = fit_logistic(&design(&[&x]), &y, None).unwrap_err();
        assert!(matches!(err, GlmError::Separation { .. }), "{err:?}");
    }

    #[test]
    fn logistic_single_class_and_non_binary() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(
            fit_logistic(&design(&[&x]), &[1.0, 1.0, 1.0], None).unwrap_err(),
            GlmError::SingleClass
        );
        assert_eq!(
            fit_logistic(&design(&[&x]), &[1.0, 0.5, 0.0], None).unwrap_err(),
            GlmError::NotBinary(1)
        );
    }

    #[test]
    fn rank_deficiency_names_the_column() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        let err = fit_wls(&design(&[&a, &b]), &[1.0, 2.0, 2.0, 5.0], &[1.0; 4]).unwrap_err();
        assert_eq!(err, GlmError::RankDeficient("x2".into()));
    }

    #[test]
    fn wls_two_points() {
        let fit = fit_wls(&design(&[&[0.0, 1.0]]), &[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(fit.coef[0].abs() < 1e-12);
        assert!((fit.coef[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wls_duplicate_row_equals_double_weight() {
        let x = [0.5, 1.0, 2.0, 3.5];
        let y = [1.0, 0.3, 2.2, 4.1];
        let doubled = fit_wls(&design(&[&x]), &y, &[1.0, 2.0, 1.0, 1.0]).unwrap();
        let xd = [0.5, 1.0, 1.0, 2.0, 3.5];
        let yd = [1.0, 0.3, 0.3, 2.2, 4.1];
        let dup = fit_wls(&design(&[&xd]), &yd, &[1.0; 5]).unwrap();
        for (a, b) in doubled.coef.iter().zip(&dup.coef) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_rows_do_not_count() {
        let x = [0.0, 1.0, 2.0, 50.0];
        let y = [1.0, 3.0, 5.0, -100.0];
        let fit = fit_wls(&design(&[&x]), &y, &[1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((fit.coef[0] - 1.0).abs() < 1e-10 && (fit.coef[1] - 2.0).abs() < 1e-10);
        assert_eq!(fit.df_resid, 1);
    }

    #[test]
    fn predict_proba_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let y: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
        let mut fit =
            fit_logistic(&design(&[&cols[0], &cols[1], &cols[2]]), &y, None).unwrap();
        fit.coef = vec![0.0; 4];
        let x0 = design(&[&[0.3], &[-0.2], &[5.0]]);
        assert_eq!(predict_proba(&fit, &x0).unwrap(), vec![0.5]);

        fit.coef = vec![-4.10, 1.0, 1.0, 1.0];
        let origin = design(&[&[0.0], &[0.0], &[0.0]]);
        let p = predict_proba(&fit, &origin).unwrap()[0];
        assert!((p - 0.0163).abs() < 1e-4);

        let up = design(&[&[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let p = predict_proba(&fit, &up).unwrap();
        assert!(p[1] > p[0]);

        let wrong = DesignMatrix::new(vec!["z".into()], &[&[0.0]]).unwrap();
        assert!(matches!(predict_proba(&fit, &wrong), Err(GlmError::PredictorMismatch { .. })));
    }

    #[test]
    fn zero_covariance_draw_is_exact() {
        let mut fit = fit_wls(&design(&[&[0.0, 1.0, 2.0]]), &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        fit.cov_model = DMatrix::zeros(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = draw_coef(&fit, &mut rng).unwrap();
        assert_eq!(d.coef, fit.coef);
        assert!(!d.clipped);
    }

    #[test]
    fn non_psd_covariance_is_clipped() {
        let mut fit = fit_wls(&design(&[&[0.0, 1.0, 2.0]]), &[1.0, 2.5, 3.0], &[1.0; 3]).unwrap();
        fit.cov_model = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let d = draw_coef(&fit, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(d.clipped);
        assert!(d.coef.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn draw_is_reproducible() {
        let fit = fit_wls(&design(&[&[0.0, 1.0, 2.0, 3.0]]), &[1.0, 2.5, 3.0, 4.4], &[1.0; 4]).unwrap();
        let a = draw_coef(&fit, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = draw_coef(&fit, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
