//! Replicated Monte Carlo study runner and performance metrics.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, DatagenError, ScenarioConfig};
use crate::ipsw::{EMode, IpswError, IpswPipeline, WeightScheme};
use crate::mice::{self, MRule, MiceError, ModelKind, SpecOptions};
use crate::missingness::{self, MarSpec, MissingnessError};
use crate::streams::{self, derive_seed};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("M1A requires fully observed trial (trial fractions {0:?} do not include 0)")]
    M1aWithoutZeroLevel(Vec<f64>),
    #[error("replicate {replicate}: {source}")]
    Generation {
        replicate: usize,
        #[source]
        source: DatagenError,
    },
    #[error("replicate {replicate}: {source}")]
    Missingness {
        replicate: usize,
        #[source]
        source: MissingnessError,
    },
    #[error("method {method} at trial-missing level {level}: {failed} of {n_sim} replicates failed (limit 5%); first error: {first_error}")]
    TooManyFailures {
        method: StudyMethod,
        level: String,
        failed: usize,
        n_sim: usize,
        first_error: String,
    },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StudyMethod {
    FullData,
    CC,
    M1A,
    M1B,
    M2,
    M3A,
    M3B,
}

impl StudyMethod {
    pub const ALL: [StudyMethod; 7] = [
        StudyMethod::FullData,
        StudyMethod::CC,
        StudyMethod::M1A,
        StudyMethod::M1B,
        StudyMethod::M2,
        StudyMethod::M3A,
        StudyMethod::M3B,
    ];

    fn model_kind(self) -> Option<ModelKind> {
        match self {
            StudyMethod::M1A => Some(ModelKind::M1A),
            StudyMethod::M1B => Some(ModelKind::M1B),
            StudyMethod::M2 => Some(ModelKind::M2),
            StudyMethod::M3A => Some(ModelKind::M3A),
            StudyMethod::M3B => Some(ModelKind::M3B),
            _ => None,
        }
    }
}

impl std::fmt::Display for StudyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// Mean effect over the non-trial rows.
    PateS0,
    /// Mean effect over every row of the superpopulation.
    #[default]
    PateAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: ScenarioConfig,
    /// Masking template; `frac_trial` is replaced by each entry of
    /// `trial_fractions`.
    pub mar: MarSpec,
    pub trial_fractions: Vec<f64>,
    pub methods: Vec<StudyMethod>,
    pub n_sim: usize,
    pub truth: Truth,
    pub master_seed: u64,
    pub m_rule: MRule,
    pub maxit: usize,
    pub donor_k: usize,
    /// Covariates interacted with treatment under M3A/M3B.
    pub interactions: Option<Vec<String>>,
    pub scheme: WeightScheme,
    pub e_mode: EMode,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            scenario: ScenarioConfig::default(),
            mar: MarSpec::default(),
            trial_fractions: vec![0.0, 0.10, 0.30],
            methods: StudyMethod::ALL.to_vec(),
            n_sim: 200,
            truth: Truth::PateAll,
            master_seed: 0,
            m_rule: MRule::PercentMissing,
            maxit: mice::DEFAULT_MAXIT,
            donor_k: mice::DEFAULT_DONORS,
            interactions: Some(vec!["X1".into(), "X2".into()]),
            scheme: WeightScheme::Generalize,
            e_mode: EMode::Marginal,
        }
    }
}

/// One (method, trial-missing level) cell. `level` is `None` for full data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: StudyMethod,
    pub level: Option<f64>,
}

fn level_label(level: Option<f64>) -> String {
    level.map_or("NA".to_string(), |l| format!("{l}"))
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: &str| Err(StudyError::Config(m.to_string()));
        if self.n_sim < 2 {
            return bad("n_sim must be at least 2");
        }
        if self.methods.is_empty() {
            return bad("no methods requested");
        }
        if self.maxit == 0 || self.donor_k == 0 {
            return bad("maxit and donor_k must be positive");
        }
        if self.trial_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("trial fractions must lie in [0, 1]");
        }
        let needs_levels = self.methods.iter().any(|m| *m != StudyMethod::FullData);
        if needs_levels && self.trial_fractions.is_empty() {
            return bad("trial_fractions is empty");
        }
        if self.methods.contains(&StudyMethod::M1A) && !self.trial_fractions.contains(&0.0) {
            return Err(StudyError::M1aWithoutZeroLevel(self.trial_fractions.clone()));
        }
        if let MRule::Explicit(0) = self.m_rule {
            return bad("m must be positive");
        }
        self.scenario
            .validate()
            .map_err(|e| StudyError::Config(e.to_string()))?;
        Ok(())
    }

    /// Cells in output order: methods in canonical order, levels ascending
    /// as listed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        let mut out = Vec::new();
        for method in methods {
            match method {
                StudyMethod::FullData => out.push(Cell { method, level: None }),
                StudyMethod::M1A => out.push(Cell {
                    method,
                    level: Some(0.0),
                }),
                _ => out.extend(self.trial_fractions.iter().map(|&l| Cell {
                    method,
                    level: Some(l),
                })),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    pub bias: f64,
    pub bias_mcse: f64,
    pub emp_se: f64,
    pub emp_se_mcse: f64,
    pub avg_robust_se: f64,
    pub mse: f64,
    pub mse_mcse: f64,
    pub n: usize,
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Bias, empirical SE, MSE and their Monte Carlo standard errors.
pub fn performance_metrics(estimates: &[f64], truth: f64, robust_ses: &[f64]) -> Result<PerformanceMetrics, StudyError> {
    let n = estimates.len();
    if n < 2 {
        return Err(StudyError::Config(format!("performance metrics need at least 2 estimates, got {n}")));
    }
    let nf = n as f64;
    let bias = estimates.iter().sum::<f64>() / nf - truth;
    let emp_se = sd(estimates);
    let sq: Vec<f64> = estimates.iter().map(|e| (e - truth).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / nf;
    Ok(PerformanceMetrics {
        bias,
        bias_mcse: emp_se / nf.sqrt(),
        emp_se,
        emp_se_mcse: emp_se / (2.0 * (nf - 1.0)).sqrt(),
        avg_robust_se: if robust_ses.is_empty() {
            f64::NAN
        } else {
            robust_ses.iter().sum::<f64>() / robust_ses.len() as f64
        },
        mse,
        mse_mcse: sd(&sq) / nf.sqrt(),
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: StudyMethod,
    pub level: Option<f64>,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub m: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimands {
    pub replicate: usize,
    pub n_trial: usize,
    pub true_pate_s0: f64,
    pub true_pate_all: f64,
    pub realized_tate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: StudyMethod,
    pub level: Option<f64>,
    pub metrics: PerformanceMetrics,
    pub n_completed: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandAggregate {
    pub truth: Truth,
    pub truth_value: f64,
    pub mean_true_pate_s0: f64,
    pub mean_true_pate_all: f64,
    pub mean_realized_tate: f64,
    pub sd_realized_tate: f64,
    pub mean_n_trial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub estimands: EstimandAggregate,
    pub cells: Vec<CellResult>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateRecord>,
    #[serde(skip)]
    pub replicate_estimands: Vec<ReplicateEstimands>,
}

impl StudyResult {
    pub fn cell(&self, method: StudyMethod, level: Option<f64>) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.level == level)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), StudyError> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(
            w,
            "method,missing_trial,bias,bias_mcse,emp_se,emp_se_mcse,avg_robust_se,mse,mse_mcse,n_completed,n_failed"
        )?;
        for c in &self.cells {
            let m = &c.metrics;
            writeln!(
                w,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
                c.method,
                level_label(c.level),
                m.bias,
                m.bias_mcse,
                m.emp_se,
                m.emp_se_mcse,
                m.avg_robust_se,
                m.mse,
                m.mse_mcse,
                c.n_completed,
                c.n_failed
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<(), StudyError> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "replicate,method,missing_trial,estimate,se,m,true_pate_s0,true_pate_all,realized_tate,error")?;
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:?}"));
        for r in &self.replicates {
            let e = &self.replicate_estimands[r.replicate];
            let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            writeln!(
                w,
                "{},{},{},{},{},{},{:?},{:?},{:?},\"{}\"",
                r.replicate,
                r.method,
                level_label(r.level),
                opt(r.estimate),
                opt(r.se),
                r.m.map_or("NA".to_string(), |m| m.to_string()),
                e.true_pate_s0,
                e.true_pate_all,
                e.realized_tate,
                err
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), StudyError> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

#[derive(Debug)]
enum CellError {
    Ipsw(IpswError),
    Mice(MiceError),
}

impl std::fmt::Display for CellError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellError::Ipsw(e) => write!(f, "{e}"),
            CellError::Mice(e) => write!(f, "{e}"),
        }
    }
}

/// Everything produced by one replicate.
struct ReplicateOutput {
    estimands: ReplicateEstimands,
    records: Vec<ReplicateRecord>,
}

const TAG_MAR: u64 = 1;
const TAG_IMPUTE: u64 = 2;

fn run_replicate(cfg: &StudyConfig, cells: &[Cell], r: usize) -> Result<ReplicateOutput, StudyError> {
    let scenario = ScenarioConfig {
        seed: derive_seed(cfg.master_seed, &[r as u64]),
        ..cfg.scenario.clone()
    };
    let pop = datagen::make_superpopulation(&scenario).map_err(|source| StudyError::Generation { replicate: r, source })?;
    let summary = pop.summary();
    let pipeline = IpswPipeline {
        covariates: datagen::COVARIATES.iter().map(|s| s.to_string()).collect(),
        scheme: cfg.scheme,
        e_mode: cfg.e_mode,
    };

    let mut masked = Vec::with_capacity(cfg.trial_fractions.len());
    for (li, &frac) in cfg.trial_fractions.iter().enumerate() {
        let spec = MarSpec {
            frac_trial: frac,
            ..cfg.mar.clone()
        };
        let mut rng = streams::stream(cfg.master_seed, &[r as u64, TAG_MAR, li as u64]);
        let ds = missingness::induce_mar(pop.data.clone(), &spec, &mut rng)
            .map_err(|source| StudyError::Missingness { replicate: r, source })?;
        masked.push(ds);
    }

    let mut records = Vec::with_capacity(cells.len());
    for cell in cells {
        let li = cell
            .level
            .map(|l| cfg.trial_fractions.iter().position(|&f| f == l).expect("cell level listed"));
        let outcome: Result<(f64, f64, Option<usize>), CellError> = match (cell.method, li) {
            (StudyMethod::FullData, _) => pipeline
                .run(&pop.data)
                .map(|e| (e.estimate, e.robust_se, None))
                .map_err(CellError::Ipsw),
            (StudyMethod::CC, Some(li)) => pipeline
                .complete_case(&masked[li])
                .map(|e| (e.estimate, e.robust_se, None))
                .map_err(CellError::Ipsw),
            (method, Some(li)) => {
                let kind = method.model_kind().expect("imputation method");
                let opts = SpecOptions {
                    m_rule: cfg.m_rule,
                    interactions: cfg.interactions.clone(),
                    maxit: cfg.maxit,
                    donor_k: cfg.donor_k,
                    seed: derive_seed(cfg.master_seed, &[r as u64, TAG_IMPUTE, li as u64, method as u64]),
                };
                mice::build_spec(kind, &masked[li], &opts)
                    .and_then(|spec| mice::impute(&masked[li], &spec))
                    .map_err(CellError::Mice)
                    .and_then(|set| pipeline.psi_within(&set).map_err(CellError::Ipsw))
                    .map(|p| (p.estimate, p.total_se(), Some(p.m)))
            }
            (_, None) => unreachable!("only full data has no level"),
        };
        records.push(match outcome {
            Ok((est, se, m)) => ReplicateRecord {
                replicate: r,
                method: cell.method,
                level: cell.level,
                estimate: Some(est),
                se: Some(se),
                m,
                error: None,
            },
            Err(e) => ReplicateRecord {
                replicate: r,
                method: cell.method,
                level: cell.level,
                estimate: None,
                se: None,
                m: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(ReplicateOutput {
        estimands: ReplicateEstimands {
            replicate: r,
            n_trial: summary.n_trial,
            true_pate_s0: pop.true_pate_s0,
            true_pate_all: pop.true_pate_all,
            realized_tate: pop.realized_tate,
        },
        records,
    })
}

/// Runs every replicate on `workers` threads (all cores when `None`).
/// Output is identical for every worker count.
pub fn run_study(cfg: &StudyConfig, workers: Option<usize>) -> Result<StudyResult, StudyError> {
    cfg.validate()?;
    let cells = cfg.cells();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder.build().map_err(|e| StudyError::Pool(e.to_string()))?;
    let outputs: Vec<Result<ReplicateOutput, StudyError>> = pool.install(|| {
        (0..cfg.n_sim)
            .into_par_iter()
            .map(|r| run_replicate(cfg, &cells, r))
            .collect()
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>, _>>()?;
    aggregate(cfg, &cells, outputs)
}

fn aggregate(cfg: &StudyConfig, cells: &[Cell], outputs: Vec<ReplicateOutput>) -> Result<StudyResult, StudyError> {
    let n = outputs.len() as f64;
    let est: Vec<ReplicateEstimands> = outputs.iter().map(|o| o.estimands.clone()).collect();
    let mean = |f: fn(&ReplicateEstimands) -> f64| est.iter().map(f).sum::<f64>() / n;
    let tate: Vec<f64> = est.iter().map(|e| e.realized_tate).collect();
    let estimands = EstimandAggregate {
        truth: cfg.truth,
        truth_value: match cfg.truth {
            Truth::PateS0 => mean(|e| e.true_pate_s0),
            Truth::PateAll => mean(|e| e.true_pate_all),
        },
        mean_true_pate_s0: mean(|e| e.true_pate_s0),
        mean_true_pate_all: mean(|e| e.true_pate_all),
        mean_realized_tate: mean(|e| e.realized_tate),
        sd_realized_tate: sd(&tate),
        mean_n_trial: mean(|e| e.n_trial as f64),
    };

    let records: Vec<ReplicateRecord> = outputs.into_iter().flat_map(|o| o.records).collect();
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let rows: Vec<&ReplicateRecord> = records
            .iter()
            .filter(|r| r.method == cell.method && r.level == cell.level)
            .collect();
        let ok: Vec<&&ReplicateRecord> = rows.iter().filter(|r| r.estimate.is_some()).collect();
        let failed = rows.len() - ok.len();
        if failed as f64 > 0.05 * cfg.n_sim as f64 || ok.len() < 2 {
            let first_error = rows
                .iter()
                .find_map(|r| r.error.clone())
                .unwrap_or_default();
            return Err(StudyError::TooManyFailures {
                method: cell.method,
                level: level_label(cell.level),
                failed,
                n_sim: cfg.n_sim,
                first_error,
            });
        }
        let e: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap()).collect();
        let s: Vec<f64> = ok.iter().map(|r| r.se.unwrap()).collect();
        results.push(CellResult {
            method: cell.method,
            level: cell.level,
            metrics: performance_metrics(&e, estimands.truth_value, &s)?,
            n_completed: ok.len(),
            n_failed: failed,
        });
    }
    Ok(StudyResult {
        config: cfg.clone(),
        estimands,
        cells: results,
        replicates: records,
        replicate_estimands: est,
    })
}
