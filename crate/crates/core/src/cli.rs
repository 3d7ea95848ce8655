//! Command-line interface.
//!
//! Exit codes: 0 success, 2 config or input error, 3 generation failure,
//! 4 study failure, 5 pipeline failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datagen::{self, ScenarioConfig};
use crate::diagnostics::{self, BalanceReport, DEFAULT_BINS};
use crate::glm::GlmError;
use crate::ipsw::{self, BootstrapResult, EMode, EstimateResult, IpswError, IpswPipeline, PooledEstimate, WeightScheme};
use crate::mice::{self, MRule, ModelKind, SpecOptions};
use crate::streams::derive_seed;
use crate::study::{self, StudyConfig, StudyError};
use crate::tabular::{self, ColumnRole, ConcatMode, Dataset};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_GENERATION: i32 = 3;
pub const EXIT_STUDY: i32 = 4;
pub const EXIT_PIPELINE: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl std::fmt::Display) -> Self {
        CliError {
            code,
            message: message.to_string(),
        }
    }
    fn input(message: impl std::fmt::Display) -> Self {
        Self::new(EXIT_INPUT, message)
    }
    fn pipeline(message: impl std::fmt::Display) -> Self {
        Self::new(EXIT_PIPELINE, message)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "transport-mi",
    version,
    about = "Generalize or transport trial treatment effects with sampling weights and multiple imputation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one superpopulation and write it as CSV.
    ///
    /// Output columns: X1,X2,X3,S,A,Y (plus Y1,Y0 with --reveal-potential).
    /// Treatment and outcome are NA on non-trial rows.
    Simulate(SimulateArgs),
    /// Run the replicated simulation study.
    ///
    /// Writes results.csv (method,missing_trial,bias,bias_mcse,emp_se,
    /// emp_se_mcse,avg_robust_se,mse,mse_mcse,n_completed,n_failed),
    /// results.json and replicates.csv to the output directory.
    Study(StudyArgs),
    /// Estimate the treatment effect for a target sample from trial data.
    Apply(ApplyArgs),
    /// Balance and overlap diagnostics for a trial/target pair.
    ///
    /// With --out-dir writes balance.json and ps_histogram.csv
    /// (bin_lower,bin_upper,trial_count,target_count,trial_frac,target_frac).
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Scenario JSON; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Estimand summary JSON path (printed to stdout when omitted).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Append the potential outcomes Y1 and Y0.
    #[arg(long)]
    pub reveal_potential: bool,
}

#[derive(Debug, clap::Args)]
pub struct StudyArgs {
    /// Study JSON; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the config's master_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's n_sim.
    #[arg(long)]
    pub n_sim: Option<usize>,
    /// Worker threads (defaults to all cores). Output does not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ApplyMethod {
    Cc,
    M1a,
    M1b,
    M2,
    M3a,
    M3b,
}

impl ApplyMethod {
    fn kind(self) -> Option<ModelKind> {
        match self {
            ApplyMethod::Cc => None,
            ApplyMethod::M1a => Some(ModelKind::M1A),
            ApplyMethod::M1b => Some(ModelKind::M1B),
            ApplyMethod::M2 => Some(ModelKind::M2),
            ApplyMethod::M3a => Some(ModelKind::M3A),
            ApplyMethod::M3b => Some(ModelKind::M3B),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Generalize,
    Transport,
}

impl From<SchemeArg> for WeightScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Generalize => WeightScheme::Generalize,
            SchemeArg::Transport => WeightScheme::Transport,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EModeArg {
    Marginal,
    Logistic,
}

impl From<EModeArg> for EMode {
    fn from(s: EModeArg) -> Self {
        match s {
            EModeArg::Marginal => EMode::Marginal,
            EModeArg::Logistic => EMode::Logistic,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Trial CSV (covariates, treatment, outcome).
    #[arg(long)]
    pub trial: PathBuf,
    /// Target CSV (covariates; treatment and outcome may be absent).
    #[arg(long)]
    pub target: PathBuf,
    /// Column role as NAME=ROLE (covariate, treatment, outcome); repeatable.
    /// Columns without a role are ignored.
    #[arg(long = "role", value_name = "NAME=ROLE")]
    pub roles: Vec<String>,
    /// JSON object mapping column names to roles.
    #[arg(long = "roles")]
    pub roles_file: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ApplyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "m2")]
    pub method: ApplyMethod,
    #[arg(long, value_enum, default_value = "transport")]
    pub scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "marginal")]
    pub e_mode: EModeArg,
    /// Number of imputations (default: percentage of incomplete rows, at least 2).
    #[arg(long)]
    pub m: Option<usize>,
    /// Bootstrap resamples; 0 skips the bootstrap.
    #[arg(long = "B", default_value_t = 2000)]
    pub b: usize,
    /// Comma-separated covariates interacted with treatment (M3A/M3B; default all).
    #[arg(long, value_delimiter = ',')]
    pub interactions: Option<Vec<String>>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "transport")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Study(a) => cmd_study(&a),
        Command::Apply(a) => cmd_apply(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    }
}

fn resolve_seed(flag: Option<u64>, from_config: Option<u64>) -> u64 {
    flag.or(from_config).unwrap_or_else(|| {
        let s: u64 = rand::random();
        eprintln!("seed: {s}");
        s
    })
}

/// Parses a JSON config; returns it plus the raw value of `seed_key` if set.
fn read_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
    seed_key: &str,
) -> CliResult<(T, Option<u64>)> {
    let Some(path) = path else {
        return Ok((T::default(), None));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let seed = value.get(seed_key).and_then(|v| v.as_u64());
    let cfg = serde_path_to_error::deserialize(value).map_err(|e| {
        let at = e.path().to_string();
        let at = if at == "." { String::new() } else { format!(" (at `{at}`)") };
        CliError::input(format!("{}: {}{at}", path.display(), e.inner()))
    })?;
    Ok((cfg, seed))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::pipeline)? + "\n";
    match path {
        Some(p) => create(p)?
            .write_all(text.as_bytes())
            .map_err(|e| CliError::input(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let (mut cfg, seed) = read_config::<ScenarioConfig>(args.config.as_deref(), "seed")?;
    cfg.seed = resolve_seed(args.seed, seed);
    cfg.validate().map_err(CliError::input)?;
    let pop = datagen::make_superpopulation(&cfg).map_err(|e| CliError::new(EXIT_GENERATION, e))?;
    let out = create(&args.out)?;
    pop.write_csv(out, args.reveal_potential)
        .map_err(|e| CliError::new(EXIT_GENERATION, e))?;
    write_json(args.summary.as_deref(), &pop.summary())
}

fn study_error(e: StudyError) -> CliError {
    match e {
        StudyError::Config(_) | StudyError::M1aWithoutZeroLevel(_) => CliError::input(e),
        StudyError::Generation { .. } => CliError::new(EXIT_GENERATION, e),
        _ => CliError::new(EXIT_STUDY, e),
    }
}

pub fn cmd_study(args: &StudyArgs) -> CliResult<()> {
    let (mut cfg, seed) = read_config::<StudyConfig>(args.config.as_deref(), "master_seed")?;
    cfg.master_seed = resolve_seed(args.seed, seed);
    if let Some(n) = args.n_sim {
        cfg.n_sim = n;
    }
    cfg.validate().map_err(study_error)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::input(format!("{}: {e}", args.out_dir.display())))?;
    let result = study::run_study(&cfg, args.workers).map_err(study_error)?;
    let dir = &args.out_dir;
    let io = |e: StudyError| CliError::new(EXIT_STUDY, e);
    result.write_csv(create(&dir.join("results.csv"))?).map_err(io)?;
    result.write_json(create(&dir.join("results.json"))?).map_err(io)?;
    result
        .write_replicates_csv(create(&dir.join("replicates.csv"))?)
        .map_err(io)?;

    let e = &result.estimands;
    println!(
        "truth {:.4}  mean TATE {:.4} (sd {:.4})  mean trial size {:.1}",
        e.truth_value, e.mean_realized_tate, e.sd_realized_tate, e.mean_n_trial
    );
    println!(
        "{:<9} {:>7} {:>9} {:>8} {:>8} {:>8} {:>6}",
        "method", "missing", "bias", "emp_se", "rob_se", "mse", "n"
    );
    for c in &result.cells {
        let m = &c.metrics;
        println!(
            "{:<9} {:>7} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>6}",
            c.method.to_string(),
            c.level.map_or("-".to_string(), |l| format!("{l}")),
            m.bias,
            m.emp_se,
            m.avg_robust_se,
            m.mse,
            c.n_completed
        );
    }
    Ok(())
}

/// `need_arms`: treatment and outcome must each be assigned exactly once
/// (otherwise at most once).
fn parse_roles(data: &DataArgs, need_arms: bool) -> CliResult<HashMap<String, ColumnRole>> {
    let mut roles = HashMap::new();
    if let Some(path) = &data.roles_file {
        let file = File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let raw: HashMap<String, String> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        for (k, v) in raw {
            let role = v.parse::<ColumnRole>().map_err(CliError::input)?;
            roles.insert(k, role);
        }
    }
    for spec in &data.roles {
        let (name, role) = spec
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("--role expects NAME=ROLE, got `{spec}`")))?;
        let role = role.trim().parse::<ColumnRole>().map_err(CliError::input)?;
        roles.insert(name.trim().to_string(), role);
    }
    if roles.is_empty() {
        return Err(CliError::input("no column roles given (use --role NAME=ROLE or --roles FILE)"));
    }
    for role in [ColumnRole::Treatment, ColumnRole::Outcome] {
        let n = roles.values().filter(|r| **r == role).count();
        if n > 1 || (need_arms && n == 0) {
            return Err(CliError::input(format!("exactly one {role:?} column is required, got {n}")));
        }
    }
    if !roles.values().any(|r| *r == ColumnRole::Covariate) {
        return Err(CliError::input("at least one covariate is required"));
    }
    if roles.values().any(|r| matches!(r, ColumnRole::TrialIndicator | ColumnRole::Weight | ColumnRole::Derived)) {
        return Err(CliError::input(
            "only covariate, treatment and outcome roles can be assigned; the trial indicator is created",
        ));
    }
    Ok(roles)
}

fn read_part(path: &Path, roles: &HashMap<String, ColumnRole>) -> CliResult<Dataset> {
    let file = File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let raw = tabular::read_raw_csv(BufReader::new(file)).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let kept: Vec<(String, Vec<f64>)> = raw.into_iter().filter(|(n, _)| roles.contains_key(n)).collect();
    let present: HashMap<String, ColumnRole> = roles
        .iter()
        .filter(|(n, _)| kept.iter().any(|(k, _)| k == *n))
        .map(|(n, r)| (n.clone(), *r))
        .collect();
    tabular::build_dataset(kept, &present).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_pair(data: &DataArgs, need_arms: bool) -> CliResult<Dataset> {
    let roles = parse_roles(data, need_arms)?;
    let trial = read_part(&data.trial, &roles)?;
    let target = read_part(&data.target, &roles)?;
    for (name, role) in &roles {
        if *role == ColumnRole::Covariate && trial.column(name).is_none() {
            return Err(CliError::input(format!("covariate `{name}` not found in trial file")));
        }
    }
    tabular::concat_trial_target(&trial, &target, ConcatMode::Strict).map_err(CliError::input)
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    let pool = b.build().map_err(CliError::pipeline)?;
    Ok(pool.install(f))
}

#[derive(Debug, Serialize)]
pub struct ApplyReport {
    pub method: ApplyMethod,
    pub scheme: WeightScheme,
    pub e_mode: EMode,
    pub seed: u64,
    pub n_trial: usize,
    pub n_target: usize,
    pub covariates: Vec<String>,
    pub estimate: f64,
    /// Rubin's-rules pooled result (imputation methods only).
    pub pooled: Option<PooledEstimate>,
    pub per_dataset: Vec<EstimateResult>,
    pub rubin_se: f64,
    pub bootstrap: Option<BootstrapResult>,
    pub notes: Vec<String>,
    pub balance: Vec<BalanceReport>,
}

const TAG_IMPUTE: u64 = 0;
const TAG_BOOT: u64 = 1;

/// One full analysis: imputation (if any), weighting, estimation, pooling.
struct Analysis {
    pooled: Option<PooledEstimate>,
    per_dataset: Vec<(Dataset, ipsw::PipelineOutput)>,
}

fn analyse(
    ds: &Dataset,
    pipeline: &IpswPipeline,
    kind: Option<ModelKind>,
    opts: &SpecOptions,
) -> Result<Analysis, String> {
    match kind {
        None => {
            let cc = ipsw::complete_cases(ds, &pipeline.covariates).map_err(|e| e.to_string())?;
            let out = pipeline.run_full(&cc).map_err(|e| e.to_string())?;
            Ok(Analysis {
                pooled: None,
                per_dataset: vec![(cc, out)],
            })
        }
        Some(kind) => {
            let spec = mice::build_spec(kind, ds, opts).map_err(|e| e.to_string())?;
            let set = mice::impute(ds, &spec).map_err(|e| e.to_string())?;
            let mut per = Vec::with_capacity(set.datasets.len());
            for (i, d) in set.datasets.into_iter().enumerate() {
                let out = pipeline
                    .run_full(&d)
                    .map_err(|e| format!("imputed dataset {i}: {e}"))?;
                per.push((d, out));
            }
            let results: Vec<EstimateResult> = per.iter().map(|(_, o)| o.result.clone()).collect();
            Ok(Analysis {
                pooled: Some(ipsw::pool_results(&results)),
                per_dataset: per,
            })
        }
    }
}

pub fn cmd_apply(args: &ApplyArgs) -> CliResult<()> {
    let ds = load_pair(&args.data, true)?;
    let seed = resolve_seed(args.seed, None);
    let covariates = ds.covariate_names();
    let pipeline = IpswPipeline {
        covariates: covariates.clone(),
        scheme: args.scheme.into(),
        e_mode: args.e_mode.into(),
    };
    let kind = args.method.kind();
    if args.m == Some(0) {
        return Err(CliError::input("--m must be positive"));
    }
    let m_rule = args.m.map_or(MRule::PercentMissing, MRule::Explicit);
    let opts = SpecOptions {
        m_rule,
        interactions: args.interactions.clone(),
        seed: derive_seed(seed, &[TAG_IMPUTE]),
        ..Default::default()
    };
    if kind == Some(ModelKind::M1A) {
        mice::build_spec(ModelKind::M1A, &ds, &opts).map_err(CliError::input)?;
    }

    let main = with_pool(args.workers, || analyse(&ds, &pipeline, kind, &opts))?.map_err(CliError::pipeline)?;
    let mut notes = Vec::new();
    let balance = main
        .per_dataset
        .iter()
        .map(|(d, o)| diagnostics::balance_report(d, &covariates, &o.ps, &o.weights, args.bins))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::pipeline)?;
    let (estimate, rubin_se) = match &main.pooled {
        Some(p) => (p.estimate, p.total_se()),
        None => {
            let r = &main.per_dataset[0].1.result;
            (r.estimate, r.robust_se)
        }
    };
    let m_used = main.pooled.as_ref().map(|p| p.m);

    let bootstrap = if args.b == 0 {
        notes.push("bootstrap skipped (B = 0); uncertainty is the Rubin/robust SE only".into());
        None
    } else {
        let boot_opts = SpecOptions {
            m_rule: m_used.map_or(m_rule, MRule::Explicit),
            ..opts.clone()
        };
        let boot_seed = derive_seed(seed, &[TAG_BOOT]);
        let stat = |d: &Dataset, k: usize| -> Result<f64, IpswError> {
            let o = SpecOptions {
                seed: derive_seed(boot_seed, &[k as u64, 1]),
                ..boot_opts.clone()
            };
            let a = analyse(d, &pipeline, kind, &o).map_err(IpswError::Other)?;
            Ok(match a.pooled {
                Some(p) => p.estimate,
                None => a.per_dataset[0].1.result.estimate,
            })
        };
        let r = with_pool(args.workers, || ipsw::bootstrap_se(&ds, args.b, boot_seed, stat))?
            .map_err(CliError::pipeline)?;
        if r.n_failed > 0 {
            notes.push(format!("{} bootstrap resamples failed and were skipped", r.n_failed));
        }
        Some(r)
    };

    let flags = ds.trial_flags().expect("concatenated data has an indicator");
    let n_trial = flags.iter().filter(|&&s| s).count();
    let report = ApplyReport {
        method: args.method,
        scheme: pipeline.scheme,
        e_mode: pipeline.e_mode,
        seed,
        n_trial,
        n_target: flags.len() - n_trial,
        covariates,
        estimate,
        pooled: main.pooled.clone(),
        per_dataset: main.per_dataset.iter().map(|(_, o)| o.result.clone()).collect(),
        rubin_se,
        bootstrap,
        notes,
        balance,
    };
    write_json(args.out.as_deref(), &report)
}

#[derive(Debug, Serialize)]
struct DiagnoseReport {
    n_trial: usize,
    n_target: usize,
    rows_dropped_incomplete: usize,
    balance: Option<BalanceReport>,
    unweighted_asd: Vec<(String, f64)>,
    tipton_index: f64,
    warnings: Vec<String>,
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    let full = load_pair(&args.data, false)?;
    let covariates = full.covariate_names();
    let flags = full.trial_flags().expect("indicator");
    let cov_cols: Vec<_> = covariates.iter().filter_map(|c| full.column(c)).collect();
    let keep: Vec<usize> = (0..full.n_rows())
        .filter(|&r| cov_cols.iter().all(|c| c.observed()[r]))
        .collect();
    let ds = full.select_rows(&keep);
    let dropped = full.n_rows() - ds.n_rows();
    let flags: Vec<bool> = keep.iter().map(|&r| flags[r]).collect();
    let n_trial = flags.iter().filter(|&&s| s).count();
    let mut warnings = Vec::new();
    if dropped > 0 {
        warnings.push(format!("{dropped} rows with missing covariates excluded"));
    }

    let unweighted = covariates
        .iter()
        .map(|c| diagnostics::asd(&ds, c, None).map(|v| (c.clone(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::pipeline)?;

    let scheme: WeightScheme = args.scheme.into();
    if scheme == WeightScheme::Generalize && ds.role_column(ColumnRole::Treatment).is_none() {
        return Err(CliError::input("the generalize scheme needs a treatment column"));
    }
    let weighting = ipsw::estimate_ps(&ds, &covariates).and_then(|ps| {
        let e_a = match scheme {
            WeightScheme::Generalize => ipsw::treatment_prob(&ds, &covariates, EMode::Marginal)?,
            WeightScheme::Transport => vec![None; ds.n_rows()],
        };
        let w = ipsw::compute_weights(&ds, &ps, &e_a, scheme)?;
        Ok((ps, w))
    });
    let (balance, ps) = match weighting {
        Ok((ps, w)) => {
            let report =
                diagnostics::balance_report(&ds, &covariates, &ps, &w, args.bins).map_err(CliError::pipeline)?;
            (Some(report), Some(ps))
        }
        Err(IpswError::Glm(GlmError::Separation { .. })) => {
            warnings.push("trial membership is perfectly separated by the covariates: no overlap, weighting impossible".into());
            (None, None)
        }
        Err(e) => return Err(CliError::pipeline(e)),
    };
    let tipton = balance.as_ref().map_or(0.0, |b| b.tipton_index);
    if tipton < 0.5 {
        warnings.push(format!("poor overlap between trial and target propensity scores (index {tipton:.3})"));
    }

    match &balance {
        Some(b) => print!("{}", b.render_table()),
        None => {
            for (c, v) in &unweighted {
                println!("{c:<16} ASD before {v:.4}");
            }
            println!("tipton index     {tipton:.4}");
        }
    }
    for w in &warnings {
        println!("warning: {w}");
    }

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
        let report = DiagnoseReport {
            n_trial,
            n_target: ds.n_rows() - n_trial,
            rows_dropped_incomplete: dropped,
            balance: balance.clone(),
            unweighted_asd: unweighted,
            tipton_index: tipton,
            warnings,
        };
        write_json(Some(&dir.join("balance.json")), &report)?;
        if let Some(ps) = ps {
            let (p1, p0): (Vec<f64>, Vec<f64>) = {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for (p, &s) in ps.iter().zip(&flags) {
                    if s { a.push(*p) } else { b.push(*p) }
                }
                (a, b)
            };
            let (h1, h0) = (diagnostics::histogram(&p1, args.bins), diagnostics::histogram(&p0, args.bins));
            let path = dir.join("ps_histogram.csv");
            let mut w = create(&path)?;
            let io = |e: std::io::Error| CliError::input(format!("{}: {e}", path.display()));
            writeln!(w, "bin_lower,bin_upper,trial_count,target_count,trial_frac,target_frac").map_err(io)?;
            let bins = args.bins as f64;
            for b in 0..args.bins {
                writeln!(
                    w,
                    "{:?},{:?},{},{},{:?},{:?}",
                    b as f64 / bins,
                    (b + 1) as f64 / bins,
                    h1[b],
                    h0[b],
                    h1[b] as f64 / p1.len() as f64,
                    h0[b] as f64 / p0.len() as f64
                )
                .map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
    }
    Ok(())
}
