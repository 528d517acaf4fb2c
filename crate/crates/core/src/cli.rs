//! Command-line front end. Results go to stdout (or `--out`), progress and
//! errors to stderr. Exit codes: 0 success, 1 usage or configuration
//! error, 2 numerical non-convergence, 3 failure budget exceeded.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bindings::{GlmmBinding, LogisticBinding};
use crate::estimators::{EstimatorSpec, FitError, FitResult};
use crate::harness::{run_setting, HarnessError, SimSetting, FORMAT_VERSION};
use crate::ib::{ib_run, Binding, Damping, IbConfig, IbError, IbTrace, Simulations};
use crate::inference::{estimate_variance, normal_ci, InferenceError, VarianceOptions};
use crate::oracle::{self, OracleError};
use crate::sim::{Dataset, GlmmDesign, LogisticDesign, SimError};
use crate::toy::Toy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "iterboot", version, about = "Iterative bootstrap bias correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the configured estimator to a data file.
    Fit(DataArgs),
    /// Run the iterative bootstrap from the estimate on a data file.
    Ib(IbArgs),
    /// Iterative bootstrap followed by variance estimation and normal intervals.
    Infer(IbArgs),
    /// Run a simulation study.
    Study(StudyArgs),
    /// Check the engine against the fixture oracles.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// CSV with header `y, x_1..x_q` and an optional `cluster` column.
    #[arg(long)]
    pub data: PathBuf,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct IbOverrides {
    /// Simulated samples per step (0 uses the closed-form binding).
    #[arg(long = "H")]
    pub h: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Constant step size in (0, 1].
    #[arg(long)]
    pub damping: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fixed_seeds: Option<bool>,
}

impl IbOverrides {
    pub fn apply(&self, cfg: &mut IbConfig) {
        if let Some(h) = self.h {
            cfg.simulations = if h == 0 { Simulations::Exact } else { Simulations::MonteCarlo(h) };
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.tol {
            cfg.tol = Some(v);
        }
        if let Some(v) = self.damping {
            cfg.damping = Damping::Constant { epsilon: v };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.fixed_seeds {
            cfg.fixed_seeds = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct IbArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ib: IbOverrides,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// JSON simulation setting.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in setting, e.g. `lrm-setting1-scaled`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long = "H")]
    pub h: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Recompute the reference values and overwrite the expectations file.
    #[arg(long)]
    pub regen: bool,
}

/// Echoed with every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<String>,
    pub master_seed: Option<u64>,
    pub output: Option<String>,
    pub workers: Option<usize>,
    pub format_version: u32,
}

impl RunManifest {
    fn new(subcommand: &str, config: Option<&Path>, seed: Option<u64>, output: Option<&Path>, workers: Option<usize>) -> Self {
        Self {
            subcommand: subcommand.into(),
            config: config.map(|p| p.display().to_string()),
            master_seed: seed,
            output: output.map(|p| p.display().to_string()),
            workers,
            format_version: FORMAT_VERSION,
        }
    }
}

fn default_level() -> f64 {
    0.95
}

/// Configuration for `fit`, `ib` and `infer`: exactly one of `estimator`
/// (applied to the data file) and `toy`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub estimator: Option<EstimatorSpec>,
    #[serde(default)]
    pub toy: Option<Toy>,
    /// Observed initial estimate for a toy; by default the variance toy
    /// uses the divisor-`n` variance of the `y` column.
    #[serde(default)]
    pub pi_obs: Option<Vec<f64>>,
    #[serde(default)]
    pub ib: IbConfig,
    #[serde(default)]
    pub variance: VarianceOptions,
    #[serde(default = "default_level")]
    pub level: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Budget(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Budget(_) => EXIT_BUDGET,
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Unidentifiable(_) | FitError::Quadrature(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<IbError> for CliError {
    fn from(e: IbError) -> Self {
        match e {
            IbError::FailureBudget { .. } => CliError::Budget(e.to_string()),
            IbError::AllFailed | IbError::FirstStageFailed | IbError::NotSpd => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Fixture { .. } => CliError::Usage(e.to_string()),
            OracleError::NoConvergence(_) => CliError::Numerical(e.to_string()),
        }
    }
}

fn io_usage(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_usage(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_usage(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_usage(p, e)),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).and_then(|_| so.flush()).map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("result serializes") + "\n"
}

enum Problem {
    Logistic(LogisticBinding),
    Glmm(GlmmBinding),
    Toy(Toy),
}

struct Loaded {
    config: RunConfig,
    data: Dataset,
    problem: Problem,
}

fn load(args: &DataArgs) -> Result<Loaded, CliError> {
    let config: RunConfig = read_json(&args.config)?;
    let data = Dataset::read_csv(&args.data).map_err(|e| io_usage(&args.data, e))?;
    let problem = match (&config.estimator, &config.toy) {
        (Some(spec), None) => {
            if spec.kind.is_glmm() {
                let cluster = data
                    .cluster
                    .clone()
                    .ok_or_else(|| io_usage(&args.data, "missing column `cluster` for a random-intercept estimator"))?;
                Problem::Glmm(GlmmBinding::new(GlmmDesign::new(data.x.clone(), cluster)?, spec.clone())?)
            } else {
                Problem::Logistic(LogisticBinding::new(LogisticDesign::new(data.x.clone())?, spec.clone())?)
            }
        }
        (None, Some(toy)) => {
            toy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Problem::Toy(toy.clone())
        }
        _ => return Err(io_usage(&args.config, "set exactly one of `estimator` and `toy`")),
    };
    Ok(Loaded { config, data, problem })
}

/// The initial estimate on the observed data.
fn observed(loaded: &Loaded, args: &DataArgs) -> Result<(DVector<f64>, Option<FitResult>), CliError> {
    let y = &loaded.data.y;
    match &loaded.problem {
        Problem::Logistic(b) => {
            let fit = b.estimate(y)?;
            Ok((fit.theta_hat.clone(), Some(fit)))
        }
        Problem::Glmm(b) => {
            let fit = b.estimate(y)?;
            Ok((fit.theta_hat.clone(), Some(fit)))
        }
        Problem::Toy(toy) => {
            if let Some(v) = &loaded.config.pi_obs {
                if v.len() != toy.dim() {
                    return Err(io_usage(&args.config, format!("pi_obs has {} entries, the toy has {}", v.len(), toy.dim())));
                }
                return Ok((DVector::from_column_slice(v), None));
            }
            match toy {
                Toy::Variance(t) => {
                    if y.len() != t.n {
                        return Err(io_usage(&args.data, format!("{} rows for a toy with n = {}", y.len(), t.n)));
                    }
                    let mean = y.mean();
                    let v = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
                    Ok((DVector::from_element(1, v), None))
                }
                Toy::LinearBias(_) => Err(io_usage(&args.config, "a linear-bias toy needs `pi_obs`")),
            }
        }
    }
}

pub fn cmd_fit(args: &DataArgs) -> Result<i32, CliError> {
    let loaded = load(args)?;
    let (pi, fit) = observed(&loaded, args)?;
    let Some(fit) = fit else {
        emit(args.out.as_deref(), &to_json(&serde_json::json!({ "theta_hat": pi.as_slice() })))?;
        return Ok(EXIT_OK);
    };
    emit(args.out.as_deref(), &to_json(&fit))?;
    if fit.is_usable() {
        Ok(EXIT_OK)
    } else {
        eprintln!("estimator did not converge");
        Ok(EXIT_NUMERICAL)
    }
}

#[derive(Debug, Serialize)]
struct IbReport<'a> {
    manifest: RunManifest,
    pi_obs: &'a [f64],
    theta_hat: &'a [f64],
    trace: &'a IbTrace,
}

#[derive(Debug, Serialize)]
struct InferRow {
    coordinate: usize,
    estimate: f64,
    se: f64,
    lo: f64,
    hi: f64,
}

fn run_ib<B: Binding>(
    binding: &B,
    pi_obs: &DVector<f64>,
    args: &IbArgs,
    cfg: &IbConfig,
    config: &RunConfig,
    infer: bool,
) -> Result<i32, CliError> {
    let out = ib_run(pi_obs, binding, cfg)?;
    let d = &args.data;
    if !out.trace.converged {
        eprintln!("iterative bootstrap stopped after {} iterations without converging", out.trace.iterates.len() - 1);
    }
    if !infer {
        let manifest = RunManifest::new("ib", Some(&d.config), Some(cfg.seed), d.out.as_deref(), None);
        let report = IbReport { manifest, pi_obs: pi_obs.as_slice(), theta_hat: out.theta.as_slice(), trace: &out.trace };
        emit(d.out.as_deref(), &to_json(&report))?;
        return Ok(if out.trace.converged { EXIT_OK } else { EXIT_NUMERICAL });
    }
    if !out.trace.converged {
        return Err(CliError::Numerical("no converged estimate to build intervals around".into()));
    }
    let var = estimate_variance(&out.theta, binding, cfg, &config.variance, Some(&out.last_fits))?;
    let intervals = normal_ci(&out.theta, &var.var_theta, config.level)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (j, iv) in intervals.iter().enumerate() {
        w.serialize(InferRow { coordinate: j + 1, estimate: iv.estimate, se: iv.se, lo: iv.lo, hi: iv.hi })
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    emit(d.out.as_deref(), &String::from_utf8(bytes).expect("csv is utf-8"))?;
    Ok(EXIT_OK)
}

pub fn cmd_ib(args: &IbArgs, infer: bool) -> Result<i32, CliError> {
    let loaded = load(&args.data)?;
    let (pi, fit) = observed(&loaded, &args.data)?;
    if let Some(f) = &fit {
        if !f.is_usable() {
            return Err(CliError::Numerical("initial estimator did not converge on the observed data".into()));
        }
    }
    let mut cfg = loaded.config.ib.clone();
    args.ib.apply(&mut cfg);
    cfg.validate()?;
    match &loaded.problem {
        Problem::Logistic(b) => run_ib(b, &pi, args, &cfg, &loaded.config, infer),
        Problem::Glmm(b) => run_ib(b, &pi, args, &cfg, &loaded.config, infer),
        Problem::Toy(t) => run_ib(t, &pi, args, &cfg, &loaded.config, infer),
    }
}

pub fn cmd_study(args: &StudyArgs) -> Result<i32, CliError> {
    let mut setting: SimSetting = match (&args.config, &args.preset) {
        (Some(p), _) => read_json(p)?,
        (None, Some(name)) => SimSetting::preset(name).ok_or_else(|| CliError::Usage(format!("unknown preset `{name}`")))?,
        (None, None) => return Err(CliError::Usage("give --config or --preset".into())),
    };
    if let Some(h) = args.h {
        setting.h = h;
    }
    if let Some(r) = args.replicates {
        setting.replicates = r;
    }
    setting.validate()?;
    eprintln!("study {}: {} replicates, H = {}", setting.name, setting.replicates, setting.h);
    let report = run_setting(&setting, args.seed, args.workers)?;
    let (csv_path, json_path) = report.write_files(&args.out)?;
    eprintln!("wrote {} and {} in {:.1} s", csv_path.display(), json_path.display(), report.wall_time_s);
    let manifest = RunManifest::new("study", args.config.as_deref(), Some(args.seed), Some(&args.out), args.workers);
    emit(None, &to_json(&serde_json::json!({
        "manifest": manifest,
        "csv": csv_path.display().to_string(),
        "json": json_path.display().to_string(),
        "failures": report.failures,
        "budget_exceeded": report.budget_exceeded,
    })))?;
    if report.budget_exceeded {
        return Err(CliError::Budget(format!("failure budget exceeded: {:?}", report.failures)));
    }
    Ok(EXIT_OK)
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<i32, CliError> {
    let dir = args.fixtures.clone().unwrap_or_else(oracle::fixture_dir);
    if args.regen {
        let exp = oracle::regenerate(&dir)?;
        eprintln!("rewrote {}", dir.join(oracle::EXPECTED_FILE).display());
        emit(None, &to_json(&exp))?;
        return Ok(EXIT_OK);
    }
    let checks = oracle::check_fixtures(&dir)?;
    emit(None, &to_json(&checks))?;
    Ok(if checks.iter().all(|c| c.pass) { EXIT_OK } else { EXIT_NUMERICAL })
}

pub fn execute(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Ib(a) => cmd_ib(a, false),
        Command::Infer(a) => cmd_ib(a, true),
        Command::Study(a) => cmd_study(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

/// Parse, run and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
