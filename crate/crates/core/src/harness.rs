//! Monte Carlo studies: generate data per setting, run an estimator bank on
//! every replicate and aggregate bias, RMSE and Monte Carlo standard errors.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bindings::{GlmmBinding, LogisticBinding};
use crate::estimators::{EstimatorKind, EstimatorSpec, FitResult};
use crate::ib::{ib_run, IbConfig, Simulations};
use crate::rng::{SeedSet, SimRng};
use crate::sim::{draw_covariates, simulate_glmm, simulate_logistic, GlmmDesign, LogisticDesign, VarianceScale};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("degenerate response: all observations in one class")]
    DegenerateResponse,
    #[error("contamination rate {0} outside [0, 0.5)")]
    Rate(f64),
    #[error("need at least 2 successful replicates for {0}")]
    InsufficientReplicates(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lrm,
    LrmRandomIntercept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationMode {
    /// Flip the most confidently fitted ones and zeros.
    #[default]
    Extreme,
    /// Flip randomly chosen ones and zeros.
    Random,
}

/// One column of the estimator bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub label: String,
    pub estimator: EstimatorSpec,
    /// Use the estimator as the initial estimator of an IB run.
    #[serde(default)]
    pub ib: bool,
    /// Report the finite last iterate when the solver stops at its iteration
    /// cap instead of counting the replicate as failed. Only for plain
    /// (non-IB) entries; the raw robust estimator often has its supremum at
    /// infinity and is reported after `irls.max_iter` steps.
    #[serde(default)]
    pub keep_unconverged: bool,
}

impl BankEntry {
    pub fn new(label: &str, estimator: EstimatorSpec, ib: bool) -> Self {
        Self { label: label.to_string(), estimator, ib, keep_unconverged: false }
    }

    pub fn keeping_unconverged(mut self) -> Self {
        self.keep_unconverged = true;
        self
    }
}

/// Iteration cap of the raw robust estimator in the bank.
pub const RAW_ROBUST_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub name: String,
    pub model: ModelKind,
    /// Total observations (`m * cluster_size` for the random-intercept model).
    pub n: usize,
    /// Covariate count. The logistic model has no separate intercept; the
    /// random-intercept model adds `beta_0` and `sigma^2`.
    pub q: usize,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub cluster_size: Option<usize>,
    /// Simulations per IB step.
    pub h: usize,
    /// Regression coefficients (`beta_0` first for the random-intercept model).
    pub beta_true: Vec<f64>,
    #[serde(default)]
    pub sigma2_true: Option<f64>,
    pub delta: f64,
    #[serde(default)]
    pub covariate_mean: f64,
    /// Covariate variance; `None` means `4 / sqrt(n)`.
    #[serde(default)]
    pub covariate_variance: Option<f64>,
    #[serde(default)]
    pub contamination_rate: f64,
    #[serde(default)]
    pub contamination_mode: ContaminationMode,
    pub replicates: usize,
    pub estimators: Vec<BankEntry>,
    /// IB settings; `simulations` and `seed` are set per replicate.
    #[serde(default)]
    pub ib: IbConfig,
    /// Largest tolerated failure fraction per estimator.
    #[serde(default = "default_replicate_budget")]
    pub failure_budget: f64,
    #[serde(default)]
    pub faithful: bool,
}

fn default_replicate_budget() -> f64 {
    0.2
}

pub const BETA_PATTERN: [f64; 4] = [5.0, 5.0, -7.0, -7.0];

fn beta_pattern(len: usize) -> Vec<f64> {
    (0..len).map(|j| BETA_PATTERN.get(j).copied().unwrap_or(0.0)).collect()
}

/// Logistic bank: MLE, MLE-BR, IB-MLE, ROB, IB-ROB.
pub fn lrm_bank(delta: f64) -> Vec<BankEntry> {
    vec![
        BankEntry::new("MLE", EstimatorSpec::new(EstimatorKind::LogisticMle), false),
        BankEntry::new("MLE-BR", EstimatorSpec::new(EstimatorKind::LogisticFirth), false),
        BankEntry::new("IB-MLE", EstimatorSpec::new(EstimatorKind::LogisticMle).with_delta(delta), true),
        BankEntry::new("ROB", raw_robust_spec(), false).keeping_unconverged(),
        BankEntry::new("IB-ROB", EstimatorSpec::new(EstimatorKind::LogisticRobust).with_delta(delta), true),
    ]
}

fn raw_robust_spec() -> EstimatorSpec {
    let mut spec = EstimatorSpec::new(EstimatorKind::LogisticRobust);
    spec.irls.max_iter = RAW_ROBUST_MAX_ITER;
    spec
}

/// Random-intercept bank: PIRLS, GHQ, IB on PIRLS.
pub fn glmm_bank(delta: f64) -> Vec<BankEntry> {
    vec![
        BankEntry::new("PIRLS", EstimatorSpec::new(EstimatorKind::GlmmPirls).with_delta(delta), false),
        BankEntry::new("GHQ", EstimatorSpec::new(EstimatorKind::GlmmGhq), false),
        BankEntry::new("IB", EstimatorSpec::new(EstimatorKind::GlmmPirls).with_delta(delta), true),
    ]
}

impl SimSetting {
    pub fn lrm(name: &str, q: usize, n: usize, h: usize, replicates: usize, covariate_mean: f64) -> Self {
        Self {
            name: name.to_string(),
            model: ModelKind::Lrm,
            n,
            q,
            m: None,
            cluster_size: None,
            h,
            beta_true: beta_pattern(q),
            sigma2_true: None,
            delta: 0.01,
            covariate_mean,
            covariate_variance: None,
            contamination_rate: 0.0,
            contamination_mode: ContaminationMode::Extreme,
            replicates,
            estimators: lrm_bank(0.01),
            ib: IbConfig::default(),
            failure_budget: default_replicate_budget(),
            faithful: true,
        }
    }

    pub fn glmm(name: &str, q: usize, m: usize, cluster_size: usize, h: usize, replicates: usize) -> Self {
        let mut beta = vec![0.0];
        beta.extend(beta_pattern(q));
        Self {
            name: name.to_string(),
            model: ModelKind::LrmRandomIntercept,
            n: m * cluster_size,
            q,
            m: Some(m),
            cluster_size: Some(cluster_size),
            h,
            beta_true: beta,
            sigma2_true: Some(1.5),
            delta: 0.01,
            covariate_mean: 0.0,
            covariate_variance: None,
            contamination_rate: 0.0,
            contamination_mode: ContaminationMode::Extreme,
            replicates,
            estimators: glmm_bank(0.01),
            ib: IbConfig::default(),
            failure_budget: default_replicate_budget(),
            faithful: true,
        }
    }

    /// Desk-scale version of the first logistic setting.
    pub fn scaled_setting_1() -> Self {
        Self::lrm("lrm-setting1-scaled", 20, 200, 100, 200, 0.0)
    }

    pub fn scaled_setting_1_contaminated() -> Self {
        Self { name: "lrm-setting1-scaled-contaminated".into(), contamination_rate: 0.02, ..Self::scaled_setting_1() }
    }

    pub fn scaled_setting_2() -> Self {
        Self::lrm("lrm-setting2-scaled", 20, 300, 100, 200, 0.6)
    }

    pub fn full_setting_1() -> Self {
        Self::lrm("lrm-setting1-full", 200, 2000, 500, 500, 0.0)
    }

    pub fn full_setting_2() -> Self {
        Self::lrm("lrm-setting2-full", 200, 3000, 500, 500, 0.6)
    }

    pub fn scaled_glmm() -> Self {
        Self::glmm("glmm-scaled", 6, 20, 5, 50, 200)
    }

    pub fn full_glmm_1() -> Self {
        Self::glmm("glmm-setting1-full", 29, 5, 50, 200, 1000)
    }

    pub fn full_glmm_2() -> Self {
        Self::glmm("glmm-setting2-full", 29, 50, 5, 200, 1000)
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "lrm-setting1-scaled" => Self::scaled_setting_1(),
            "lrm-setting1-scaled-contaminated" => Self::scaled_setting_1_contaminated(),
            "lrm-setting2-scaled" => Self::scaled_setting_2(),
            "lrm-setting1-full" => Self::full_setting_1(),
            "lrm-setting2-full" => Self::full_setting_2(),
            "glmm-scaled" => Self::scaled_glmm(),
            "glmm-setting1-full" => Self::full_glmm_1(),
            "glmm-setting2-full" => Self::full_glmm_2(),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 8] = [
        "lrm-setting1-scaled",
        "lrm-setting1-scaled-contaminated",
        "lrm-setting2-scaled",
        "lrm-setting1-full",
        "lrm-setting2-full",
        "glmm-scaled",
        "glmm-setting1-full",
        "glmm-setting2-full",
    ];

    pub fn covariate_variance(&self) -> f64 {
        self.covariate_variance.unwrap_or(4.0 / (self.n as f64).sqrt())
    }

    /// Length of the parameter vector.
    pub fn dim(&self) -> usize {
        match self.model {
            ModelKind::Lrm => self.q,
            ModelKind::LrmRandomIntercept => self.q + 2,
        }
    }

    pub fn truth(&self) -> DVector<f64> {
        let mut t = self.beta_true.clone();
        if self.model == ModelKind::LrmRandomIntercept {
            t.push(self.sigma2_true.unwrap_or(0.0));
        }
        DVector::from_vec(t)
    }

    pub fn coordinate_names(&self) -> Vec<String> {
        match self.model {
            ModelKind::Lrm => (1..=self.q).map(|j| format!("beta_{j}")).collect(),
            ModelKind::LrmRandomIntercept => {
                let mut v: Vec<String> = (0..=self.q).map(|j| format!("beta_{j}")).collect();
                v.push("sigma2".into());
                v
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::InvalidSetting(msg));
        if self.n == 0 || self.q == 0 || self.h == 0 {
            return bad("n, q and h must be positive".into());
        }
        let expected_beta = match self.model {
            ModelKind::Lrm => self.q,
            ModelKind::LrmRandomIntercept => self.q + 1,
        };
        if self.beta_true.len() != expected_beta {
            return bad(format!("beta_true has {} entries, expected {expected_beta}", self.beta_true.len()));
        }
        if !(0.0..0.5).contains(&self.delta) {
            return bad(format!("delta = {} outside [0, 0.5)", self.delta));
        }
        if !(0.0..0.5).contains(&self.contamination_rate) {
            return Err(HarnessError::Rate(self.contamination_rate));
        }
        if let Some(v) = self.covariate_variance {
            if !(v >= 0.0) {
                return bad("covariate_variance must be nonnegative".into());
            }
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return bad("failure_budget must lie in [0, 1]".into());
        }
        if self.model == ModelKind::LrmRandomIntercept {
            let (Some(m), Some(size)) = (self.m, self.cluster_size) else {
                return bad("random-intercept settings need m and cluster_size".into());
            };
            if m * size != self.n {
                return bad(format!("n = {} but m * cluster_size = {}", self.n, m * size));
            }
            match self.sigma2_true {
                Some(s) if s >= 0.0 => {}
                _ => return bad("sigma2_true must be given and nonnegative".into()),
            }
            if self.contamination_rate > 0.0 {
                return bad("contamination is only implemented for the logistic model".into());
            }
        }
        for e in &self.estimators {
            let glmm_model = self.model == ModelKind::LrmRandomIntercept;
            if e.estimator.kind.is_glmm() != glmm_model {
                return bad(format!("estimator {} does not match the model", e.label));
            }
            e.estimator.validate().map_err(|err| HarnessError::InvalidSetting(format!("{}: {err}", e.label)))?;
        }
        let mut labels: Vec<&str> = self.estimators.iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("estimator labels must be unique".into());
        }
        self.ib.validate().map_err(|e| HarnessError::InvalidSetting(e.to_string()))?;
        Ok(())
    }
}

/// Events per variable: `min(#ones, #zeros) / q` with `q` the number of
/// estimated coefficients.
pub fn epv(y: &DVector<f64>, q: usize) -> Result<f64, HarnessError> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.len() - ones;
    if ones == 0 || zeros == 0 {
        return Err(HarnessError::DegenerateResponse);
    }
    Ok(ones.min(zeros) as f64 / q as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contamination {
    pub y: DVector<f64>,
    /// Indices whose response changed, in increasing order.
    pub flipped: Vec<usize>,
    /// Fewer than `k` members in one class, so fewer than `2k` flips.
    pub short: bool,
}

/// Misclassify `k = round(rate n)` ones and `k` zeros. In extreme mode the
/// ones with the largest and the zeros with the smallest fitted probability
/// are flipped; in random mode they are drawn from `rng`.
pub fn contaminate(
    y: &DVector<f64>,
    mu_hat: &DVector<f64>,
    rate: f64,
    mode: ContaminationMode,
    rng: &mut SimRng,
) -> Result<Contamination, HarnessError> {
    if !(0.0..0.5).contains(&rate) {
        return Err(HarnessError::Rate(rate));
    }
    if mu_hat.len() != y.len() {
        return Err(HarnessError::InvalidSetting("mu_hat and y differ in length".into()));
    }
    let n = y.len();
    let k = (rate * n as f64).round() as usize;
    let mut ones: Vec<usize> = (0..n).filter(|&i| y[i] == 1.0).collect();
    let mut zeros: Vec<usize> = (0..n).filter(|&i| y[i] != 1.0).collect();
    let short = ones.len() < k || zeros.len() < k;
    let (k1, k0) = (k.min(ones.len()), k.min(zeros.len()));
    let chosen: Vec<usize> = match mode {
        ContaminationMode::Extreme => {
            ones.sort_by(|&a, &b| mu_hat[b].total_cmp(&mu_hat[a]).then(a.cmp(&b)));
            zeros.sort_by(|&a, &b| mu_hat[a].total_cmp(&mu_hat[b]).then(a.cmp(&b)));
            ones[..k1].iter().chain(&zeros[..k0]).copied().collect()
        }
        ContaminationMode::Random => {
            let a = sample(rng, ones.len(), k1).into_vec();
            let b = sample(rng, zeros.len(), k0).into_vec();
            a.into_iter().map(|i| ones[i]).chain(b.into_iter().map(|i| zeros[i])).collect()
        }
    };
    let mut out = y.clone();
    for &i in &chosen {
        out[i] = 1.0 - out[i];
    }
    let mut flipped = chosen;
    flipped.sort_unstable();
    Ok(Contamination { y: out, flipped, short })
}

/// Estimates of one replicate, one slot per bank entry (`None` = failed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimates: Vec<Option<Vec<f64>>>,
    pub epv: Option<f64>,
    pub contamination_short: bool,
}

enum Problem {
    Lrm(LogisticDesign),
    Glmm(GlmmDesign),
}

/// One replicate, fully determined by `(setting, master, r)`.
pub fn run_replicate(setting: &SimSetting, master: u64, r: usize) -> ReplicateRecord {
    let rep_master = SeedSet::new(master, setting.h).replicate_master(r);
    let seeds = SeedSet::new(rep_master, setting.h);
    let mut record = ReplicateRecord {
        replicate: r,
        estimates: vec![None; setting.estimators.len()],
        epv: None,
        contamination_short: false,
    };
    let var = setting.covariate_variance();
    let x = draw_covariates(setting.n, setting.q, setting.covariate_mean, var, &mut seeds.design());
    let truth = setting.truth();
    let problem = match setting.model {
        ModelKind::Lrm => match LogisticDesign::new(x) {
            Ok(d) => Problem::Lrm(d),
            Err(_) => return record,
        },
        ModelKind::LrmRandomIntercept => {
            match GlmmDesign::balanced(x, setting.m.unwrap_or(0), setting.cluster_size.unwrap_or(0)) {
                Ok(d) => Problem::Glmm(d),
                Err(_) => return record,
            }
        }
    };
    let y = match &problem {
        Problem::Lrm(d) => simulate_logistic(d, &truth, &mut seeds.observed()),
        Problem::Glmm(d) => simulate_glmm(d, &truth, VarianceScale::Variance, &mut seeds.observed()),
    };
    let Ok(mut y) = y else { return record };

    if let (Problem::Lrm(d), true) = (&problem, setting.contamination_rate > 0.0) {
        // fitted probabilities from the pseudo-value MLE on the clean data
        let clean = EstimatorSpec::new(EstimatorKind::LogisticMle).with_delta(setting.delta.max(0.01));
        let Ok(fit) = clean.fit_logistic(d, &y) else { return record };
        let mu = (d.x() * &fit.theta_hat).map(crate::sim::logistic);
        match contaminate(&y, &mu, setting.contamination_rate, setting.contamination_mode, &mut seeds.contamination()) {
            Ok(c) => {
                record.contamination_short = c.short;
                y = c.y;
            }
            Err(_) => return record,
        }
    }
    record.epv = epv(&y, setting.dim()).ok();

    let cfg = IbConfig { simulations: Simulations::MonteCarlo(setting.h), seed: rep_master, ..setting.ib.clone() };
    for (slot, entry) in setting.estimators.iter().enumerate() {
        record.estimates[slot] = match &problem {
            Problem::Lrm(d) => {
                LogisticBinding::new(d.clone(), entry.estimator.clone()).ok().and_then(|b| fit_entry(&b, &y, entry, &cfg))
            }
            Problem::Glmm(d) => {
                GlmmBinding::new(d.clone(), entry.estimator.clone()).ok().and_then(|b| fit_entry(&b, &y, entry, &cfg))
            }
        };
    }
    record
}

trait Estimate: crate::ib::Binding {
    fn fit(&self, y: &DVector<f64>) -> Option<FitResult>;
}

impl Estimate for LogisticBinding {
    fn fit(&self, y: &DVector<f64>) -> Option<FitResult> {
        self.estimate(y).ok()
    }
}

impl Estimate for GlmmBinding {
    fn fit(&self, y: &DVector<f64>) -> Option<FitResult> {
        self.estimate(y).ok()
    }
}

fn fit_entry<B: Estimate>(binding: &B, y: &DVector<f64>, entry: &BankEntry, cfg: &IbConfig) -> Option<Vec<f64>> {
    let fit = binding.fit(y)?;
    let finite = fit.theta_hat.iter().all(|v| v.is_finite());
    if !entry.ib {
        let keep = fit.converged || (entry.keep_unconverged && fit.iterations >= entry.estimator.irls.max_iter);
        return (finite && keep).then(|| fit.theta_hat.iter().copied().collect());
    }
    if !fit.is_usable() {
        return None;
    }
    let pi = fit.theta_hat;
    let out = ib_run(&pi, binding, cfg).ok()?;
    out.trace.converged.then(|| out.theta.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: String,
    pub coordinate: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub mc_se: f64,
    pub n_fail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub format_version: u32,
    pub setting: SimSetting,
    pub master_seed: u64,
    pub rows: Vec<ReportRow>,
    /// Failed replicates per bank entry, in bank order.
    pub failures: Vec<usize>,
    pub budget_exceeded: bool,
    pub mean_epv: Option<f64>,
    pub contamination_short: usize,
    pub wall_time_s: f64,
    pub crate_version: String,
}

impl MCReport {
    pub fn row(&self, estimator: &str, coordinate: usize) -> Option<&ReportRow> {
        let names = self.setting.coordinate_names();
        let name = names.get(coordinate)?;
        self.rows.iter().find(|r| r.estimator == estimator && &r.coordinate == name)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["estimator", "coordinate", "truth", "mean", "bias", "rmse", "mc_se", "n_fail"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.estimator.clone(),
                r.coordinate.clone(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.bias.to_string(),
                r.rmse.to_string(),
                r.mc_se.to_string(),
                r.n_fail.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<name>_seed<seed>.csv` and `<name>_seed<seed>.json` into `dir`.
    pub fn write_files(&self, dir: &std::path::Path) -> Result<(std::path::PathBuf, std::path::PathBuf), HarnessError> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}_seed{}", self.setting.name, self.master_seed);
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(std::fs::File::create(&csv_path)?)?;
        let meta = serde_json::json!({
            "format_version": self.format_version,
            "crate_version": self.crate_version,
            "master_seed": self.master_seed,
            "setting": self.setting,
            "failures": self.setting.estimators.iter().map(|e| e.label.clone()).zip(self.failures.iter().copied()).collect::<std::collections::BTreeMap<_, _>>(),
            "budget_exceeded": self.budget_exceeded,
            "mean_epv": self.mean_epv,
            "contamination_short": self.contamination_short,
            "wall_time_s": self.wall_time_s,
        });
        std::fs::write(&json_path, serde_json::to_string_pretty(&meta)?)?;
        Ok((csv_path, json_path))
    }
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Io(std::io::Error::other(e))
}

/// Per-coordinate mean, bias, RMSE and Monte Carlo standard error of each
/// bank entry over the successful replicates. No replicates gives no rows.
pub fn summarize(setting: &SimSetting, records: &[ReplicateRecord]) -> Result<Vec<ReportRow>, HarnessError> {
    summary_rows(setting, records, true)
}

/// With `strict = false` an entry with fewer than two successes gets NaN rows.
fn summary_rows(setting: &SimSetting, records: &[ReplicateRecord], strict: bool) -> Result<Vec<ReportRow>, HarnessError> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let truth = setting.truth();
    let names = setting.coordinate_names();
    let mut rows = Vec::new();
    for (slot, entry) in setting.estimators.iter().enumerate() {
        let ok: Vec<&Vec<f64>> = records.iter().filter_map(|r| r.estimates[slot].as_ref()).collect();
        let n_fail = records.len() - ok.len();
        if ok.len() < 2 && strict {
            return Err(HarnessError::InsufficientReplicates(entry.label.clone()));
        }
        for j in 0..truth.len() {
            let vals: Vec<f64> = if ok.len() < 2 { Vec::new() } else { ok.iter().map(|v| v[j]).collect() };
            let s = summary_stats(&vals, truth[j]);
            rows.push(ReportRow {
                estimator: entry.label.clone(),
                coordinate: names[j].clone(),
                truth: truth[j],
                mean: s.mean,
                bias: s.bias,
                rmse: s.rmse,
                mc_se: s.mc_se,
                n_fail,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub mc_se: f64,
}

/// Two-pass moments; all fields are NaN for an empty slice.
pub fn summary_stats(vals: &[f64], truth: f64) -> SummaryStats {
    let r = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / r;
    let mse = vals.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / r;
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0) } else { f64::NAN };
    SummaryStats { mean, bias: mean - truth, rmse: mse.sqrt(), mc_se: (var / r).sqrt() }
}

/// Run every replicate and aggregate. `workers = None` uses the ambient
/// thread pool; the report does not depend on it.
pub fn run_setting(setting: &SimSetting, master_seed: u64, workers: Option<usize>) -> Result<MCReport, HarnessError> {
    setting.validate()?;
    let timer = Instant::now();
    let run = || -> Vec<ReplicateRecord> {
        (0..setting.replicates).into_par_iter().map(|r| run_replicate(setting, master_seed, r)).collect()
    };
    let records = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    };
    report_from_records(setting, master_seed, &records, timer.elapsed().as_secs_f64())
}

pub fn report_from_records(
    setting: &SimSetting,
    master_seed: u64,
    records: &[ReplicateRecord],
    wall_time_s: f64,
) -> Result<MCReport, HarnessError> {
    let rows = summary_rows(setting, records, false)?;
    let failures: Vec<usize> = (0..setting.estimators.len())
        .map(|slot| records.iter().filter(|r| r.estimates[slot].is_none()).count())
        .collect();
    let budget = (setting.failure_budget * records.len() as f64).floor() as usize;
    let epvs: Vec<f64> = records.iter().filter_map(|r| r.epv).collect();
    Ok(MCReport {
        format_version: FORMAT_VERSION,
        setting: setting.clone(),
        master_seed,
        rows,
        budget_exceeded: failures.iter().any(|&f| f > budget),
        failures,
        mean_epv: (!epvs.is_empty()).then(|| epvs.iter().sum::<f64>() / epvs.len() as f64),
        contamination_short: records.iter().filter(|r| r.contamination_short).count(),
        wall_time_s,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// Average EPV of the observed responses over `replicates` draws.
pub fn setting_epv(setting: &SimSetting, master: u64, replicates: usize) -> Result<f64, HarnessError> {
    let probe = SimSetting { estimators: Vec::new(), contamination_rate: 0.0, ..setting.clone() };
    let recs: Vec<ReplicateRecord> = (0..replicates).into_par_iter().map(|r| run_replicate(&probe, master, r)).collect();
    let v: Vec<f64> = recs.iter().filter_map(|r| r.epv).collect();
    if v.is_empty() {
        return Err(HarnessError::DegenerateResponse);
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// A scaled setting keeps the coefficient pattern, the covariate rule and
/// the EPV of its source within 20%.
pub fn check_faithful(scaled: &SimSetting, source: &SimSetting, master: u64) -> Result<bool, HarnessError> {
    let expected_pattern = |s: &SimSetting| -> Vec<f64> {
        match s.model {
            ModelKind::Lrm => beta_pattern(s.q),
            ModelKind::LrmRandomIntercept => std::iter::once(0.0).chain(beta_pattern(s.q)).collect(),
        }
    };
    if scaled.model != source.model || scaled.beta_true != expected_pattern(scaled) {
        return Ok(false);
    }
    if scaled.covariate_variance.is_some() || scaled.covariate_mean != source.covariate_mean {
        return Ok(false);
    }
    let a = setting_epv(scaled, master, 20)?;
    let b = setting_epv(source, master, 3)?;
    Ok((a / b - 1.0).abs() <= 0.2)
}
