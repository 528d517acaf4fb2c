//! The iterative bootstrap: a fixed-point iteration matching the observed
//! initial estimate with the average initial estimate over simulated samples.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::pairwise_mean;
use crate::rng::{derive_key, SeedSet, SimRng, STREAM_IB};

/// A model simulator paired with an initial estimator.
///
/// `simulate_estimate` draws one sample at `theta` from `rng` and returns the
/// initial estimate computed on it, or `None` when the fit failed. It must be
/// a pure function of `(theta, rng state)`.
pub trait Binding: Sync {
    fn dim(&self) -> usize;

    fn simulate_estimate(&self, theta: &DVector<f64>, rng: &mut SimRng) -> Option<DVector<f64>>;

    /// Expected initial estimate `pi(theta, n)` in closed form, when known.
    fn exact(&self, _theta: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    /// Move `theta` back into the valid region; returns whether it changed.
    fn clamp(&self, _theta: &mut DVector<f64>) -> bool {
        false
    }
}

impl<B: Binding + ?Sized> Binding for &B {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn simulate_estimate(&self, theta: &DVector<f64>, rng: &mut SimRng) -> Option<DVector<f64>> {
        (**self).simulate_estimate(theta, rng)
    }
    fn exact(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        (**self).exact(theta)
    }
    fn clamp(&self, theta: &mut DVector<f64>) -> bool {
        (**self).clamp(theta)
    }
}

/// Binding assembled from closures.
pub struct ProblemBinding<S, E = fn(&DVector<f64>) -> Option<DVector<f64>>> {
    pub dim: usize,
    pub simulate: S,
    pub exact: Option<E>,
}

impl<S> ProblemBinding<S>
where
    S: Fn(&DVector<f64>, &mut SimRng) -> Option<DVector<f64>> + Sync,
{
    pub fn new(dim: usize, simulate: S) -> Self {
        Self { dim, simulate, exact: None }
    }
}

impl<S, E> Binding for ProblemBinding<S, E>
where
    S: Fn(&DVector<f64>, &mut SimRng) -> Option<DVector<f64>> + Sync,
    E: Fn(&DVector<f64>) -> Option<DVector<f64>> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn simulate_estimate(&self, theta: &DVector<f64>, rng: &mut SimRng) -> Option<DVector<f64>> {
        (self.simulate)(theta, rng)
    }
    fn exact(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        self.exact.as_ref().and_then(|f| f(theta))
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum IbError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("binding has no closed-form expectation")]
    NoExactBinding,
    #[error("{failures} of {total} inner fits failed at iteration {iteration} (at most {allowed} allowed)")]
    FailureBudget { iteration: usize, failures: usize, total: usize, allowed: usize },
    #[error("all inner fits failed")]
    AllFailed,
    #[error("need at least {needed} step norms above 1e-12, found {usable}")]
    InsufficientPoints { needed: usize, usable: usize },
    #[error("weight matrix is not symmetric positive definite")]
    NotSpd,
    #[error("first stage did not converge")]
    FirstStageFailed,
}

/// Number of simulated samples averaged at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simulations {
    /// Use the closed-form expectation (`H = infinity`).
    Exact,
    MonteCarlo(usize),
}

impl Simulations {
    pub fn count(self) -> Option<usize> {
        match self {
            Simulations::Exact => None,
            Simulations::MonteCarlo(h) => Some(h),
        }
    }
}

/// Step-size schedule `epsilon_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Damping {
    Constant { epsilon: f64 },
    /// `epsilon_k = max(min, initial * rate^(k-1))`.
    Geometric { initial: f64, rate: f64, min: f64 },
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Constant { epsilon: 1.0 }
    }
}

impl Damping {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Damping::Constant { epsilon } => epsilon,
            Damping::Geometric { initial, rate, min } => (initial * rate.powi(k as i32 - 1)).max(min),
        }
    }

    fn validate(&self) -> Result<(), IbError> {
        let ok = |e: f64| e > 0.0 && e <= 1.0;
        let valid = match *self {
            Damping::Constant { epsilon } => ok(epsilon),
            Damping::Geometric { initial, rate, min } => ok(initial) && ok(min) && rate > 0.0 && rate <= 1.0,
        };
        if valid {
            Ok(())
        } else {
            Err(IbError::InvalidConfig(format!("damping {self:?} must stay in (0, 1]")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IbConfig {
    pub simulations: Simulations,
    pub max_iter: usize,
    /// Threshold on the Euclidean step norm; `None` means `1e-6 * sqrt(p)`.
    pub tol: Option<f64>,
    pub damping: Damping,
    pub seed: u64,
    /// Reuse the same simulation seeds at every iteration.
    pub fixed_seeds: bool,
    /// Largest tolerated fraction of failed inner fits per step.
    pub failure_budget: f64,
    /// Stop when the residual norm has not improved for this many
    /// iterations and return the best iterate (0 disables). Needed for
    /// binary-data bindings, whose simulated average is piecewise constant.
    pub stall_patience: usize,
    /// After this many consecutive growing steps, halve a constant damping
    /// and restart from the best iterate (0 disables).
    pub divergence_patience: usize,
}

impl Default for IbConfig {
    fn default() -> Self {
        Self {
            simulations: Simulations::MonteCarlo(100),
            max_iter: 200,
            tol: None,
            damping: Damping::default(),
            seed: 0,
            fixed_seeds: true,
            failure_budget: 0.1,
            stall_patience: 10,
            divergence_patience: 10,
        }
    }
}

impl IbConfig {
    pub fn exact() -> Self {
        Self { simulations: Simulations::Exact, ..Self::default() }
    }

    pub fn monte_carlo(h: usize, seed: u64) -> Self {
        Self { simulations: Simulations::MonteCarlo(h), seed, ..Self::default() }
    }

    pub fn tolerance(&self, p: usize) -> f64 {
        self.tol.unwrap_or(1e-6 * (p as f64).sqrt())
    }

    pub fn seeds(&self) -> SeedSet {
        SeedSet::new(self.seed, self.simulations.count().unwrap_or(0))
    }

    pub fn validate(&self) -> Result<(), IbError> {
        if self.simulations == Simulations::MonteCarlo(0) {
            return Err(IbError::InvalidConfig("H must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(IbError::InvalidConfig("max_iter must be positive".into()));
        }
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(IbError::InvalidConfig(format!("tol = {t} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return Err(IbError::InvalidConfig("failure_budget must lie in [0, 1]".into()));
        }
        self.damping.validate()
    }

    fn round(&self, k: usize) -> usize {
        if self.fixed_seeds {
            0
        } else {
            k.saturating_sub(1)
        }
    }
}

/// Average simulated initial estimate at one parameter value.
#[derive(Debug, Clone)]
pub struct SimulatedMean {
    pub mean: DVector<f64>,
    /// Successful fits in `h` order (empty in exact mode).
    pub fits: Vec<DVector<f64>>,
    pub failures: usize,
}

/// `(1/H) sum_h pi*_h(theta)` with seeds from batch `round`, or the closed
/// form in exact mode. Fits run in parallel and are averaged in a fixed
/// pairwise order, so the result does not depend on the thread count.
pub fn simulated_mean<B: Binding>(
    theta: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
    round: usize,
) -> Result<SimulatedMean, IbError> {
    match cfg.simulations {
        Simulations::Exact => {
            let mean = binding.exact(theta).ok_or(IbError::NoExactBinding)?;
            Ok(SimulatedMean { mean, fits: Vec::new(), failures: 0 })
        }
        Simulations::MonteCarlo(h) => {
            let seeds = SeedSet::new(cfg.seed, h);
            let results: Vec<Option<DVector<f64>>> = (1..=h)
                .into_par_iter()
                .map(|i| {
                    let mut rng = seeds.simulation(i, round);
                    binding
                        .simulate_estimate(theta, &mut rng)
                        .filter(|v| v.len() == binding.dim() && v.iter().all(|x| x.is_finite()))
                })
                .collect();
            let fits: Vec<DVector<f64>> = results.into_iter().flatten().collect();
            let failures = h - fits.len();
            let allowed = (cfg.failure_budget * h as f64).floor() as usize;
            if fits.is_empty() {
                return Err(IbError::AllFailed);
            }
            if failures > allowed {
                return Err(IbError::FailureBudget { iteration: round, failures, total: h, allowed });
            }
            Ok(SimulatedMean { mean: pairwise_mean(&fits), fits, failures })
        }
    }
}

fn check_dim<B: Binding>(v: &DVector<f64>, binding: &B) -> Result<(), IbError> {
    if v.len() != binding.dim() {
        return Err(IbError::Dimension { expected: binding.dim(), got: v.len() });
    }
    Ok(())
}

/// `theta_prev + epsilon (pi_obs - mean)`. With `epsilon = 1` the sum is
/// formed as `(theta_prev + pi_obs) - mean`, so that from `theta_prev =
/// pi_obs` the result is exactly `2 pi_obs - mean`.
fn update(theta_prev: &DVector<f64>, pi_obs: &DVector<f64>, mean: &DVector<f64>, epsilon: f64) -> DVector<f64> {
    if epsilon == 1.0 {
        (theta_prev + pi_obs) - mean
    } else {
        theta_prev + (pi_obs - mean) * epsilon
    }
}

/// One iteration `theta^(k)` from `theta^(k-1)`.
pub fn ib_step<B: Binding>(
    theta_prev: &DVector<f64>,
    pi_obs: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
    k: usize,
) -> Result<DVector<f64>, IbError> {
    cfg.validate()?;
    check_dim(theta_prev, binding)?;
    check_dim(pi_obs, binding)?;
    let sm = simulated_mean(theta_prev, binding, cfg, cfg.round(k.max(1)))?;
    let mut next = update(theta_prev, pi_obs, &sm.mean, cfg.damping.at(k.max(1)));
    binding.clamp(&mut next);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The last step norm fell below the tolerance.
    StepTolerance,
    /// The residual norm stopped improving; the best iterate is returned.
    Stalled,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbTrace {
    #[serde(with = "crate::serde_vec::list")]
    pub iterates: Vec<DVector<f64>>,
    pub step_norms: Vec<f64>,
    /// Residual norm at each evaluated iterate, in order.
    pub residual_history: Vec<f64>,
    /// Residual norm at the returned estimate.
    pub residual_norm: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub inner_failures: usize,
    pub clamped: usize,
    pub damping_restarts: usize,
    pub final_epsilon: f64,
    /// Total initial-estimator evaluations, including nested ones.
    pub inner_fits: usize,
    pub wall_time_s: f64,
}

/// Result of [`ib_run`]: the estimate, its trace and the simulated fits at
/// the estimate (reusable for variance estimation).
#[derive(Debug, Clone)]
pub struct IbOutcome {
    pub theta: DVector<f64>,
    pub trace: IbTrace,
    pub last_fits: Vec<DVector<f64>>,
}

/// Iterate from `theta^(0) = pi_obs`.
pub fn ib_run<B: Binding>(pi_obs: &DVector<f64>, binding: &B, cfg: &IbConfig) -> Result<IbOutcome, IbError> {
    ib_run_from(pi_obs, pi_obs, binding, cfg)
}

pub fn ib_run_from<B: Binding>(
    start: &DVector<f64>,
    pi_obs: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
) -> Result<IbOutcome, IbError> {
    cfg.validate()?;
    check_dim(start, binding)?;
    check_dim(pi_obs, binding)?;
    let timer = Instant::now();
    let p = binding.dim();
    let tol = cfg.tolerance(p);
    let per_eval = cfg.simulations.count().unwrap_or(0);
    let stall_enabled = cfg.stall_patience > 0 && matches!(cfg.simulations, Simulations::MonteCarlo(_));

    let mut theta = start.clone();
    let mut clamped = usize::from(binding.clamp(&mut theta));
    let mut iterates = vec![theta.clone()];
    let mut step_norms = Vec::new();
    let mut residual_history = Vec::new();
    let mut inner_failures = 0;
    let mut inner_fits = 0;
    let mut damping = cfg.damping;
    let mut restarts = 0;
    let mut growing = 0;
    let mut since_best = 0;
    let mut best: Option<(f64, DVector<f64>, Vec<DVector<f64>>)> = None;
    let mut stop = StopReason::MaxIter;
    let mut final_eval: Option<(f64, Vec<DVector<f64>>)> = None;
    let mut last_epsilon = damping.at(1);

    for k in 1..=cfg.max_iter {
        let sm = simulated_mean(&theta, binding, cfg, cfg.round(k)).map_err(|e| at_iteration(e, k))?;
        inner_failures += sm.failures;
        inner_fits += per_eval;
        let resid = pi_obs - &sm.mean;
        let rnorm = resid.norm();
        residual_history.push(rnorm);
        if best.as_ref().is_none_or(|b| rnorm < b.0) {
            best = Some((rnorm, theta.clone(), sm.fits.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if stall_enabled && since_best >= cfg.stall_patience {
            stop = StopReason::Stalled;
            break;
        }

        let epsilon = damping.at(k);
        last_epsilon = epsilon;
        let mut next = update(&theta, pi_obs, &sm.mean, epsilon);
        if binding.clamp(&mut next) {
            clamped += 1;
        }
        let step = (&next - &theta).norm();
        if step_norms.last().is_some_and(|&prev| step > prev) {
            growing += 1;
        } else {
            growing = 0;
        }
        step_norms.push(step);
        iterates.push(next.clone());
        theta = next;

        if step <= tol {
            stop = StopReason::StepTolerance;
            let sm = simulated_mean(&theta, binding, cfg, cfg.round(k + 1)).map_err(|e| at_iteration(e, k + 1))?;
            inner_failures += sm.failures;
            inner_fits += per_eval;
            let r = (pi_obs - &sm.mean).norm();
            residual_history.push(r);
            final_eval = Some((r, sm.fits));
            break;
        }
        if !step.is_finite() {
            break;
        }
        if cfg.divergence_patience > 0 && growing >= cfg.divergence_patience {
            if let Damping::Constant { epsilon } = damping {
                damping = Damping::Constant { epsilon: epsilon / 2.0 };
                restarts += 1;
                growing = 0;
                let restart = best.as_ref().map(|b| b.1.clone()).unwrap_or_else(|| start.clone());
                step_norms.push((&restart - &theta).norm());
                iterates.push(restart.clone());
                theta = restart;
            }
        }
    }

    let (theta, residual_norm, last_fits) = match (stop, final_eval) {
        (StopReason::StepTolerance, Some((r, fits))) => (theta, r, fits),
        (StopReason::Stalled, _) => {
            let (r, t, fits) = best.expect("stall implies an evaluated iterate");
            (t, r, fits)
        }
        _ => {
            // max_iter without settling: report the residual at the last iterate
            let sm = simulated_mean(&theta, binding, cfg, cfg.round(cfg.max_iter + 1));
            match sm {
                Ok(sm) => {
                    inner_failures += sm.failures;
                    inner_fits += per_eval;
                    let r = (pi_obs - &sm.mean).norm();
                    (theta, r, sm.fits)
                }
                Err(_) => (theta, f64::NAN, Vec::new()),
            }
        }
    };

    let trace = IbTrace {
        iterates,
        step_norms,
        residual_history,
        residual_norm,
        converged: stop != StopReason::MaxIter,
        stop_reason: stop,
        inner_failures,
        clamped,
        damping_restarts: restarts,
        final_epsilon: last_epsilon,
        inner_fits,
        wall_time_s: timer.elapsed().as_secs_f64(),
    };
    Ok(IbOutcome { theta, trace, last_fits })
}

fn at_iteration(err: IbError, k: usize) -> IbError {
    match err {
        IbError::FailureBudget { failures, total, allowed, .. } => {
            IbError::FailureBudget { iteration: k, failures, total, allowed }
        }
        e => e,
    }
}

/// `pi_obs - (1/H) sum_h pi*_h(theta)` with the fixed seed batch.
pub fn ii_residual<B: Binding>(
    theta: &DVector<f64>,
    pi_obs: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
) -> Result<DVector<f64>, IbError> {
    cfg.validate()?;
    check_dim(theta, binding)?;
    check_dim(pi_obs, binding)?;
    let sm = simulated_mean(theta, binding, cfg, 0)?;
    Ok(pi_obs - sm.mean)
}

/// `r' Phi r` for the residual `r` at `theta`.
pub fn ii_objective<B: Binding>(
    theta: &DVector<f64>,
    pi_obs: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
    phi: &DMatrix<f64>,
) -> Result<f64, IbError> {
    let p = binding.dim();
    if phi.shape() != (p, p) {
        return Err(IbError::Dimension { expected: p, got: phi.nrows() });
    }
    let asym = (phi - phi.transpose()).amax();
    if asym > 1e-12 * phi.amax().max(1.0) || phi.clone().cholesky().is_none() {
        return Err(IbError::NotSpd);
    }
    let r = ii_residual(theta, pi_obs, binding, cfg)?;
    Ok(r.dot(&(phi * &r)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub epsilon: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares fit of `log step_norm` on the iteration index; returns
/// `exp(slope)` and the R-squared. Step norms at or below `1e-12` are ignored.
pub fn convergence_rate_fit(trace: &IbTrace) -> Result<RateFit, IbError> {
    const NEEDED: usize = 5;
    let pts: Vec<(f64, f64)> = trace
        .step_norms
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 1e-12 && s.is_finite())
        .map(|(k, &s)| ((k + 1) as f64, s.ln()))
        .collect();
    if pts.len() < NEEDED {
        return Err(IbError::InsufficientPoints { needed: NEEDED, usable: pts.len() });
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(RateFit { epsilon: slope.exp(), r2, points: pts.len() })
}

/// Initial estimator replaced by the IB estimate itself: `theta` maps to the
/// IB estimate computed on a sample drawn at `theta`, using one fixed set of
/// inner seeds.
struct ReIbBinding<'a, B: Binding> {
    inner: &'a B,
    inner_cfg: IbConfig,
    fits: AtomicUsize,
}

impl<B: Binding> Binding for ReIbBinding<'_, B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn simulate_estimate(&self, theta: &DVector<f64>, rng: &mut SimRng) -> Option<DVector<f64>> {
        let pi = self.inner.simulate_estimate(theta, rng)?;
        self.fits.fetch_add(1, Ordering::Relaxed);
        let run = ib_run(&pi, self.inner, &self.inner_cfg).ok()?;
        self.fits.fetch_add(run.trace.inner_fits, Ordering::Relaxed);
        run.trace.converged.then_some(run.theta)
    }

    fn exact(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let pi = self.inner.exact(theta)?;
        let mut cfg = self.inner_cfg.clone();
        cfg.simulations = Simulations::Exact;
        let run = ib_run(&pi, self.inner, &cfg).ok()?;
        run.trace.converged.then_some(run.theta)
    }

    fn clamp(&self, theta: &mut DVector<f64>) -> bool {
        self.inner.clamp(theta)
    }
}

/// Result of [`two_step_ib`].
#[derive(Debug, Clone)]
pub struct TwoStepOutcome {
    pub first: IbOutcome,
    pub second: IbOutcome,
}

/// Run the IB once, then again with the first-stage IB estimator as the
/// initial estimator. `second.trace.inner_fits` includes all nested fits.
pub fn two_step_ib<B: Binding>(pi_obs: &DVector<f64>, binding: &B, cfg: &IbConfig) -> Result<TwoStepOutcome, IbError> {
    let first = ib_run(pi_obs, binding, cfg)?;
    if !first.trace.converged {
        return Err(IbError::FirstStageFailed);
    }
    let inner_cfg = IbConfig { seed: derive_key(cfg.seed, STREAM_IB, 0), ..cfg.clone() };
    let re = ReIbBinding { inner: binding, inner_cfg, fits: AtomicUsize::new(0) };
    let mut second = ib_run(&first.theta, &re, cfg)?;
    second.trace.inner_fits = re.fits.load(Ordering::Relaxed);
    Ok(TwoStepOutcome { first, second })
}
