//! Initial (auxiliary) estimators and comparison estimators.
//!
//! Every estimator is a pure function of `(design, y, spec)`. Non-convergence
//! is reported through [`FitResult::converged`] rather than as an error, so a
//! caller running thousands of fits can count failures and continue.

mod firth;
mod ghq;
mod glmm;
mod logistic;
mod robust;

pub use firth::logistic_firth;
pub use ghq::{gauss_hermite, glmm_ghq, glmm_ghq_with, GhqOptions};
pub use glmm::{glmm_pirls, laplace_objective};
pub use logistic::{log_likelihood, logistic_irls, pseudo_values, SEPARATION_ETA};
pub use robust::{huber_psi, leverage_weights, robust_m_estimator, robust_m_estimator_weighted, robust_score};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::sim::{GlmmDesign, LogisticDesign, VarianceScale};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("invalid estimator settings: {0}")]
    InvalidSpec(String),
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("response of length {got} for {expected} observations")]
    Dimension { expected: usize, got: usize },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("model not identifiable: {0}")]
    Unidentifiable(String),
    #[error("quadrature failure: {0}")]
    Quadrature(String),
    #[error("estimator {kind:?} does not apply to a {model} design")]
    WrongModel { kind: EstimatorKind, model: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "logistic_mle")]
    LogisticMle,
    #[serde(rename = "logistic_firth")]
    LogisticFirth,
    #[serde(rename = "logistic_robust")]
    LogisticRobust,
    #[serde(rename = "glmm_pirls")]
    GlmmPirls,
    #[serde(rename = "glmm_ghq")]
    GlmmGhq,
}

impl EstimatorKind {
    pub fn is_glmm(self) -> bool {
        matches!(self, EstimatorKind::GlmmPirls | EstimatorKind::GlmmGhq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlsControl {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsControl {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

pub const DEFAULT_HUBER_C: f64 = 1.345;
pub const DEFAULT_GHQ_NODES: usize = 15;

fn default_huber_c() -> f64 {
    DEFAULT_HUBER_C
}
fn default_ghq_nodes() -> usize {
    DEFAULT_GHQ_NODES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    /// Pseudo-value constant; `0` fits the raw responses.
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_huber_c")]
    pub huber_c: f64,
    #[serde(default = "default_ghq_nodes")]
    pub ghq_nodes: usize,
    #[serde(default)]
    pub irls: IrlsControl,
    #[serde(default)]
    pub variance_scale: VarianceScale,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            delta: 0.0,
            huber_c: DEFAULT_HUBER_C,
            ghq_nodes: DEFAULT_GHQ_NODES,
            irls: IrlsControl::default(),
            variance_scale: VarianceScale::default(),
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_huber_c(mut self, c: f64) -> Self {
        self.huber_c = c;
        self
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if !(0.0..0.5).contains(&self.delta) {
            return Err(FitError::InvalidSpec(format!("delta = {} outside [0, 0.5)", self.delta)));
        }
        if !(self.huber_c > 0.0) {
            return Err(FitError::InvalidSpec(format!("huber_c = {} must be positive", self.huber_c)));
        }
        if self.ghq_nodes < 1 {
            return Err(FitError::InvalidSpec("ghq_nodes must be at least 1".into()));
        }
        if !(self.irls.tol > 0.0) || self.irls.max_iter == 0 {
            return Err(FitError::InvalidSpec("irls tol and max_iter must be positive".into()));
        }
        Ok(())
    }

    /// Fit a logistic-regression estimator to raw binary responses, applying
    /// the pseudo-value transform first where the estimator uses it.
    pub fn fit_logistic(&self, design: &LogisticDesign, y: &DVector<f64>) -> Result<FitResult, FitError> {
        match self.kind {
            EstimatorKind::LogisticMle => logistic_irls(design, &pseudo_values(y, self.delta)?, self),
            EstimatorKind::LogisticRobust => robust_m_estimator(design, &pseudo_values(y, self.delta)?, self),
            EstimatorKind::LogisticFirth => logistic_firth(design, y, self),
            kind => Err(FitError::WrongModel { kind, model: "logistic" }),
        }
    }

    /// Same as [`fit_logistic`](Self::fit_logistic) with precomputed leverage weights.
    pub fn fit_logistic_weighted(
        &self,
        design: &LogisticDesign,
        weights: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<FitResult, FitError> {
        match self.kind {
            EstimatorKind::LogisticRobust => {
                robust_m_estimator_weighted(design, weights, &pseudo_values(y, self.delta)?, self)
            }
            _ => self.fit_logistic(design, y),
        }
    }

    pub fn fit_glmm(&self, design: &GlmmDesign, y: &DVector<f64>) -> Result<FitResult, FitError> {
        match self.kind {
            EstimatorKind::GlmmPirls => glmm_pirls(design, &pseudo_values(y, self.delta)?, self),
            EstimatorKind::GlmmGhq => glmm_ghq(design, y, self),
            kind => Err(FitError::WrongModel { kind, model: "random-intercept" }),
        }
    }
}

/// Output of one estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: EstimatorKind,
    #[serde(with = "crate::serde_vec")]
    pub theta_hat: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    /// Random-effect variance pinned to its floor.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub boundary: bool,
}

impl FitResult {
    pub fn is_usable(&self) -> bool {
        self.converged && self.theta_hat.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_response(y: &DVector<f64>, n: usize, binary: bool) -> Result<(), FitError> {
    if y.len() != n {
        return Err(FitError::Dimension { expected: n, got: y.len() });
    }
    for &v in y.iter() {
        let ok = if binary { v == 0.0 || v == 1.0 } else { (0.0..=1.0).contains(&v) };
        if !ok {
            return Err(FitError::InvalidResponse(format!(
                "value {v} is not {}",
                if binary { "binary" } else { "in [0, 1]" }
            )));
        }
    }
    Ok(())
}

/// Numerically stable `log(1 + exp(eta))`.
#[inline]
pub(crate) fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// Convergence requires a small score and a small last step; the step
/// condition keeps divergent Newton paths under separation from passing
/// on a vanishing gradient.
pub(crate) const STEP_TOL: f64 = 1e-3;
pub(crate) const MAX_HALVINGS: usize = 20;

pub(crate) fn step_small(step: f64, theta: &DVector<f64>) -> bool {
    step <= STEP_TOL * (1.0 + crate::linalg::sup_norm(theta))
}
