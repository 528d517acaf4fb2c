//! IB bindings for the logistic and random-intercept models: simulate on the
//! fixed design, then apply the configured initial estimator.

use nalgebra::DVector;

use crate::estimators::{leverage_weights, EstimatorKind, EstimatorSpec, FitError};
use crate::ib::Binding;
use crate::rng::SimRng;
use crate::sim::{simulate_glmm, simulate_logistic, GlmmDesign, LogisticDesign};

#[derive(Debug, Clone)]
pub struct LogisticBinding {
    pub design: LogisticDesign,
    pub spec: EstimatorSpec,
    weights: Option<DVector<f64>>,
}

impl LogisticBinding {
    pub fn new(design: LogisticDesign, spec: EstimatorSpec) -> Result<Self, FitError> {
        spec.validate()?;
        if spec.kind.is_glmm() {
            return Err(FitError::WrongModel { kind: spec.kind, model: "logistic" });
        }
        // X is fixed across simulations, so the leverages are too
        let weights = match spec.kind {
            EstimatorKind::LogisticRobust => Some(leverage_weights(&design)?),
            _ => None,
        };
        Ok(Self { design, spec, weights })
    }

    /// Initial estimate on a binary response.
    pub fn estimate(&self, y: &DVector<f64>) -> Result<crate::estimators::FitResult, FitError> {
        match &self.weights {
            Some(w) => self.spec.fit_logistic_weighted(&self.design, w, y),
            None => self.spec.fit_logistic(&self.design, y),
        }
    }
}

impl Binding for LogisticBinding {
    fn dim(&self) -> usize {
        self.design.q()
    }

    fn simulate_estimate(&self, theta: &DVector<f64>, rng: &mut SimRng) -> Option<DVector<f64>> {
        let y = simulate_logistic(&self.design, theta, rng).ok()?;
        let fit = self.estimate(&y).ok()?;
        fit.is_usable().then_some(fit.theta_hat)
    }
}

#[derive(Debug, Clone)]
pub struct GlmmBinding {
    pub design: GlmmDesign,
    pub spec: EstimatorSpec,
}

impl GlmmBinding {
    pub fn new(design: GlmmDesign, spec: EstimatorSpec) -> Result<Self, FitError> {
        spec.validate()?;
        if !spec.kind.is_glmm() {
            return Err(FitError::WrongModel { kind: spec.kind, model: "random-intercept" });
        }
        Ok(Self { design, spec })
    }

    pub fn estimate(&self, y: &DVector<f64>) -> Result<crate::estimators::FitResult, FitError> {
        self.spec.fit_glmm(&self.design, y)
    }
}

impl Binding for GlmmBinding {
    fn dim(&self) -> usize {
        self.design.dim()
    }

    fn simulate_estimate(&self, theta: &DVector<f64>, rng: &mut SimRng) -> Option<DVector<f64>> {
        let y = simulate_glmm(&self.design, theta, self.spec.variance_scale, rng).ok()?;
        let fit = self.estimate(&y).ok()?;
        fit.is_usable().then_some(fit.theta_hat)
    }

    /// Keep the variance coordinate inside `[1e-8, 1e4]` on its stored scale.
    fn clamp(&self, theta: &mut DVector<f64>) -> bool {
        let j = theta.len() - 1;
        let (lo, hi) = self.spec.variance_scale.bounds();
        let v = theta[j].clamp(lo, hi);
        let changed = v != theta[j];
        theta[j] = v;
        changed
    }
}
