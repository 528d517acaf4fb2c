//! Parametric-bootstrap variance of the IB estimator and normal intervals.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ib::{simulated_mean, Binding, IbConfig, IbError, Simulations};
use crate::linalg::{pairwise_mean, symmetrize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Ib(#[from] IbError),
    #[error("need at least 2 simulated fits, got {0}")]
    TooFewFits(usize),
    #[error("Jacobian is singular or ill-conditioned (condition number {0:e})")]
    Singular(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not positive semi-definite (min eigenvalue {min_eig:e}, trace {trace:e})")]
    NotPsd { min_eig: f64, trace: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub const MAX_CONDITION: f64 = 1e12;
pub const DEFAULT_JACOBIAN_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    #[serde(with = "crate::serde_vec::matrix")]
    pub sigma_pi: DMatrix<f64>,
    #[serde(with = "crate::serde_vec::matrix")]
    pub b_hat: DMatrix<f64>,
    #[serde(with = "crate::serde_vec::matrix")]
    pub var_theta: DMatrix<f64>,
    /// Simulated fits behind `sigma_pi`.
    pub h_used: usize,
    /// `H` in the `(1 + 1/H)` factor; `None` for the closed-form map.
    pub h_inflation: Option<usize>,
}

/// Knobs for [`estimate_variance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceOptions {
    /// Simulations for the covariance of the initial estimator; `None`
    /// means `max(H, 200)`.
    pub h_var: Option<usize>,
    /// Relative central-difference step: `step (1 + |theta_j|)`.
    pub jacobian_step: f64,
    /// Use the fits cached from the last IB iteration when there are enough.
    pub reuse_fits: bool,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self { h_var: None, jacobian_step: DEFAULT_JACOBIAN_STEP, reuse_fits: true }
    }
}

impl VarianceOptions {
    pub fn h_var(&self, cfg: &IbConfig) -> usize {
        self.h_var.unwrap_or_else(|| cfg.simulations.count().unwrap_or(0).max(200))
    }
}

/// Sample covariance with divisor `H - 1`.
pub fn sample_covariance(fits: &[DVector<f64>]) -> Result<DMatrix<f64>, InferenceError> {
    if fits.len() < 2 {
        return Err(InferenceError::TooFewFits(fits.len()));
    }
    let mean = pairwise_mean(fits);
    let p = mean.len();
    let mut cov = DMatrix::zeros(p, p);
    for f in fits {
        let d = f - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (fits.len() - 1) as f64;
    Ok(symmetrize(&cov))
}

/// Covariance of the initial estimator at `theta_hat` over `h_var` simulated
/// samples, reusing `cached` fits when there are at least `h_var` of them.
pub fn bootstrap_cov_pi<B: Binding>(
    theta_hat: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
    h_var: usize,
    cached: Option<&[DVector<f64>]>,
) -> Result<(DMatrix<f64>, usize), InferenceError> {
    if h_var < 2 {
        return Err(InferenceError::TooFewFits(h_var));
    }
    if let Some(fits) = cached.filter(|f| f.len() >= h_var && cfg.fixed_seeds) {
        return Ok((sample_covariance(fits)?, fits.len()));
    }
    let mc = IbConfig { simulations: Simulations::MonteCarlo(h_var), ..cfg.clone() };
    let sm = simulated_mean(theta_hat, binding, &mc, 0)?;
    Ok((sample_covariance(&sm.fits)?, sm.fits.len()))
}

/// Central differences of the seed-frozen map `theta -> (1/H) sum_h
/// pi*_h(theta)`; both sides of each column use the same seeds.
pub fn numerical_jacobian_b<B: Binding>(
    theta_hat: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
    step: f64,
) -> Result<DMatrix<f64>, InferenceError> {
    if !(step > 0.0) {
        return Err(InferenceError::Invalid(format!("step = {step} must be positive")));
    }
    let p = theta_hat.len();
    let mut b = DMatrix::zeros(p, p);
    for j in 0..p {
        let h = step * (1.0 + theta_hat[j].abs());
        let mut plus = theta_hat.clone();
        let mut minus = theta_hat.clone();
        plus[j] += h;
        minus[j] -= h;
        let span = plus[j] - minus[j];
        let fp = simulated_mean(&plus, binding, cfg, 0)?.mean;
        let fm = simulated_mean(&minus, binding, cfg, 0)?.mean;
        b.set_column(j, &((fp - fm) / span));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(InferenceError::NonFinite("Jacobian"));
    }
    Ok(b)
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Symmetrize and clamp tiny negative eigenvalues. Fails when the matrix is
/// materially indefinite or the repair would move it by more than `1e-8`
/// relative (Frobenius).
pub fn repair_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, InferenceError> {
    let s = symmetrize(a);
    let trace = s.trace();
    let eig = SymmetricEigen::new(s.clone());
    let min_eig = eig.eigenvalues.min();
    if min_eig >= 0.0 {
        return Ok(s);
    }
    if min_eig < -1e-10 * trace.abs() {
        return Err(InferenceError::NotPsd { min_eig, trace });
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let fixed = symmetrize(&fixed);
    if (&fixed - a).norm() > 1e-8 * a.norm() {
        return Err(InferenceError::NotPsd { min_eig, trace });
    }
    Ok(fixed)
}

/// `(1 + 1/H) B^{-1} Sigma B^{-T}`; `h = None` drops the inflation.
pub fn assemble_var_theta(
    sigma_pi: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    h: Option<usize>,
) -> Result<DMatrix<f64>, InferenceError> {
    let p = sigma_pi.nrows();
    if sigma_pi.shape() != (p, p) || b_hat.shape() != (p, p) {
        return Err(InferenceError::Invalid("Sigma and B must be square and of equal size".into()));
    }
    if sigma_pi.iter().chain(b_hat.iter()).any(|v| !v.is_finite()) {
        return Err(InferenceError::NonFinite("Sigma or B"));
    }
    if let Some(0) = h {
        return Err(InferenceError::Invalid("H must be at least 1".into()));
    }
    let cond = condition_number(b_hat);
    if !(cond < MAX_CONDITION) {
        return Err(InferenceError::Singular(cond));
    }
    let lu = b_hat.clone().lu();
    let binv = lu.try_inverse().ok_or(InferenceError::Singular(cond))?;
    let inflation = h.map_or(1.0, |h| 1.0 + 1.0 / h as f64);
    let v = &binv * sigma_pi * binv.transpose() * inflation;
    repair_psd(&v)
}

/// Covariance of the initial estimator, Jacobian and assembled covariance
/// of `theta_hat`.
pub fn estimate_variance<B: Binding>(
    theta_hat: &DVector<f64>,
    binding: &B,
    cfg: &IbConfig,
    opts: &VarianceOptions,
    cached: Option<&[DVector<f64>]>,
) -> Result<VarianceEstimate, InferenceError> {
    let h_var = opts.h_var(cfg);
    let cached = if opts.reuse_fits { cached } else { None };
    let (sigma_pi, h_used) = bootstrap_cov_pi(theta_hat, binding, cfg, h_var, cached)?;
    let sigma_pi = repair_psd(&sigma_pi)?;
    let b_hat = numerical_jacobian_b(theta_hat, binding, cfg, opts.jacobian_step)?;
    let h = cfg.simulations.count();
    let var_theta = assemble_var_theta(&sigma_pi, &b_hat, h)?;
    Ok(VarianceEstimate { sigma_pi, b_hat, var_theta, h_used, h_inflation: h })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    /// The variance on the diagonal was negative and set to zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

/// `theta_j -/+ z_{(1+level)/2} sqrt(V_jj)`.
pub fn normal_ci(theta: &DVector<f64>, var_theta: &DMatrix<f64>, level: f64) -> Result<Vec<Interval>, InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::Invalid(format!("level = {level} must lie in (0, 1)")));
    }
    if var_theta.shape() != (theta.len(), theta.len()) {
        return Err(InferenceError::Invalid("covariance size does not match the estimate".into()));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok((0..theta.len())
        .map(|j| {
            let v = var_theta[(j, j)];
            let clamped = v < 0.0;
            let se = v.max(0.0).sqrt();
            Interval { estimate: theta[j], se, lo: theta[j] - z * se, hi: theta[j] + z * se, clamped }
        })
        .collect())
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation refined by
/// one Halley step.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [7.784_695_709_041_462e-3, 3.224_671_290_700_398e-1, 2.445_134_137_142_996, 3.754_408_661_907_416];
    const LOW: f64 = 0.02425;
    let x = if p < LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}
