//! Penalized IRLS for the random-intercept logistic model.
//!
//! For a given variance the fixed effects and cluster effects are fitted
//! jointly as the mode of the penalized log-likelihood; the variance is then
//! chosen to maximize the Laplace approximation evaluated at that joint mode.
//! This is the cheap, slightly biased estimator used as the starting point
//! for the bootstrap correction.

use nalgebra::{DMatrix, DVector};

use super::{
    check_response, logistic_irls, softplus, step_small, EstimatorKind, EstimatorSpec, FitError, FitResult,
    MAX_HALVINGS,
};
use crate::linalg::{spd_solve, sup_norm};
use crate::optim::brent_minimize;
use crate::sim::{logistic, GlmmDesign, LogisticDesign, SIGMA2_CEIL, SIGMA2_FLOOR};

pub(crate) struct JointMode {
    /// Intercept followed by slopes.
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
    pub objective: f64,
    /// `sum_j W_ij` per cluster at the mode.
    pub wsum: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

fn penalized(design: &GlmmDesign, y: &DVector<f64>, beta: &DVector<f64>, u: &DVector<f64>, sigma2: f64) -> (f64, DVector<f64>) {
    let mut eta = design.x() * beta.rows(1, design.q());
    for (i, e) in eta.iter_mut().enumerate() {
        *e += beta[0] + u[design.cluster()[i]];
    }
    let ll: f64 = eta.iter().zip(y.iter()).map(|(&e, &yi)| yi * e - softplus(e)).sum();
    (ll - u.norm_squared() / (2.0 * sigma2), eta)
}

/// Joint mode of `(beta, u)` for fixed `sigma2` by Newton steps with a Schur
/// complement over the diagonal cluster block.
pub(crate) fn joint_mode(
    design: &GlmmDesign,
    y: &DVector<f64>,
    sigma2: f64,
    beta0: &DVector<f64>,
    u0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> JointMode {
    let (q1, m) = (design.q() + 1, design.m());
    let n = design.n() as f64;
    let x = design.x();
    let cl = design.cluster();
    let mut beta = beta0.clone();
    let mut u = u0.clone();
    let (mut obj, mut eta) = penalized(design, y, &beta, &u, sigma2);
    let mut last_step = f64::INFINITY;
    let mut iters = 0;
    loop {
        let mu = eta.map(logistic);
        let resid = y - &mu;
        let w = mu.map(|p| p * (1.0 - p));
        let mut g_beta = DVector::zeros(q1);
        g_beta[0] = resid.sum();
        g_beta.rows_mut(1, q1 - 1).copy_from(&x.tr_mul(&resid));
        let mut g_u = -&u / sigma2;
        let mut wsum = vec![0.0; m];
        let mut cvec = DMatrix::zeros(q1, m);
        for i in 0..design.n() {
            let c = cl[i];
            g_u[c] += resid[i];
            wsum[c] += w[i];
            cvec[(0, c)] += w[i];
            for j in 1..q1 {
                cvec[(j, c)] += w[i] * x[(i, j - 1)];
            }
        }
        let grad_norm = sup_norm(&g_beta).max(sup_norm(&g_u)) / n;
        let done = grad_norm <= tol && step_small(last_step, &beta);
        if done || iters >= max_iter {
            return JointMode { beta, u, objective: obj, wsum, grad_norm, converged: done };
        }
        iters += 1;
        // A = X~' W X~
        let mut a = DMatrix::zeros(q1, q1);
        for i in 0..design.n() {
            let wi = w[i];
            for r in 0..q1 {
                let xr = if r == 0 { 1.0 } else { x[(i, r - 1)] };
                for s in 0..=r {
                    let xs = if s == 0 { 1.0 } else { x[(i, s - 1)] };
                    a[(r, s)] += wi * xr * xs;
                }
            }
        }
        for r in 0..q1 {
            for s in 0..r {
                a[(s, r)] = a[(r, s)];
            }
        }
        let d: Vec<f64> = wsum.iter().map(|ws| ws + 1.0 / sigma2).collect();
        let mut schur = a;
        let mut rhs = g_beta.clone();
        for c in 0..m {
            let col = cvec.column(c);
            schur -= (col * col.transpose()) / d[c];
            rhs -= col * (g_u[c] / d[c]);
        }
        let Some(d_beta) = spd_solve(&schur, &rhs) else {
            return JointMode { beta, u, objective: obj, wsum, grad_norm, converged: false };
        };
        let d_u = DVector::from_iterator(m, (0..m).map(|c| (g_u[c] - cvec.column(c).dot(&d_beta)) / d[c]));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let nb = &beta + &d_beta * t;
            let nu = &u + &d_u * t;
            let (no, ne) = penalized(design, y, &nb, &nu, sigma2);
            if no.is_finite() && no >= obj - 1e-12 * obj.abs() {
                beta = nb;
                u = nu;
                obj = no;
                eta = ne;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return JointMode { beta, u, objective: obj, wsum, grad_norm, converged: false };
        }
        last_step = sup_norm(&d_beta).max(sup_norm(&d_u)) * t;
    }
}

/// Laplace approximation to the marginal log-likelihood at the joint mode.
pub fn laplace_at(mode: &JointMode, sigma2: f64) -> f64 {
    mode.objective - 0.5 * mode.wsum.iter().map(|ws| (sigma2 * ws).ln_1p()).sum::<f64>()
}

/// Laplace objective at `sigma2` for responses `y` (already transformed).
pub fn laplace_objective(design: &GlmmDesign, y: &DVector<f64>, sigma2: f64) -> f64 {
    let start = DVector::zeros(design.q() + 1);
    let mode = joint_mode(design, y, sigma2, &start, &DVector::zeros(design.m()), 1e-10, 200);
    laplace_at(&mode, sigma2)
}

pub(crate) fn pooled_design(design: &GlmmDesign) -> Result<LogisticDesign, FitError> {
    let mut aug = DMatrix::from_element(design.n(), design.q() + 1, 1.0);
    aug.columns_mut(1, design.q()).copy_from(design.x());
    LogisticDesign::new(aug).map_err(|_| FitError::RankDeficient)
}

const LOG_VAR_TOL: f64 = 1e-5;
const BRENT_MAX: usize = 80;

/// Returns `(beta_0, beta, variance)` with the variance stored on
/// `spec.variance_scale`. A variance at the floor sets `boundary`.
pub fn glmm_pirls(design: &GlmmDesign, y: &DVector<f64>, spec: &EstimatorSpec) -> Result<FitResult, FitError> {
    spec.validate()?;
    check_response(y, design.n(), false)?;
    if design.m() < 2 {
        return Err(FitError::Unidentifiable("at least two clusters are required".into()));
    }
    if design.sizes().iter().all(|&s| s == 1) {
        return Err(FitError::Unidentifiable(
            "one observation per cluster: the random-intercept variance is not identified".into(),
        ));
    }
    let pooled = pooled_design(design)?;
    let start = logistic_irls(&pooled, y, &EstimatorSpec::new(EstimatorKind::LogisticMle))?;
    let (tol, max_iter) = (spec.irls.tol, spec.irls.max_iter);

    let mut warm_beta = start.theta_hat.clone();
    let mut warm_u = DVector::zeros(design.m());
    let init = joint_mode(design, y, 0.5, &warm_beta, &warm_u, tol, max_iter);
    warm_beta = init.beta;
    warm_u = init.u;

    let (lo, hi) = (SIGMA2_FLOOR.ln(), SIGMA2_CEIL.ln());
    let found = brent_minimize(
        |t| {
            let s2 = t.exp();
            let mode = joint_mode(design, y, s2, &warm_beta, &warm_u, tol, max_iter);
            let val = -laplace_at(&mode, s2);
            if mode.converged {
                warm_beta = mode.beta;
                warm_u = mode.u;
            }
            if val.is_finite() {
                val
            } else {
                f64::INFINITY
            }
        },
        lo,
        hi,
        LOG_VAR_TOL,
        BRENT_MAX,
    );
    // The Laplace objective is flat in the variance near zero; compare the
    // interior optimum against the floor itself.
    let floor_mode = joint_mode(design, y, SIGMA2_FLOOR, &warm_beta, &warm_u, tol, max_iter);
    let floor_val = -laplace_at(&floor_mode, SIGMA2_FLOOR);
    let (sigma2, boundary) = if floor_val <= found.fx || found.x <= lo + 1e-3 {
        (SIGMA2_FLOOR, true)
    } else {
        (found.x.exp(), false)
    };
    let mode = if boundary {
        floor_mode
    } else {
        joint_mode(design, y, sigma2, &warm_beta, &warm_u, tol, max_iter)
    };
    let mut theta = DVector::zeros(design.dim());
    theta.rows_mut(0, design.q() + 1).copy_from(&mode.beta);
    theta[design.dim() - 1] = spec.variance_scale.from_variance(sigma2);
    Ok(FitResult {
        kind: spec.kind,
        theta_hat: theta,
        converged: mode.converged && found.converged,
        iterations: found.evals,
        final_grad_norm: mode.grad_norm,
        boundary,
    })
}
