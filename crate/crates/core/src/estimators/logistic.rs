use nalgebra::DVector;

use super::{check_response, softplus, step_small, EstimatorSpec, FitError, FitResult, MAX_HALVINGS};
use crate::linalg::{spd_solve, sup_norm, weighted_cross};
use crate::sim::{logistic, LogisticDesign};

/// Map binary responses to `{delta, 1 - delta}`.
pub fn pseudo_values(y: &DVector<f64>, delta: f64) -> Result<DVector<f64>, FitError> {
    if !(0.0..0.5).contains(&delta) {
        return Err(FitError::InvalidSpec(format!("delta = {delta} outside [0, 0.5)")));
    }
    if delta == 0.0 {
        return Ok(y.clone());
    }
    Ok(y.map(|v| (1.0 - delta) * v + delta * (1.0 - v)))
}

/// Bernoulli log-likelihood, valid for fractional responses.
pub fn log_likelihood(eta: &DVector<f64>, y: &DVector<f64>) -> f64 {
    eta.iter().zip(y.iter()).map(|(&e, &yi)| yi * e - softplus(e)).sum()
}

/// Fitted logits beyond this on binary data are treated as separation.
pub const SEPARATION_ETA: f64 = 30.0;

fn is_binary(y: &DVector<f64>) -> bool {
    y.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Logistic MLE by Newton/IRLS with step halving, started at zero.
///
/// Accepts responses anywhere in `[0, 1]`. Under separation the raw MLE does
/// not exist and the result comes back with `converged = false`.
pub fn logistic_irls(design: &LogisticDesign, y: &DVector<f64>, spec: &EstimatorSpec) -> Result<FitResult, FitError> {
    spec.validate()?;
    check_response(y, design.n(), false)?;
    let x = design.x();
    let n = design.n() as f64;
    let mut beta = DVector::zeros(design.q());
    let mut eta = x * &beta;
    let mut ll = log_likelihood(&eta, y);
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm;

    loop {
        let mu = eta.map(logistic);
        let grad = x.tr_mul(&(y - &mu));
        grad_norm = sup_norm(&grad) / n;
        if grad_norm <= spec.irls.tol && step_small(last_step, &beta) {
            converged = true;
            break;
        }
        if iterations >= spec.irls.max_iter {
            break;
        }
        iterations += 1;
        let w = mu.map(|m| m * (1.0 - m));
        let Some(dir) = spd_solve(&weighted_cross(x, &w), &grad) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &dir * t;
            let cand_eta = x * &cand;
            let cand_ll = log_likelihood(&cand_eta, y);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        last_step = sup_norm(&dir) * t;
    }
    // far along a separating direction the score vanishes and the relative
    // step test can pass; a fitted logit this large means the MLE is infinite
    if converged && is_binary(y) && sup_norm(&eta) > SEPARATION_ETA {
        converged = false;
    }

    Ok(FitResult {
        kind: spec.kind,
        theta_hat: beta,
        converged,
        iterations,
        final_grad_norm: grad_norm,
        boundary: false,
    })
}
