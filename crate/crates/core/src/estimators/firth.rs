use nalgebra::{DMatrix, DVector};

use super::{check_response, log_likelihood, step_small, EstimatorSpec, FitError, FitResult, MAX_HALVINGS};
use crate::linalg::{sup_norm, weighted_cross};
use crate::sim::{logistic, LogisticDesign};

struct FirthState {
    mu: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    objective: f64,
}

fn evaluate(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> Option<FirthState> {
    let eta = x * beta;
    let mu = eta.map(logistic);
    let w = mu.map(|m| m * (1.0 - m));
    let chol = weighted_cross(x, &w).cholesky()?;
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let objective = log_likelihood(&eta, y) + 0.5 * logdet;
    objective.is_finite().then_some(FirthState { mu, chol, objective })
}

/// Firth-adjusted score `sum_i x_i [y_i - mu_i + h_i (1/2 - mu_i)]`, with
/// `h_i` the leverages of `W^{1/2} X`.
fn adjusted_score(x: &DMatrix<f64>, y: &DVector<f64>, st: &FirthState) -> DVector<f64> {
    let n = x.nrows();
    let mut resid = DVector::zeros(n);
    for i in 0..n {
        let m = st.mu[i];
        let w = m * (1.0 - m);
        let xi = x.row(i).transpose();
        let h = w * xi.dot(&st.chol.solve(&xi));
        resid[i] = y[i] - m + h * (0.5 - m);
    }
    x.tr_mul(&resid)
}

/// Bias-reduced logistic MLE (Jeffreys-penalized likelihood), fit to the raw
/// binary responses. Estimates stay finite under separation.
pub fn logistic_firth(design: &LogisticDesign, y: &DVector<f64>, spec: &EstimatorSpec) -> Result<FitResult, FitError> {
    spec.validate()?;
    check_response(y, design.n(), true)?;
    let x = design.x();
    let n = design.n() as f64;
    let mut beta = DVector::zeros(design.q());
    let mut st = evaluate(x, y, &beta).ok_or(FitError::RankDeficient)?;
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm;

    loop {
        let score = adjusted_score(x, y, &st);
        grad_norm = sup_norm(&score) / n;
        if grad_norm <= spec.irls.tol && step_small(last_step, &beta) {
            converged = true;
            break;
        }
        if iterations >= spec.irls.max_iter {
            break;
        }
        iterations += 1;
        let dir = st.chol.solve(&score);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &dir * t;
            if let Some(cs) = evaluate(x, y, &cand) {
                if cs.objective >= st.objective - 1e-12 * st.objective.abs() {
                    accepted = Some((cand, cs));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((b, s)) = accepted else { break };
        beta = b;
        st = s;
        last_step = sup_norm(&dir) * t;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::EstimatorKind;

    fn firth() -> EstimatorSpec {
        EstimatorSpec::new(EstimatorKind::LogisticFirth)
    }

    #[test]
    fn balanced_intercept_stays_zero() {
        let d = LogisticDesign::new(DMatrix::from_element(4, 1, 1.0)).unwrap();
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let fit = logistic_firth(&d, &y, &firth()).unwrap();
        assert!(fit.converged);
        assert!(fit.theta_hat[0].abs() < 1e-12);
    }

    #[test]
    fn intercept_only_has_closed_form() {
        // With one column h_i = 1/n, so the root is logit((s + 1/2) / (n + 1)).
        let d = LogisticDesign::new(DMatrix::from_element(5, 1, 1.0)).unwrap();
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 0.0]);
        let mut spec = firth();
        spec.irls.tol = 1e-13;
        let fit = logistic_firth(&d, &y, &spec).unwrap();
        let p: f64 = 4.5 / 6.0;
        assert!((fit.theta_hat[0] - (p / (1.0 - p)).ln()).abs() < 1e-9, "{fit:?}");
    }

    #[test]
    fn separated_data_give_finite_estimate() {
        let xs = [-1.0, -0.5, -0.2, 0.3, 0.6, 1.2];
        let mut x = DMatrix::from_element(6, 2, 1.0);
        for (i, v) in xs.iter().enumerate() {
            x[(i, 1)] = *v;
        }
        let y = DVector::from_iterator(6, xs.iter().map(|&v| f64::from(v > 0.0)));
        let fit = logistic_firth(&LogisticDesign::new(x).unwrap(), &y, &firth()).unwrap();
        assert!(fit.converged);
        assert!(fit.theta_hat.iter().all(|v| v.abs() < 20.0));
    }

    #[test]
    fn rejects_fractional_response() {
        let d = LogisticDesign::new(DMatrix::from_element(2, 1, 1.0)).unwrap();
        let y = DVector::from_vec(vec![0.99, 0.01]);
        assert!(logistic_firth(&d, &y, &firth()).is_err());
    }
}
