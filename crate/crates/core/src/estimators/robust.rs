//! Bounded-influence M-estimator for logistic regression with Huber-clipped
//! Pearson residuals, leverage weights `sqrt(1 - h_ii)` and an exact
//! Fisher-consistency correction.
//!
//! The correction is the expectation of the clipped residual under the
//! Bernoulli model, also when the estimator is applied to pseudo-values.

use nalgebra::{DMatrix, DVector};

use super::{check_response, logistic_irls, step_small, EstimatorSpec, FitError, FitResult, MAX_HALVINGS};
use crate::linalg::sup_norm;
use crate::sim::{logistic, LogisticDesign};

const SHIFT_TRIES: usize = 16;
const MAX_ETA_STEP: f64 = 5.0;

pub fn huber_psi(r: f64, c: f64) -> f64 {
    r.clamp(-c, c)
}

#[inline]
fn huber_slope(r: f64, c: f64) -> f64 {
    if r.abs() <= c {
        1.0
    } else {
        0.0
    }
}

/// `w_i = sqrt(1 - h_ii)` with `h_ii` the diagonal of `X (X'X)^{-1} X'`.
pub fn leverage_weights(design: &LogisticDesign) -> Result<DVector<f64>, FitError> {
    let x = design.x();
    let chol = x.tr_mul(x).cholesky().ok_or(FitError::RankDeficient)?;
    let l = chol.l();
    let mut w = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let z = l
            .solve_lower_triangular(&x.row(i).transpose())
            .ok_or(FitError::RankDeficient)?;
        w[i] = (1.0 - z.norm_squared()).max(0.0).sqrt();
    }
    Ok(w)
}

/// Per-observation value and derivative (in the linear predictor) of
/// `sqrt(V) [psi(r(y)) - E psi(r(Y))]` with `Y ~ Bernoulli(mu)`.
fn summand(eta: f64, y: f64, c: f64) -> (f64, f64) {
    let mu = logistic(eta);
    let v = mu * (1.0 - mu);
    if v <= 0.0 {
        return (0.0, 0.0);
    }
    let s = v.sqrt();
    let ds = 0.5 * (1.0 - 2.0 * mu) * s;
    let resid = |yy: f64| (yy - mu) / s;
    let dresid = |r: f64| -s - 0.5 * r * (1.0 - 2.0 * mu);
    let (y1, y0) = (1.0, 0.0);
    let (r, r1, r0) = (resid(y), resid(y1), resid(y0));
    let (p, p1, p0) = (huber_psi(r, c), huber_psi(r1, c), huber_psi(r0, c));
    let expect = mu * p1 + (1.0 - mu) * p0;
    let dexpect =
        v * p1 + mu * huber_slope(r1, c) * dresid(r1) - v * p0 + (1.0 - mu) * huber_slope(r0, c) * dresid(r0);
    let value = s * (p - expect);
    let deriv = ds * (p - expect) + s * (huber_slope(r, c) * dresid(r) - dexpect);
    (value, deriv)
}

/// Solve `(-J + lambda I) d = g` with the smallest `lambda` in a geometric
/// ladder that makes the matrix positive definite.
fn ascent_direction(jac: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let q = jac.nrows();
    let scale = (jac.trace().abs() / q as f64).max(f64::MIN_POSITIVE);
    let mut lambda = 0.0;
    for k in 0..SHIFT_TRIES {
        let mut a = -jac;
        for j in 0..q {
            a[(j, j)] += lambda;
        }
        if let Some(ch) = a.cholesky() {
            let d = ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        lambda = scale * 1e-8 * 10f64.powi(k as i32);
    }
    None
}

/// Estimating function `sum_i w_i x_i s_i [psi(r_i) - E psi]` and its Jacobian.
pub fn robust_score(
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    c: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * beta;
    let q = x.ncols();
    let mut g = DVector::zeros(q);
    let mut jac = DMatrix::zeros(q, q);
    let mut scaled = x.clone();
    let mut d = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let (val, der) = summand(eta[i], y[i], c);
        let xi = x.row(i);
        for j in 0..q {
            g[j] += weights[i] * val * xi[j];
        }
        d[i] = weights[i] * der;
    }
    for mut col in scaled.column_iter_mut() {
        col.component_mul_assign(&d);
    }
    jac.gemm_tr(1.0, x, &scaled, 0.0);
    (g, jac)
}

pub fn robust_m_estimator(design: &LogisticDesign, y: &DVector<f64>, spec: &EstimatorSpec) -> Result<FitResult, FitError> {
    let weights = leverage_weights(design)?;
    robust_m_estimator_weighted(design, &weights, y, spec)
}

/// Newton iterations on the estimating equation, started at the logistic MLE
/// on the same responses (zero when that does not exist), with step halving on
/// the norm of the estimating function. `y` may hold pseudo-values.
///
/// The summands vanish as `|eta|` grows, so a start far from the local root
/// can drift toward spurious solutions at infinity.
pub fn robust_m_estimator_weighted(
    design: &LogisticDesign,
    weights: &DVector<f64>,
    y: &DVector<f64>,
    spec: &EstimatorSpec,
) -> Result<FitResult, FitError> {
    spec.validate()?;
    check_response(y, design.n(), false)?;
    let (x, c) = (design.x(), spec.huber_c);
    let n = design.n() as f64;
    let mut beta = logistic_irls(design, y, spec)
        .ok()
        .filter(|f| f.is_usable())
        .map(|f| f.theta_hat)
        .unwrap_or_else(|| DVector::zeros(design.q()));
    let (mut g, mut jac) = robust_score(x, weights, y, &beta, c);
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    loop {
        if sup_norm(&g) / n <= spec.irls.tol && step_small(last_step, &beta) {
            converged = true;
            break;
        }
        if iterations >= spec.irls.max_iter {
            break;
        }
        iterations += 1;
        // the estimating function is the gradient of a quasi-likelihood whose
        // Hessian is `jac`: take ascent steps, shifting -jac until it is
        // positive definite, so the iteration cannot slide into the flat tails
        let Some(mut dir) = ascent_direction(&jac, &g) else { break };
        // keep the gain estimate local: no linear predictor moves by more than
        // MAX_ETA_STEP in one iteration
        let reach = sup_norm(&(x * &dir));
        if reach > MAX_ETA_STEP {
            dir *= MAX_ETA_STEP / reach;
        }
        let slope0 = g.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &dir * t;
            let (cg, cj) = robust_score(x, weights, y, &cand, c);
            let slope = cg.dot(&dir);
            // trapezoid estimate of the quasi-likelihood gain along the step
            if slope.is_finite() && 0.5 * (slope0 + slope) >= 1e-4 * slope0 {
                accepted = Some((cand, cg, cj));
                break;
            }
            t *= 0.5;
        }
        let Some((b, cg, cj)) = accepted else { break };
        beta = b;
        g = cg;
        jac = cj;
        last_step = sup_norm(&dir) * t;
    }

    Ok(FitResult {
        kind: spec.kind,
        theta_hat: beta,
        converged,
        iterations,
        final_grad_norm: sup_norm(&g) / n,
        boundary: false,
    })
}
