//! Marginal maximum likelihood for the random-intercept logistic model with
//! adaptive Gauss-Hermite quadrature: each cluster integral is recentred at
//! the conditional mode of the random effect and rescaled by its curvature.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{check_response, glmm_pirls, logistic_irls, softplus, EstimatorKind, SEPARATION_ETA, EstimatorSpec, FitError, FitResult};
use crate::optim::{bfgs_minimize, BfgsOptions};
use crate::linalg::sup_norm;
use crate::sim::{logistic, GlmmDesign, SIGMA2_CEIL, SIGMA2_FLOOR};

/// Nodes and weights for `int f(x) exp(-x^2) dx` (Golub-Welsch).
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(k >= 1);
    let mut jac = DMatrix::zeros(k, k);
    for i in 1..k {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    // polish each eigenvalue with Newton on the orthonormal Hermite
    // polynomial, then take w = 1 / (k p_{k-1}(x)^2)
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .map(|&x0| {
            let mut x = x0;
            for _ in 0..3 {
                let (pk, pk1) = hermite_orthonormal(k, x);
                let dp = (2.0 * k as f64).sqrt() * pk1;
                x -= pk / dp;
            }
            let (_, pk1) = hermite_orthonormal(k, x);
            (x, 1.0 / (k as f64 * pk1 * pk1))
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to clean up eigen-solver noise
    for i in 0..k / 2 {
        let j = k - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if k % 2 == 1 {
        pairs[k / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// `(p_k(x), p_{k-1}(x))` for the Hermite polynomials orthonormal under
/// `exp(-x^2)`.
fn hermite_orthonormal(k: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25);
    for j in 1..=k {
        let jf = j as f64;
        let next = (2.0 / jf).sqrt() * x * cur - ((jf - 1.0) / jf).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Settings for [`glmm_ghq_with`]. Values are on the natural scale
/// (`beta_0, beta, sigma^2`).
#[derive(Debug, Clone, Default)]
pub struct GhqOptions {
    /// `Some(v)` holds coordinate `j` at `v` (a variance of exactly `0`
    /// collapses the integral).
    pub fixed: Vec<Option<f64>>,
    pub start: Option<DVector<f64>>,
    pub bfgs: Option<BfgsOptions>,
}

struct Rule {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

fn cluster_loglik(eta: &[f64], y: &[f64], sigma2: f64, rule: &Rule) -> Option<f64> {
    let ell = |u: f64| -> f64 { eta.iter().zip(y).map(|(&e, &yi)| yi * (e + u) - softplus(e + u)).sum() };
    if sigma2 == 0.0 {
        return Some(ell(0.0));
    }
    let h = |u: f64| ell(u) - u * u / (2.0 * sigma2);
    let mut u = 0.0;
    let mut hu = h(u);
    for _ in 0..100 {
        let (mut d1, mut d2) = (-u / sigma2, -1.0 / sigma2);
        for &e in eta.iter() {
            let p = logistic(e + u);
            d2 -= p * (1.0 - p);
        }
        for (&e, &yi) in eta.iter().zip(y) {
            d1 += yi - logistic(e + u);
        }
        if d1.abs() <= 1e-12 * (1.0 + u.abs()) {
            break;
        }
        let step = -d1 / d2;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = u + t * step;
            let hc = h(cand);
            if hc >= hu {
                u = cand;
                hu = hc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let curvature = 1.0 / sigma2 + eta.iter().map(|&e| {
        let p = logistic(e + u);
        p * (1.0 - p)
    }).sum::<f64>();
    let scale = std::f64::consts::SQRT_2 / curvature.sqrt();
    let terms: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.log_weights)
        .map(|(&x, &lw)| lw + x * x + h(u + scale * x))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    let val = scale.ln() + lse - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
    val.is_finite().then_some(val)
}

fn marginal_loglik(design: &GlmmDesign, y: &DVector<f64>, beta: &DVector<f64>, sigma2: f64, rule: &Rule) -> Option<f64> {
    let mut eta = design.x() * beta.rows(1, design.q());
    eta.add_scalar_mut(beta[0]);
    let mut total = 0.0;
    let mut eb = Vec::new();
    let mut yb = Vec::new();
    for c in 0..design.m() {
        eb.clear();
        yb.clear();
        for &i in design.members(c) {
            eb.push(eta[i]);
            yb.push(y[i]);
        }
        total += cluster_loglik(&eb, &yb, sigma2, rule)?;
    }
    Some(total)
}

pub fn glmm_ghq(design: &GlmmDesign, y: &DVector<f64>, spec: &EstimatorSpec) -> Result<FitResult, FitError> {
    glmm_ghq_with(design, y, spec, &GhqOptions::default())
}

/// Warm start from penalized IRLS on pseudo-values; falls back to a pooled
/// logistic fit when that is unavailable.
fn default_start(design: &GlmmDesign, y: &DVector<f64>, spec: &EstimatorSpec) -> Result<DVector<f64>, FitError> {
    let mut pirls = EstimatorSpec::new(EstimatorKind::GlmmPirls);
    pirls.delta = if spec.delta > 0.0 { spec.delta } else { 0.01 };
    let ytil = super::pseudo_values(y, pirls.delta)?;
    if let Ok(fit) = glmm_pirls(design, &ytil, &pirls) {
        let mut t = fit.theta_hat;
        let last = t.len() - 1;
        t[last] = t[last].max(0.05);
        return Ok(t);
    }
    let pooled = super::glmm::pooled_design(design)?;
    let fit = logistic_irls(&pooled, &ytil, &EstimatorSpec::new(EstimatorKind::LogisticMle))?;
    let mut t = DVector::from_element(design.dim(), 0.5);
    t.rows_mut(0, design.q() + 1).copy_from(&fit.theta_hat);
    Ok(t)
}

/// Maximize the adaptive-quadrature marginal likelihood. Internally the
/// variance is optimized on the log scale within `[1e-8, 1e4]`.
pub fn glmm_ghq_with(
    design: &GlmmDesign,
    y: &DVector<f64>,
    spec: &EstimatorSpec,
    opts: &GhqOptions,
) -> Result<FitResult, FitError> {
    spec.validate()?;
    check_response(y, design.n(), true)?;
    let p = design.dim();
    let (nodes, weights) = gauss_hermite(spec.ghq_nodes);
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(FitError::Quadrature("non-finite Gauss-Hermite weights".into()));
    }
    let rule = Rule { nodes, log_weights: weights.iter().map(|w| w.ln()).collect() };
    let mut fixed = opts.fixed.clone();
    fixed.resize(p, None);

    let start = match &opts.start {
        Some(s) => s.clone(),
        None => default_start(design, y, spec)?,
    };
    let zero_variance = fixed[p - 1] == Some(0.0);
    let (lo_var, hi_var) = (SIGMA2_FLOOR.ln(), SIGMA2_CEIL.ln());
    let mut phi = start.clone();
    phi[p - 1] = start[p - 1].clamp(SIGMA2_FLOOR, SIGMA2_CEIL).ln();
    for j in 0..p {
        if let Some(v) = fixed[j] {
            phi[j] = if j == p - 1 { v.max(SIGMA2_FLOOR).ln() } else { v };
        }
    }
    let free: Vec<bool> = fixed.iter().map(Option::is_none).collect();
    let mut lower = DVector::from_element(p, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(p, f64::INFINITY);
    lower[p - 1] = lo_var;
    upper[p - 1] = hi_var;

    let n = design.n() as f64;
    let q1 = design.q() + 1;
    let objective = |phi: &DVector<f64>| -> f64 {
        let beta = phi.rows(0, q1).into_owned();
        let s2 = if zero_variance { 0.0 } else { phi[p - 1].exp() };
        match marginal_loglik(design, y, &beta, s2, &rule) {
            Some(v) => -v / n,
            None => f64::INFINITY,
        }
    };
    if !objective(&phi).is_finite() {
        return Err(FitError::Quadrature("non-finite likelihood at the starting point".into()));
    }
    let bfgs = opts.bfgs.unwrap_or_default();
    let res = bfgs_minimize(objective, &phi, &free, &lower, &upper, &bfgs);
    if !res.fx.is_finite() {
        return Err(FitError::Quadrature("non-finite likelihood at the optimum".into()));
    }
    let sigma2 = if zero_variance { 0.0 } else { res.x[p - 1].exp() };
    let mut theta = res.x.clone();
    theta[p - 1] = spec.variance_scale.from_variance(sigma2);
    let boundary = !zero_variance && free[p - 1] && res.x[p - 1] <= lo_var;
    // separated data: the likelihood keeps rising toward infinite fixed
    // effects or an unbounded variance, so no maximizer exists
    let runaway = sup_norm(&design.fixed_predictor(&res.x)) > SEPARATION_ETA || res.x[p - 1] >= hi_var;
    Ok(FitResult {
        kind: spec.kind,
        theta_hat: theta,
        converged: res.converged && !runaway,
        iterations: res.iterations,
        final_grad_norm: res.grad_norm,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_odd(m: usize) -> f64 {
        (1..=m).map(|k| (2 * k - 1) as f64).product()
    }

    #[test]
    fn rule_integrates_monomials_exactly() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for k in [1usize, 2, 5, 10, 15, 25] {
            let (x, w) = gauss_hermite(k);
            for deg in 0..2 * k {
                let got: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 {
                    0.0
                } else {
                    let m = deg / 2;
                    double_factorial_odd(m) / 2f64.powi(m as i32) * sqrt_pi
                };
                let scale: f64 = x.iter().zip(&w).map(|(xi, wi)| (wi * xi.powi(deg as i32)).abs()).sum::<f64>().max(1.0);
                assert!((got - exact).abs() <= 1e-12 * scale, "k={k} deg={deg}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn nodes_are_symmetric_and_weights_positive() {
        let (x, w) = gauss_hermite(15);
        for i in 0..15 {
            assert_eq!(x[i], -x[14 - i]);
            assert!(w[i] > 0.0);
        }
        assert_eq!(x[7], 0.0);
    }

    #[test]
    fn cluster_integral_matches_dense_trapezoid() {
        let eta = [0.3, -0.8, 1.1];
        let y = [1.0, 0.0, 1.0];
        let s2 = 1.7;
        let (nodes, weights) = gauss_hermite(25);
        let rule = Rule { nodes, log_weights: weights.iter().map(|w| w.ln()).collect() };
        let got = cluster_loglik(&eta, &y, s2, &rule).unwrap();
        let f = |u: f64| -> f64 {
            let ll: f64 = eta.iter().zip(&y).map(|(&e, &yi)| yi * (e + u) - softplus(e + u)).sum();
            (ll - u * u / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
        };
        let (a, b, k) = (-15.0, 15.0, 200_000);
        let h = (b - a) / k as f64;
        let mut total = 0.5 * (f(a) + f(b));
        for i in 1..k {
            total += f(a + i as f64 * h);
        }
        assert!((got - (total * h).ln()).abs() < 1e-9);
    }

    fn clustered_data(seed: u64, sigma2: f64) -> (GlmmDesign, DVector<f64>) {
        let mut rng = crate::rng::derive_seed(seed, 4, 0);
        let x = crate::sim::draw_covariates(60, 1, 0.0, 1.0, &mut rng);
        let d = GlmmDesign::balanced(x, 12, 5).unwrap();
        let theta = DVector::from_vec(vec![0.2, 0.8, sigma2]);
        let y = crate::sim::simulate_glmm(&d, &theta, crate::sim::VarianceScale::Variance, &mut rng).unwrap();
        (d, y)
    }

    #[test]
    fn zero_variance_matches_pooled_mle() {
        let (d, y) = clustered_data(8, 0.5);
        let spec = EstimatorSpec::new(EstimatorKind::GlmmGhq);
        let opts = GhqOptions { fixed: vec![None, None, Some(0.0)], ..Default::default() };
        let fit = glmm_ghq_with(&d, &y, &spec, &opts).unwrap();
        let pooled = crate::estimators::glmm::pooled_design(&d).unwrap();
        let mle = logistic_irls(&pooled, &y, &EstimatorSpec::new(EstimatorKind::LogisticMle)).unwrap();
        assert!((fit.theta_hat.rows(0, 2) - &mle.theta_hat).amax() < 1e-4, "{} vs {}", fit.theta_hat, mle.theta_hat);
        assert_eq!(fit.theta_hat[2], 0.0);
    }

    #[test]
    fn more_nodes_change_little() {
        let (d, y) = clustered_data(9, 1.0);
        let mut spec = EstimatorSpec::new(EstimatorKind::GlmmGhq);
        let a = glmm_ghq(&d, &y, &spec).unwrap();
        spec.ghq_nodes = 25;
        let b = glmm_ghq(&d, &y, &spec).unwrap();
        assert!(a.converged && b.converged);
        assert!((&a.theta_hat - &b.theta_hat).amax() < 1e-4);
    }
}
