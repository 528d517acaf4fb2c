//! Slow reference computations that share no code with the estimators:
//! plain `Vec` arithmetic, Gauss-Jordan solves, grid searches and
//! bisection. They produce the committed fixture expectations, and
//! [`check_fixtures`] compares the engine against them.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::estimators::{leverage_weights, EstimatorKind, EstimatorSpec, GhqOptions};
use crate::sim::{Dataset, GlmmDesign, LogisticDesign, VarianceScale};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("fixture {path}: {msg}")]
    Fixture { path: String, msg: String },
    #[error("oracle did not converge: {0}")]
    NoConvergence(String),
}

type Rows = Vec<Vec<f64>>;

fn rows_of(x: &DMatrix<f64>) -> Rows {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Gauss-Jordan elimination with partial pivoting.
fn gauss_jordan_solve(mut a: Rows, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for k in 0..n {
            a[col][k] /= d;
        }
        b[col] /= d;
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..n {
                        a[r][k] -= f * a[col][k];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some(b)
}

fn invert(a: &Rows) -> Option<Rows> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let e: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
        cols.push(gauss_jordan_solve(a.clone(), e)?);
    }
    Some((0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect())
}

/// `X' diag(w) X`.
fn weighted_gram(x: &Rows, w: &[f64]) -> Rows {
    let q = x[0].len();
    let mut g = vec![vec![0.0; q]; q];
    for (row, &wi) in x.iter().zip(w) {
        for a in 0..q {
            for b in 0..q {
                g[a][b] += wi * row[a] * row[b];
            }
        }
    }
    g
}

/// Full hat matrix `X (X'X)^{-1} X'`.
pub fn hat_matrix(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let rows = rows_of(x);
    let inv = invert(&weighted_gram(&rows, &vec![1.0; rows.len()]))?;
    let n = rows.len();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let left: Vec<f64> = (0..inv.len()).map(|b| dot(&rows[i], &inv.iter().map(|r| r[b]).collect::<Vec<_>>())).collect();
        for j in 0..n {
            h[(i, j)] = dot(&left, &rows[j]);
        }
    }
    Some(h)
}

fn loglik(x: &Rows, y: &[f64], beta: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let t = dot(row, beta);
            // log(1 + e^t) without overflow
            let sp = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            yi * t - sp
        })
        .sum()
}

fn score_component(x: &Rows, y: &[f64], beta: &[f64], j: usize) -> f64 {
    x.iter().zip(y).map(|(row, &yi)| (yi - sigmoid(dot(row, beta))) * row[j]).sum()
}

/// Root of a decreasing function by bracketing then bisection.
fn bisect_decreasing(f: impl Fn(f64) -> f64, centre: f64) -> Option<f64> {
    let mut width = 1.0;
    let (mut lo, mut hi) = (centre - width, centre + width);
    while f(lo) < 0.0 || f(hi) > 0.0 {
        width *= 2.0;
        if width > 1e6 {
            return None;
        }
        lo = centre - width;
        hi = centre + width;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Logistic MLE: dense grid over `[-10, 10]^q`, then cyclic coordinate
/// bisection on each score component until a sweep moves less than `1e-13`.
pub fn logistic_mle(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
    let rows = rows_of(x);
    let ys: Vec<f64> = y.iter().copied().collect();
    let q = x.ncols();
    let per_dim = ((200_000f64).powf(1.0 / q as f64) as usize).max(3);
    let grid = |k: usize| -10.0 + 20.0 * k as f64 / (per_dim - 1) as f64;
    let mut best = (f64::NEG_INFINITY, vec![0.0; q]);
    let total = per_dim.pow(q as u32);
    for idx in 0..total {
        let mut rem = idx;
        let beta: Vec<f64> = (0..q)
            .map(|_| {
                let k = rem % per_dim;
                rem /= per_dim;
                grid(k)
            })
            .collect();
        let l = loglik(&rows, &ys, &beta);
        if l > best.0 {
            best = (l, beta);
        }
    }
    let mut beta = best.1;
    for _ in 0..100_000 {
        let mut moved: f64 = 0.0;
        for j in 0..q {
            let old = beta[j];
            let f = |b: f64| {
                let mut t = beta.clone();
                t[j] = b;
                score_component(&rows, &ys, &t, j)
            };
            let new = bisect_decreasing(f, old).ok_or_else(|| OracleError::NoConvergence("score has no root".into()))?;
            beta[j] = new;
            moved = moved.max((new - old).abs());
        }
        if moved < 1e-13 {
            return Ok(DVector::from_vec(beta));
        }
    }
    Err(OracleError::NoConvergence("coordinate bisection".into()))
}

/// `sum_i (y_i - mu_i + h_i (1/2 - mu_i)) x_i` with `h_i` the diagonal of
/// `W^{1/2} X (X'WX)^{-1} X' W^{1/2}`.
pub fn firth_adjusted_score(x: &Rows, y: &[f64], beta: &[f64]) -> Option<Vec<f64>> {
    let mu: Vec<f64> = x.iter().map(|r| sigmoid(dot(r, beta))).collect();
    let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
    let inv = invert(&weighted_gram(x, &w))?;
    let q = beta.len();
    let mut u = vec![0.0; q];
    for i in 0..x.len() {
        let mut quad = 0.0;
        for a in 0..q {
            for b in 0..q {
                quad += x[i][a] * inv[a][b] * x[i][b];
            }
        }
        let h = w[i] * quad;
        let r = y[i] - mu[i] + h * (0.5 - mu[i]);
        for a in 0..q {
            u[a] += r * x[i][a];
        }
    }
    Some(u)
}

/// Firth estimate: damped Newton on the adjusted score with a central
/// difference Jacobian, halving until the score norm drops.
pub fn logistic_firth(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
    let rows = rows_of(x);
    let ys: Vec<f64> = y.iter().copied().collect();
    let q = x.ncols();
    let norm = |u: &[f64]| u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let fail = || OracleError::NoConvergence("Firth adjusted score".into());
    let mut beta = vec![0.0; q];
    let mut u = firth_adjusted_score(&rows, &ys, &beta).ok_or_else(fail)?;
    for _ in 0..500 {
        if norm(&u) < 1e-13 {
            return Ok(DVector::from_vec(beta));
        }
        let step = 1e-6;
        let mut jac = vec![vec![0.0; q]; q];
        for b in 0..q {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[b] += step;
            dn[b] -= step;
            let fu = firth_adjusted_score(&rows, &ys, &up).ok_or_else(fail)?;
            let fd = firth_adjusted_score(&rows, &ys, &dn).ok_or_else(fail)?;
            for a in 0..q {
                jac[a][b] = (fu[a] - fd[a]) / (2.0 * step);
            }
        }
        let d = gauss_jordan_solve(jac, u.iter().map(|v| -v).collect()).ok_or_else(fail)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&d).map(|(b, di)| b + t * di).collect();
            if let Some(uc) = firth_adjusted_score(&rows, &ys, &cand) {
                if norm(&uc) < norm(&u) {
                    beta = cand;
                    u = uc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // at round-off level the norm cannot decrease further
            return if norm(&u) < 1e-9 { Ok(DVector::from_vec(beta)) } else { Err(fail()) };
        }
    }
    Err(fail())
}

/// Log marginal likelihood of one cluster,
/// `log int prod_i p_i^y_i (1 - p_i)^(1 - y_i) N(u; 0, sigma2) du`, by the
/// trapezoid rule on a dense grid.
pub fn single_cluster_loglik(eta: &[f64], y: &[f64], sigma2: f64) -> f64 {
    let sd = sigma2.sqrt();
    let half = 12.0 * sd + 20.0;
    let k = 40_000;
    let h = 2.0 * half / k as f64;
    let f = |u: f64| {
        let lik: f64 = eta
            .iter()
            .zip(y)
            .map(|(&e, &yi)| {
                let p = sigmoid(e + u);
                if yi == 1.0 {
                    p
                } else {
                    1.0 - p
                }
            })
            .product();
        lik * (-u * u / (2.0 * sigma2)).exp() / (2.0 * std::f64::consts::PI * sigma2).sqrt()
    };
    let mut total = 0.5 * (f(-half) + f(half));
    for i in 1..k {
        total += f(-half + i as f64 * h);
    }
    (total * h).ln()
}

/// Maximizer over the intercept of [`single_cluster_loglik`] with the slope
/// and variance held fixed: grid on `[-10, 10]`, then golden section.
pub fn single_cluster_intercept(x: &[f64], y: &[f64], beta1: f64, sigma2: f64) -> f64 {
    let obj = |b0: f64| {
        let eta: Vec<f64> = x.iter().map(|xi| b0 + beta1 * xi).collect();
        single_cluster_loglik(&eta, y, sigma2)
    };
    let step = 0.01;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=2000 {
        let b = -10.0 + k as f64 * step;
        let v = obj(b);
        if v > best.0 {
            best = (v, b);
        }
    }
    let (mut a, mut b) = (best.1 - step, best.1 + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (obj(c), obj(d));
    while b - a > 1e-10 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = obj(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = obj(d);
        }
    }
    0.5 * (a + b)
}

pub const LOGISTIC_FIXTURE: &str = "logistic_n8.csv";
pub const CLUSTER_FIXTURE: &str = "glmm_single_cluster.csv";
pub const EXPECTED_FILE: &str = "expected.json";
pub const CLUSTER_SLOPE: f64 = 0.7;
pub const CLUSTER_SIGMA2: f64 = 1.3;

/// Committed reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    pub mle: Vec<f64>,
    pub firth: Vec<f64>,
    pub hat_diagonal: Vec<f64>,
    pub cluster_slope: f64,
    pub cluster_sigma2: f64,
    pub cluster_intercept: f64,
}

/// `crates/core/tests/fixtures` of this source tree.
pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn read_fixture(dir: &Path, name: &str) -> Result<Dataset, OracleError> {
    let path = dir.join(name);
    Dataset::read_csv(&path).map_err(|e| OracleError::Fixture { path: path.display().to_string(), msg: e.to_string() })
}

/// Evaluate every oracle on the fixtures in `dir`.
pub fn compute_expectations(dir: &Path) -> Result<Expectations, OracleError> {
    let lg = read_fixture(dir, LOGISTIC_FIXTURE)?;
    let hat = hat_matrix(&lg.x).ok_or_else(|| OracleError::NoConvergence("singular X'X".into()))?;
    let cl = read_fixture(dir, CLUSTER_FIXTURE)?;
    let xs: Vec<f64> = cl.x.column(0).iter().copied().collect();
    let ys: Vec<f64> = cl.y.iter().copied().collect();
    Ok(Expectations {
        mle: logistic_mle(&lg.x, &lg.y)?.iter().copied().collect(),
        firth: logistic_firth(&lg.x, &lg.y)?.iter().copied().collect(),
        hat_diagonal: hat.diagonal().iter().copied().collect(),
        cluster_slope: CLUSTER_SLOPE,
        cluster_sigma2: CLUSTER_SIGMA2,
        cluster_intercept: single_cluster_intercept(&xs, &ys, CLUSTER_SLOPE, CLUSTER_SIGMA2),
    })
}

pub fn load_expectations(dir: &Path) -> Result<Expectations, OracleError> {
    let path = dir.join(EXPECTED_FILE);
    let fixture_err = |msg: String| OracleError::Fixture { path: path.display().to_string(), msg };
    let text = std::fs::read_to_string(&path).map_err(|e| fixture_err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| fixture_err(e.to_string()))
}

/// Recompute and overwrite the expectations file.
pub fn regenerate(dir: &Path) -> Result<Expectations, OracleError> {
    let exp = compute_expectations(dir)?;
    let path = dir.join(EXPECTED_FILE);
    let text = serde_json::to_string_pretty(&exp).expect("expectations serialize");
    std::fs::write(&path, text + "\n")
        .map_err(|e| OracleError::Fixture { path: path.display().to_string(), msg: e.to_string() })?;
    Ok(exp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleCheck {
    fn new(name: &str, got: &[f64], want: &[f64], tolerance: f64) -> Self {
        let max_abs_error = if got.len() == want.len() {
            got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        Self { name: name.into(), max_abs_error, tolerance, pass: max_abs_error <= tolerance }
    }
}

/// Compare the engine with the committed expectations in `dir`.
pub fn check_fixtures(dir: &Path) -> Result<Vec<OracleCheck>, OracleError> {
    let exp = load_expectations(dir)?;
    let lg = read_fixture(dir, LOGISTIC_FIXTURE)?;
    let design = LogisticDesign::new(lg.x.clone())
        .map_err(|e| OracleError::Fixture { path: LOGISTIC_FIXTURE.into(), msg: e.to_string() })?;
    let fit = |kind| -> Vec<f64> {
        match EstimatorSpec::new(kind).fit_logistic(&design, &lg.y) {
            Ok(f) if f.converged => f.theta_hat.iter().copied().collect(),
            _ => vec![f64::NAN; design.q()],
        }
    };
    let hat: Vec<f64> = match leverage_weights(&design) {
        Ok(w) => w.iter().map(|wi| 1.0 - wi * wi).collect(),
        Err(_) => vec![f64::NAN; design.n()],
    };

    let cl = read_fixture(dir, CLUSTER_FIXTURE)?;
    let cluster_err = |msg: String| OracleError::Fixture { path: CLUSTER_FIXTURE.into(), msg };
    let gd = GlmmDesign::new(cl.x.clone(), cl.cluster.clone().unwrap_or_else(|| vec![0; cl.y.len()]))
        .map_err(|e| cluster_err(e.to_string()))?;
    let mut spec = EstimatorSpec::new(EstimatorKind::GlmmGhq);
    spec.variance_scale = VarianceScale::Variance;
    let opts = GhqOptions {
        fixed: vec![None, Some(exp.cluster_slope), Some(exp.cluster_sigma2)],
        start: Some(DVector::from_vec(vec![0.0, exp.cluster_slope, exp.cluster_sigma2])),
        bfgs: None,
    };
    let b0 = match crate::estimators::glmm_ghq_with(&gd, &cl.y, &spec, &opts) {
        Ok(f) if f.converged => f.theta_hat[0],
        Ok(_) => f64::NAN,
        Err(e) => return Err(cluster_err(e.to_string())),
    };

    Ok(vec![
        OracleCheck::new("logistic_mle", &fit(EstimatorKind::LogisticMle), &exp.mle, 1e-6),
        OracleCheck::new("logistic_firth", &fit(EstimatorKind::LogisticFirth), &exp.firth, 1e-5),
        OracleCheck::new("hat_diagonal", &hat, &exp.hat_diagonal, 1e-10),
        OracleCheck::new("ghq_single_cluster_intercept", &[b0], &[exp.cluster_intercept], 1e-4),
    ])
}
