//! Fixed designs and response simulation for the logistic and
//! random-intercept logistic models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::linalg;
use crate::rng::SimRng;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("parameter has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("design matrix is rank deficient (rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("negative random-effect variance {0}")]
    NegativeVariance(f64),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("data file: {0}")]
    Data(String),
}

#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Fixed covariates for a logistic regression, one row per observation.
#[derive(Debug, Clone)]
pub struct LogisticDesign {
    x: DMatrix<f64>,
}

impl LogisticDesign {
    pub fn new(x: DMatrix<f64>) -> Result<Self, SimError> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(SimError::InvalidDesign("empty design matrix".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidDesign("non-finite covariate".into()));
        }
        let rank = linalg::numerical_rank(&x);
        if rank < x.ncols() {
            return Err(SimError::RankDeficient { rank, cols: x.ncols() });
        }
        Ok(Self { x })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn linear_predictor(&self, beta: &DVector<f64>) -> Result<DVector<f64>, SimError> {
        if beta.len() != self.q() {
            return Err(SimError::Dimension { expected: self.q(), got: beta.len() });
        }
        Ok(&self.x * beta)
    }
}

/// How the random-intercept variance is stored in the last coordinate of a
/// GLMM parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScale {
    /// `sigma^2` itself.
    #[default]
    Variance,
    /// `log sigma^2`.
    Log,
}

pub const SIGMA2_FLOOR: f64 = 1e-8;
pub const SIGMA2_CEIL: f64 = 1e4;

impl VarianceScale {
    pub fn to_variance(self, stored: f64) -> f64 {
        match self {
            VarianceScale::Variance => stored,
            VarianceScale::Log => stored.exp(),
        }
    }

    pub fn from_variance(self, sigma2: f64) -> f64 {
        match self {
            VarianceScale::Variance => sigma2,
            VarianceScale::Log => sigma2.max(f64::MIN_POSITIVE).ln(),
        }
    }

    /// Admissible range of the stored coordinate.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            VarianceScale::Variance => (SIGMA2_FLOOR, SIGMA2_CEIL),
            VarianceScale::Log => (SIGMA2_FLOOR.ln(), SIGMA2_CEIL.ln()),
        }
    }
}

/// Covariates plus cluster membership for the random-intercept model.
///
/// `x` holds the slope covariates only; the intercept is implicit. A
/// parameter vector is packed as `(beta_0, beta_1..beta_q, variance)`.
#[derive(Debug, Clone)]
pub struct GlmmDesign {
    x: DMatrix<f64>,
    cluster: Vec<usize>,
    sizes: Vec<usize>,
    /// Observation indices grouped by cluster.
    members: Vec<Vec<usize>>,
}

impl GlmmDesign {
    /// `cluster[i]` is the 0-based cluster of row `i`.
    pub fn new(x: DMatrix<f64>, cluster: Vec<usize>) -> Result<Self, SimError> {
        let n = x.nrows();
        if cluster.len() != n {
            return Err(SimError::InvalidDesign(format!(
                "{} cluster labels for {} rows",
                cluster.len(),
                n
            )));
        }
        if n == 0 {
            return Err(SimError::InvalidDesign("empty design".into()));
        }
        let m = cluster.iter().max().map_or(0, |c| c + 1);
        let mut members = vec![Vec::new(); m];
        for (i, &c) in cluster.iter().enumerate() {
            members[c].push(i);
        }
        if members.iter().any(Vec::is_empty) {
            return Err(SimError::InvalidDesign("cluster labels are not contiguous".into()));
        }
        let sizes = members.iter().map(Vec::len).collect();
        let mut aug = DMatrix::from_element(n, x.ncols() + 1, 1.0);
        aug.columns_mut(1, x.ncols()).copy_from(&x);
        let rank = linalg::numerical_rank(&aug);
        if rank < aug.ncols() {
            return Err(SimError::RankDeficient { rank, cols: aug.ncols() });
        }
        Ok(Self { x, cluster, sizes, members })
    }

    /// Balanced design with `m` clusters of `size` consecutive rows.
    pub fn balanced(x: DMatrix<f64>, m: usize, size: usize) -> Result<Self, SimError> {
        if m * size != x.nrows() {
            return Err(SimError::InvalidDesign(format!(
                "{m} clusters of {size} do not cover {} rows",
                x.nrows()
            )));
        }
        let cluster = (0..m).flat_map(|c| std::iter::repeat_n(c, size)).collect();
        Self::new(x, cluster)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn cluster(&self) -> &[usize] {
        &self.cluster
    }
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    /// Number of slope covariates.
    pub fn q(&self) -> usize {
        self.x.ncols()
    }
    pub fn m(&self) -> usize {
        self.sizes.len()
    }
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.members[cluster]
    }
    /// Parameter dimension `q + 2`.
    pub fn dim(&self) -> usize {
        self.q() + 2
    }

    /// Fixed-effect linear predictor `beta_0 + x_ij' beta`.
    pub fn fixed_predictor(&self, theta: &DVector<f64>) -> DVector<f64> {
        let q = self.q();
        let beta = theta.rows(1, q);
        let mut eta = &self.x * beta;
        eta.add_scalar_mut(theta[0]);
        eta
    }
}

/// Independent `N(mean, variance)` covariates.
pub fn draw_covariates(n: usize, q: usize, mean: f64, variance: f64, rng: &mut SimRng) -> DMatrix<f64> {
    let sd = variance.sqrt();
    // column-major fill order is part of the reproducibility contract
    DMatrix::from_fn(n, q, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        mean + sd * z
    })
}

fn bernoulli_draws(mu: impl Iterator<Item = f64>, rng: &mut SimRng) -> DVector<f64> {
    let v: Vec<f64> = mu
        .map(|p| {
            let u: f64 = rng.random();
            if u < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    DVector::from_vec(v)
}

/// Bernoulli responses with `P(y_i = 1) = logistic(x_i' theta)`.
pub fn simulate_logistic(
    design: &LogisticDesign,
    theta: &DVector<f64>,
    rng: &mut SimRng,
) -> Result<DVector<f64>, SimError> {
    let eta = design.linear_predictor(theta)?;
    Ok(bernoulli_draws(eta.iter().map(|&e| logistic(e)), rng))
}

/// Random-intercept logistic responses.
///
/// The Bernoulli uniforms come from `rng` in the same order as
/// [`simulate_logistic`]; the cluster effects come from a long-jumped copy, so
/// with zero variance both functions produce identical responses.
pub fn simulate_glmm(
    design: &GlmmDesign,
    theta: &DVector<f64>,
    scale: VarianceScale,
    rng: &mut SimRng,
) -> Result<DVector<f64>, SimError> {
    if theta.len() != design.dim() {
        return Err(SimError::Dimension { expected: design.dim(), got: theta.len() });
    }
    let sigma2 = scale.to_variance(theta[design.dim() - 1]);
    if sigma2 < 0.0 || sigma2.is_nan() {
        return Err(SimError::NegativeVariance(sigma2));
    }
    let sd = sigma2.sqrt();
    let mut effects_rng = rng.clone();
    effects_rng.long_jump();
    let effects: Vec<f64> = (0..design.m())
        .map(|_| {
            let z: f64 = effects_rng.sample(StandardNormal);
            sd * z
        })
        .collect();
    let eta = design.fixed_predictor(theta);
    let mu = eta
        .iter()
        .zip(design.cluster())
        .map(|(&e, &c)| logistic(e + effects[c]));
    Ok(bernoulli_draws(mu, rng))
}

/// Observed data: covariates, a response, and optional cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub cluster: Option<Vec<usize>>,
}

impl Dataset {
    /// Read a CSV with header `y, x_1..x_q` and an optional `cluster` column.
    /// Cluster labels may be arbitrary integers; they are mapped to
    /// 0-based indices in order of first appearance.
    pub fn read_csv(path: &Path) -> Result<Self, SimError> {
        let file = std::fs::File::open(path)
            .map_err(|e| SimError::Data(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self, SimError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| SimError::Data(e.to_string()))?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let y_col = find("y").ok_or_else(|| SimError::Data("missing column `y`".into()))?;
        let cluster_col = find("cluster");
        let mut x_cols = Vec::new();
        for j in 1.. {
            match find(&format!("x_{j}")) {
                Some(c) => x_cols.push(c),
                None => break,
            }
        }
        let expected = 1 + x_cols.len() + usize::from(cluster_col.is_some());
        if headers.len() != expected {
            let unknown: Vec<&str> = headers
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != y_col && Some(*i) != cluster_col && !x_cols.contains(i))
                .map(|(_, h)| h)
                .collect();
            return Err(SimError::Data(format!(
                "unexpected columns {unknown:?}; expected y, x_1..x_{}{} (missing column `x_{}`?)",
                x_cols.len(),
                if cluster_col.is_some() { ", cluster" } else { "" },
                x_cols.len() + 1
            )));
        }
        let mut ys = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        let mut label_map: Vec<String> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| SimError::Data(e.to_string()))?;
            let parse = |c: usize| -> Result<f64, SimError> {
                rec[c].parse::<f64>().map_err(|_| {
                    SimError::Data(format!("row {}: column `{}` is not a number", line + 1, &headers[c]))
                })
            };
            ys.push(parse(y_col)?);
            for &c in &x_cols {
                rows.push(parse(c)?);
            }
            if let Some(c) = cluster_col {
                let key = rec[c].to_string();
                let idx = match label_map.iter().position(|l| *l == key) {
                    Some(i) => i,
                    None => {
                        label_map.push(key);
                        label_map.len() - 1
                    }
                };
                labels.push(idx);
            }
        }
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, x_cols.len(), &rows);
        Ok(Self {
            x,
            y: DVector::from_vec(ys),
            cluster: cluster_col.map(|_| labels),
        })
    }

    /// Debug dump: header row then `cluster?, y, x_1..x_q` per observation.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        if self.cluster.is_some() {
            header.push("cluster".to_string());
        }
        header.push("y".into());
        header.extend((1..=self.x.ncols()).map(|j| format!("x_{j}")));
        w.write_record(&header).map_err(|e| SimError::Data(e.to_string()))?;
        for i in 0..self.y.len() {
            let mut rec = Vec::with_capacity(header.len());
            if let Some(c) = &self.cluster {
                rec.push((c[i] + 1).to_string());
            }
            rec.push(self.y[i].to_string());
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| SimError::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| SimError::Data(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;

    fn design(n: usize, q: usize, seed: u64) -> LogisticDesign {
        let mut rng = derive_seed(seed, 4, 0);
        LogisticDesign::new(draw_covariates(n, q, 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn zero_parameter_gives_fair_coin() {
        let d = LogisticDesign::new(DMatrix::from_element(100_000, 1, 1.0)).unwrap();
        let y = simulate_logistic(&d, &DVector::zeros(1), &mut derive_seed(1, 0, 0)).unwrap();
        assert!((y.mean() - 0.5).abs() < 0.005);
    }

    #[test]
    fn saturated_predictor_gives_all_ones() {
        let d = LogisticDesign::new(DMatrix::from_element(1000, 1, 1.0)).unwrap();
        let y = simulate_logistic(&d, &DVector::from_element(1, 30.0), &mut derive_seed(2, 0, 0)).unwrap();
        assert!(y.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let d = design(10, 2, 3);
        let err = simulate_logistic(&d, &DVector::zeros(3), &mut derive_seed(0, 0, 0));
        assert!(matches!(err, Err(SimError::Dimension { expected: 2, got: 3 })));
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        assert!(matches!(LogisticDesign::new(x), Err(SimError::RankDeficient { .. })));
    }

    #[test]
    fn simulation_is_reproducible() {
        let d = design(50, 3, 4);
        let theta = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let a = simulate_logistic(&d, &theta, &mut derive_seed(9, 1, 3)).unwrap();
        let b = simulate_logistic(&d, &theta, &mut derive_seed(9, 1, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marginal_mean_matches_probability() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 1.0, -0.4]);
        let d = LogisticDesign::new(x.clone()).unwrap();
        let theta = DVector::from_vec(vec![-0.3, 1.1]);
        let mu = logistic(-0.3 + 0.7 * 1.1);
        let reps = 100_000;
        let mut ones = 0.0;
        for r in 0..reps {
            ones += simulate_logistic(&d, &theta, &mut derive_seed(11, 1, r as u64)).unwrap()[0];
        }
        let mean = ones / reps as f64;
        let se = (mu * (1.0 - mu) / reps as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se, "{mean} vs {mu}");
    }

    fn glmm_design(m: usize, size: usize, q: usize, seed: u64) -> GlmmDesign {
        let mut rng = derive_seed(seed, 4, 0);
        GlmmDesign::balanced(draw_covariates(m * size, q, 0.0, 1.0, &mut rng), m, size).unwrap()
    }

    #[test]
    fn zero_variance_glmm_matches_logistic() {
        let g = glmm_design(10, 5, 2, 5);
        let mut aug = DMatrix::from_element(50, 3, 1.0);
        aug.columns_mut(1, 2).copy_from(g.x());
        let l = LogisticDesign::new(aug).unwrap();
        let beta = DVector::from_vec(vec![0.2, 1.0, -0.5]);
        let theta = DVector::from_vec(vec![0.2, 1.0, -0.5, 0.0]);
        let a = simulate_glmm(&g, &theta, VarianceScale::Variance, &mut derive_seed(3, 0, 0)).unwrap();
        let b = simulate_logistic(&l, &beta, &mut derive_seed(3, 0, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_variance_rejected() {
        let g = glmm_design(4, 3, 1, 6);
        let theta = DVector::from_vec(vec![0.0, 0.0, -1.0]);
        assert!(matches!(
            simulate_glmm(&g, &theta, VarianceScale::Variance, &mut derive_seed(0, 0, 0)),
            Err(SimError::NegativeVariance(_))
        ));
    }

    // Fraction of within-cluster pairs sharing a response, averaged over seeds.
    fn agreement(sigma2: f64) -> f64 {
        let g = glmm_design(200, 5, 1, 8);
        let theta = DVector::from_vec(vec![0.0, 0.0, sigma2]);
        let mut agree = 0.0;
        let mut pairs = 0.0;
        for r in 0..20 {
            let y = simulate_glmm(&g, &theta, VarianceScale::Variance, &mut derive_seed(13, 1, r)).unwrap();
            for c in 0..g.m() {
                let idx = g.members(c);
                for a in 0..idx.len() {
                    for b in a + 1..idx.len() {
                        pairs += 1.0;
                        if y[idx[a]] == y[idx[b]] {
                            agree += 1.0;
                        }
                    }
                }
            }
        }
        agree / pairs
    }

    #[test]
    fn large_variance_makes_clusters_homogeneous() {
        let low = agreement(0.1);
        let high = agreement(10.0);
        // with beta = 0 and sigma2 -> 0 pairs agree half the time
        assert!((low - 0.5).abs() < 0.03, "low = {low}");
        assert!(high > 0.7, "high = {high}");
    }

    #[test]
    fn csv_roundtrip() {
        let ds = Dataset {
            x: DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, -0.25, 1.0, 2.0]),
            y: DVector::from_vec(vec![1.0, 0.0, 1.0]),
            cluster: Some(vec![0, 0, 1]),
        };
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_missing_column_is_named() {
        let err = Dataset::from_reader("y,x_1,x_3\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("x_2"), "{err}");
        let err = Dataset::from_reader("x_1\n2\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("`y`"), "{err}");
    }
}
