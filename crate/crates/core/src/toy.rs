//! Problems whose binding function is known in closed form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ib::Binding;
use crate::rng::SimRng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("invalid toy: {0}")]
    Invalid(String),
    #[error("I + M + L is singular")]
    Singular,
}

/// Initial estimator `pi_hat = (I + M + L_n) theta + s + c_n + v` with
/// Gaussian noise `v` of standard deviation `noise_sd / sqrt(n)` per
/// coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBiasToy {
    #[serde(with = "crate::serde_vec::matrix")]
    pub m: DMatrix<f64>,
    #[serde(with = "crate::serde_vec")]
    pub s: DVector<f64>,
    #[serde(with = "crate::serde_vec::matrix")]
    pub l_n: DMatrix<f64>,
    #[serde(with = "crate::serde_vec")]
    pub c_n: DVector<f64>,
    pub noise_sd: f64,
    pub n: usize,
}

impl LinearBiasToy {
    pub fn new(
        m: DMatrix<f64>,
        s: DVector<f64>,
        l_n: DMatrix<f64>,
        c_n: DVector<f64>,
        noise_sd: f64,
        n: usize,
    ) -> Result<Self, ToyError> {
        let toy = Self { m, s, l_n, c_n, noise_sd, n };
        toy.validate()?;
        Ok(toy)
    }

    /// Only the asymptotic bias slope `M` and offset `s`.
    pub fn affine(m: DMatrix<f64>, s: DVector<f64>) -> Result<Self, ToyError> {
        let p = s.len();
        Self::new(m, s, DMatrix::zeros(p, p), DVector::zeros(p), 0.0, 100)
    }

    /// `L_n = l_scale / sqrt(n) I` and `c_n = c_scale / n 1`.
    pub fn from_scales(
        m: DMatrix<f64>,
        s: DVector<f64>,
        l_scale: f64,
        c_scale: f64,
        noise_sd: f64,
        n: usize,
    ) -> Result<Self, ToyError> {
        let p = s.len();
        let nf = n as f64;
        let l = DMatrix::identity(p, p) * (l_scale / nf.sqrt());
        let c = DVector::from_element(p, c_scale / nf);
        Self::new(m, s, l, c, noise_sd, n)
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let p = self.s.len();
        if p == 0 {
            return Err(ToyError::Invalid("dimension must be positive".into()));
        }
        if self.m.shape() != (p, p) || self.l_n.shape() != (p, p) || self.c_n.len() != p {
            return Err(ToyError::Invalid("M, L_n, s and c_n must agree in dimension".into()));
        }
        let finite = self.m.iter().chain(self.l_n.iter()).chain(self.s.iter()).chain(self.c_n.iter()).all(|v| v.is_finite());
        if !finite || !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(ToyError::Invalid("entries must be finite and noise_sd nonnegative".into()));
        }
        if self.n == 0 {
            return Err(ToyError::Invalid("n must be positive".into()));
        }
        Ok(())
    }

    /// `||M||_F < 1`.
    pub fn is_contractive(&self) -> bool {
        self.m.norm() < 1.0
    }

    /// `I + M + L_n`.
    pub fn slope(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) + &self.m + &self.l_n
    }
}

/// Divisor-`n` variance of `n` draws from `N(0, theta)`; `E = theta (1 - 1/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceToy {
    pub n: usize,
}

impl VarianceToy {
    pub fn new(n: usize) -> Result<Self, ToyError> {
        if n < 2 {
            return Err(ToyError::Invalid(format!("n = {n} must be at least 2")));
        }
        Ok(Self { n })
    }

    /// Exact variance of the initial estimator, `2 theta^2 (n - 1) / n^2`.
    pub fn estimator_variance(&self, theta: f64) -> f64 {
        let n = self.n as f64;
        2.0 * theta * theta * (n - 1.0) / (n * n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Toy {
    LinearBias(LinearBiasToy),
    Variance(VarianceToy),
}

impl Toy {
    pub fn dim(&self) -> usize {
        match self {
            Toy::LinearBias(t) => t.dim(),
            Toy::Variance(_) => 1,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Toy::LinearBias(t) => t.n,
            Toy::Variance(t) => t.n,
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        match self {
            Toy::LinearBias(t) => t.validate(),
            Toy::Variance(t) => VarianceToy::new(t.n).map(|_| ()),
        }
    }
}

/// Closed-form `pi(theta, n)`.
pub fn toy_binding_exact(toy: &Toy, theta: &DVector<f64>) -> DVector<f64> {
    match toy {
        Toy::LinearBias(t) => t.slope() * theta + &t.s + &t.c_n,
        Toy::Variance(t) => theta * (1.0 - 1.0 / t.n as f64),
    }
}

/// Root of `pi_obs = pi(theta, n)`: `(I + M + L_n)^{-1} (pi_obs - s - c_n)`.
pub fn toy_fixed_point_closed_form(toy: &Toy, pi_obs: &DVector<f64>) -> Result<DVector<f64>, ToyError> {
    match toy {
        Toy::LinearBias(t) => {
            let rhs = pi_obs - &t.s - &t.c_n;
            let lu = t.slope().lu();
            if !lu.is_invertible() {
                return Err(ToyError::Singular);
            }
            lu.solve(&rhs).ok_or(ToyError::Singular)
        }
        Toy::Variance(t) => {
            let n = t.n as f64;
            Ok(pi_obs * (n / (n - 1.0)))
        }
    }
}

/// One draw of the initial estimator at `theta`.
pub fn toy_simulate(toy: &Toy, theta: &DVector<f64>, rng: &mut SimRng) -> DVector<f64> {
    match toy {
        Toy::LinearBias(t) => {
            let mut v = toy_binding_exact(toy, theta);
            if t.noise_sd > 0.0 {
                let sd = t.noise_sd / (t.n as f64).sqrt();
                for x in v.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += sd * z;
                }
            }
            v
        }
        Toy::Variance(t) => {
            let sd = theta[0].max(0.0).sqrt();
            let draws: Vec<f64> = (0..t.n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    sd * z
                })
                .collect();
            let n = t.n as f64;
            let mean = draws.iter().sum::<f64>() / n;
            let ss: f64 = draws.iter().map(|x| (x - mean).powi(2)).sum();
            DVector::from_element(1, ss / n)
        }
    }
}

impl Binding for Toy {
    fn dim(&self) -> usize {
        Toy::dim(self)
    }

    fn simulate_estimate(&self, theta: &DVector<f64>, rng: &mut SimRng) -> Option<DVector<f64>> {
        Some(toy_simulate(self, theta, rng))
    }

    fn exact(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some(toy_binding_exact(self, theta))
    }

    fn clamp(&self, theta: &mut DVector<f64>) -> bool {
        match self {
            Toy::Variance(_) if theta[0] < 0.0 => {
                theta[0] = 0.0;
                true
            }
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;

    #[test]
    fn zero_bias_toy_is_identity() {
        let toy = Toy::LinearBias(LinearBiasToy::affine(DMatrix::zeros(2, 2), DVector::zeros(2)).unwrap());
        let th = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(toy_binding_exact(&toy, &th), th);
        assert_eq!(toy_fixed_point_closed_form(&toy, &th).unwrap(), th);
    }

    #[test]
    fn affine_evaluation() {
        let toy = Toy::LinearBias(
            LinearBiasToy::affine(DMatrix::identity(2, 2) * 0.3, DVector::from_vec(vec![1.0, -1.0])).unwrap(),
        );
        assert_eq!(toy_binding_exact(&toy, &DVector::zeros(2)), DVector::from_vec(vec![1.0, -1.0]));
    }

    #[test]
    fn variance_toy_binding_and_root() {
        let toy = Toy::Variance(VarianceToy::new(10).unwrap());
        let v = toy_binding_exact(&toy, &DVector::from_element(1, 2.0));
        assert!((v[0] - 1.8).abs() < 1e-15);
        let r = toy_fixed_point_closed_form(&toy, &DVector::from_element(1, 1.0)).unwrap();
        assert!((r[0] - 10.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_draw_is_exact() {
        let toy = Toy::LinearBias(
            LinearBiasToy::from_scales(DMatrix::identity(2, 2) * 0.2, DVector::from_vec(vec![0.5, 0.1]), 1.0, 2.0, 0.0, 25)
                .unwrap(),
        );
        let th = DVector::from_vec(vec![1.0, 2.0]);
        let mut rng = derive_seed(1, 1, 1);
        assert_eq!(toy_simulate(&toy, &th, &mut rng), toy_binding_exact(&toy, &th));
    }

    #[test]
    fn variance_draws_have_chi_square_moments() {
        let toy = Toy::Variance(VarianceToy::new(10).unwrap());
        let th = DVector::from_element(1, 2.0);
        let reps = 100_000;
        let draws: Vec<f64> = (0..reps).map(|r| toy_simulate(&toy, &th, &mut derive_seed(5, 1, r))[0]).collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let exact_var = 2.0 * 4.0 * 9.0 / 100.0;
        assert!((mean - 1.8).abs() < 3.0 * (exact_var / reps as f64).sqrt(), "{mean}");
        assert!((var / exact_var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn invalid_toys_rejected() {
        assert!(VarianceToy::new(1).is_err());
        assert!(LinearBiasToy::affine(DMatrix::zeros(2, 3), DVector::zeros(2)).is_err());
        let singular = Toy::LinearBias(LinearBiasToy::affine(-DMatrix::identity(1, 1), DVector::zeros(1)).unwrap());
        assert_eq!(toy_fixed_point_closed_form(&singular, &DVector::zeros(1)), Err(ToyError::Singular));
    }
}
