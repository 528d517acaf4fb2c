//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold below which a direction counts as null.
pub const RANK_TOL: f64 = 1e-10;

pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

/// `X' diag(w) X`.
pub fn weighted_cross(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for mut col in xw.column_iter_mut() {
        col.component_mul_assign(w);
    }
    x.tr_mul(&xw)
}

/// Solve `a z = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let z = chol.solve(b);
    z.iter().all(|v| v.is_finite()).then_some(z)
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Sum in a fixed pairwise order, independent of how the terms were produced.
pub fn pairwise_sum(terms: &[DVector<f64>]) -> DVector<f64> {
    match terms.len() {
        0 => panic!("pairwise_sum of no terms"),
        1 => terms[0].clone(),
        len => {
            let (a, b) = terms.split_at(len / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn pairwise_mean(terms: &[DVector<f64>]) -> DVector<f64> {
    pairwise_sum(terms) / terms.len() as f64
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_duplicated_column() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(numerical_rank(&x), 1);
        assert_eq!(numerical_rank(&DMatrix::identity(3, 3)), 3);
    }

    #[test]
    fn weighted_cross_matches_definition() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, -1.0, 1.0, 0.5]);
        let w = DVector::from_vec(vec![0.5, 2.0, 1.0]);
        let direct = x.transpose() * DMatrix::from_diagonal(&w) * &x;
        assert!((weighted_cross(&x, &w) - direct).norm() < 1e-14);
    }

    #[test]
    fn pairwise_sum_is_order_fixed() {
        let terms: Vec<_> = (0..7).map(|i| DVector::from_element(1, 0.1 * i as f64)).collect();
        assert_eq!(pairwise_sum(&terms), pairwise_sum(&terms.clone()));
        assert!((pairwise_sum(&terms)[0] - 2.1).abs() < 1e-12);
    }
}
