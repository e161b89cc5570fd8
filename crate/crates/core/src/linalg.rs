//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! The systems solved here are tiny (a handful of regression coefficients,
//! proposal covariances, reduced-rank prior precisions), so everything goes
//! through dense Cholesky factorisations.

use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Solve the symmetric positive-definite system `a x = b` by Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(a.clone())
        .ok_or_else(|| Error::singular("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

/// Cholesky factor (lower triangular `L` with `L L^T = a`), if `a` is SPD.
pub fn chol_lower(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(a.clone())
        .ok_or_else(|| Error::singular("matrix is not positive definite"))?;
    Ok(chol.inverse())
}

/// Log-determinant of a symmetric positive-definite matrix.
pub fn spd_log_det(a: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(a.clone())
        .ok_or_else(|| Error::singular("matrix is not positive definite"))?;
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        acc += libm::log(chol.l_dirty()[(i, i)]);
    }
    Ok(2.0 * acc)
}

/// Orthonormal basis of the sum-to-zero subspace of `R^n` (Helmert basis).
///
/// Returns an `n x (n-1)` matrix `H` with orthonormal columns, each
/// orthogonal to the constant vector, so `s = H u` satisfies `sum(s) = 0`
/// for any `u`, and `u = H^T s` inverts it on the subspace.
pub fn helmert_basis(n: usize) -> DMatrix<f64> {
    assert!(n >= 2, "helmert basis needs n >= 2");
    let mut h = DMatrix::zeros(n, n - 1);
    for k in 1..n {
        let norm = 1.0 / libm::sqrt((k * (k + 1)) as f64);
        for i in 0..k {
            h[(i, k - 1)] = norm;
        }
        h[(k, k - 1)] = -(k as f64) * norm;
    }
    h
}

/// Draw from `N(mean, L L^T)` given the Cholesky factor `L`.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    mean + chol.l_dirty().lower_triangle() * z
}

/// Running mean and covariance of a vector sequence (Welford update).
///
/// Used by the adaptive random-walk proposal for regression coefficient
/// blocks: the empirical covariance of the chain so far shapes the proposal.
#[derive(Debug, Clone)]
pub struct RunningCov {
    n: u64,
    mean: DVector<f64>,
    // Sum of outer products of deviations; covariance = m2 / (n - 1).
    m2: DMatrix<f64>,
}

impl RunningCov {
    pub fn new(dim: usize) -> Self {
        RunningCov {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        // m2 += delta * delta2^T (symmetric in expectation; keep exact form)
        self.m2 += &delta * delta2.transpose();
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Sample covariance, or `None` with fewer than two observations.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        if self.n < 2 {
            return None;
        }
        let cov = &self.m2 / (self.n - 1) as f64;
        // Symmetrise to wash out the asymmetry of the update formula.
        Some((&cov + cov.transpose()) * 0.5)
    }
}

/// Convert a row-major `Vec<Vec<f64>>` into a `DMatrix`, validating shape.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::invalid("matrix needs at least one row"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid("ragged rows in matrix"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solve_and_inverse_agree() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let x = spd_solve(&a, &b).unwrap();
        let residual = &a * &x - &b;
        assert!(residual.amax() < 1e-12);
        let inv = spd_inverse(&a).unwrap();
        let x2 = inv * &b;
        assert!((x2 - x).amax() < 1e-12);
    }

    #[test]
    fn singular_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, 1.0]);
        assert!(matches!(spd_solve(&a, &b), Err(Error::Singular(_))));
    }

    #[test]
    fn log_det_matches_direct() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let det: f64 = 2.0 * 1.5 - 0.09;
        assert_abs_diff_eq!(spd_log_det(&a).unwrap(), libm::log(det), epsilon = 1e-12);
    }

    #[test]
    fn helmert_is_orthonormal_and_sum_free() {
        for n in 2..8 {
            let h = helmert_basis(n);
            let gram = h.transpose() * &h;
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(gram[(i, j)], want, epsilon = 1e-12);
                }
            }
            for j in 0..n - 1 {
                let col_sum: f64 = (0..n).map(|i| h[(i, j)]).sum();
                assert_abs_diff_eq!(col_sum, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn running_cov_matches_two_pass() {
        let xs = [
            [1.0, 2.0],
            [0.5, -1.0],
            [2.5, 0.0],
            [-1.0, 3.0],
            [0.0, 0.5],
        ];
        let mut rc = RunningCov::new(2);
        for x in &xs {
            rc.push(&DVector::from_column_slice(x));
        }
        let n = xs.len() as f64;
        let mean: [f64; 2] = [
            xs.iter().map(|x| x[0]).sum::<f64>() / n,
            xs.iter().map(|x| x[1]).sum::<f64>() / n,
        ];
        let mut cov = [[0.0; 2]; 2];
        for x in &xs {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += (x[a] - mean[a]) * (x[b] - mean[b]) / (n - 1.0);
                }
            }
        }
        let got = rc.covariance().unwrap();
        for a in 0..2 {
            assert_abs_diff_eq!(rc.mean()[a], mean[a], epsilon = 1e-12);
            for b in 0..2 {
                assert_abs_diff_eq!(got[(a, b)], cov[a][b], epsilon = 1e-12);
            }
        }
    }
}
