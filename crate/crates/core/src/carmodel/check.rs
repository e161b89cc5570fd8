//! Brute-force validation that proper-CAR full conditionals imply the
//! intended joint distribution.
//!
//! A set of conditionals `s_i | s_{-i} ~ N(rho * sum_j w_ij s_j, sigma_i^2)`
//! is consistent with a joint Gaussian exactly when the implied precision
//! `P = Sigma_C^{-1} (I - rho C)` is symmetric (conditional variances equal
//! across every edge) and positive definite; the joint covariance is then
//! `(I - rho C)^{-1} Sigma_C`. This module runs a plain Gibbs sampler that
//! only ever sees the conditionals and compares its sample covariance
//! against that closed form — a direct end-to-end test of the conditional
//! specification, kept deliberately small (at most 8 regions).

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::lattice::AdjacencyGraph;
use crate::linalg::{chol_lower, spd_inverse, RunningCov};
use crate::rngutil::stream_rng;
use crate::{Error, Result};

/// Result of [`car_joint_covariance_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct CarCovarianceCheck {
    /// Largest entrywise deviation between the Gibbs sample covariance
    /// and the closed-form joint covariance.
    pub max_abs_deviation: f64,
    /// Closed-form joint covariance `(I - rho C)^{-1} Sigma_C`, row-major.
    pub target: Vec<Vec<f64>>,
    /// Gibbs sample covariance, row-major.
    pub empirical: Vec<Vec<f64>>,
}

/// Gibbs-sample the joint distribution implied by proper-CAR conditionals
/// and compare against the closed-form covariance.
///
/// The sampler sees only the conditional moments; an extra tenth of
/// `sweeps` is used as burn-in. Inconsistent conditionals (variance
/// mismatch across an edge, or a non-positive-definite implied precision)
/// are rejected.
pub fn car_joint_covariance_check(
    graph: &AdjacencyGraph,
    rho: f64,
    cond_variances: &[f64],
    sweeps: u32,
    seed: u64,
) -> Result<CarCovarianceCheck> {
    let n = graph.n_regions();
    if n == 0 || n > 8 {
        return Err(Error::invalid(format_args!(
            "joint covariance check is a brute-force diagnostic for 1..=8 regions, got {n}"
        )));
    }
    if cond_variances.len() != n {
        return Err(Error::invalid(format_args!(
            "need one conditional variance per region: {} != {n}",
            cond_variances.len()
        )));
    }
    for (i, &v) in cond_variances.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format_args!(
                "conditional variance of region {i} must be positive and finite, got {v}"
            )));
        }
    }
    if !rho.is_finite() {
        return Err(Error::invalid("rho must be finite"));
    }
    if sweeps < 10 {
        return Err(Error::invalid("need at least 10 sweeps"));
    }
    if rho != 0.0 {
        for (i, j) in graph.edges() {
            if cond_variances[i] != cond_variances[j] {
                return Err(Error::invalid(format_args!(
                    "conditional variances differ across edge ({i}, {j}): the implied \
                     precision is asymmetric, so no joint distribution exists"
                )));
            }
        }
    }

    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        p[(i, i)] = 1.0 / cond_variances[i];
    }
    for (i, j) in graph.edges() {
        p[(i, j)] = -rho / cond_variances[i];
        p[(j, i)] = -rho / cond_variances[j];
    }
    if chol_lower(&p).is_none() {
        return Err(Error::invalid(format_args!(
            "rho = {rho} does not give a positive definite joint precision on this graph"
        )));
    }
    let target = spd_inverse(&p)?;

    let mut rng = stream_rng(seed, 0);
    let mut s = alloc::vec![0.0; n];
    let burn = (sweeps / 10).max(1);
    let mut cov = RunningCov::new(n);
    for sweep in 0..burn + sweeps {
        for i in 0..n {
            let mean: f64 = rho
                * graph
                    .neighbors(i)
                    .expect("index in range")
                    .iter()
                    .map(|&j| s[j])
                    .sum::<f64>();
            let z: f64 = StandardNormal.sample(&mut rng);
            s[i] = mean + libm::sqrt(cond_variances[i]) * z;
        }
        if sweep >= burn {
            cov.push(&DVector::from_iterator(n, s.iter().copied()));
        }
    }
    let emp = cov.covariance().expect("sweeps >= 10");

    let mut max_dev = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            max_dev = libm::fmax(max_dev, libm::fabs(emp[(i, j)] - target[(i, j)]));
        }
    }
    let to_rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect()
    };
    Ok(CarCovarianceCheck {
        max_abs_deviation: max_dev,
        target: to_rows(&target),
        empirical: to_rows(&emp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::{String, ToString};
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn named(n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("g{i}")).collect()
    }

    #[test]
    fn rho_zero_gives_the_diagonal_covariance() {
        let graph = AdjacencyGraph::from_edges(named(3), &[(0, 1), (1, 2)]).unwrap();
        let vars = [0.5, 2.0, 1.0];
        let check = car_joint_covariance_check(&graph, 0.0, &vars, 100_000, 11).unwrap();
        assert!(check.max_abs_deviation < 0.05, "{}", check.max_abs_deviation);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { vars[i] } else { 0.0 };
                assert_abs_diff_eq!(check.target[i][j], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_regions_match_the_hand_computed_joint() {
        // Conditionals s_0 ~ N(0.3 s_1, 1), s_1 ~ N(0.3 s_0, 1) imply the
        // joint covariance [[1, 0.3], [0.3, 1]] / (1 - 0.09).
        let graph =
            AdjacencyGraph::from_edges(vec!["a".to_string(), "b".to_string()], &[(0, 1)])
                .unwrap();
        let check =
            car_joint_covariance_check(&graph, 0.3, &[1.0, 1.0], 200_000, 5).unwrap();
        let want = [[1.0 / 0.91, 0.3 / 0.91], [0.3 / 0.91, 1.0 / 0.91]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(check.target[i][j], want[i][j], epsilon = 1e-12);
                assert!(
                    (check.empirical[i][j] - want[i][j]).abs() < 0.05,
                    "empirical[{i}][{j}] = {} vs {}",
                    check.empirical[i][j],
                    want[i][j]
                );
            }
        }
        assert!(check.max_abs_deviation < 0.05);
    }

    #[test]
    fn four_cycle_agrees_with_closed_form() {
        let graph =
            AdjacencyGraph::from_edges(named(4), &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let check =
            car_joint_covariance_check(&graph, 0.2, &[1.0; 4], 200_000, 9).unwrap();
        assert!(check.max_abs_deviation < 0.05, "{}", check.max_abs_deviation);
    }

    #[test]
    fn inconsistent_or_improper_conditionals_are_rejected() {
        let graph =
            AdjacencyGraph::from_edges(vec!["a".to_string(), "b".to_string()], &[(0, 1)])
                .unwrap();
        // Non-positive-definite implied precision.
        let err = car_joint_covariance_check(&graph, 1.2, &[1.0, 1.0], 1000, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "{err}");
        // Variance mismatch across an edge.
        assert!(car_joint_covariance_check(&graph, 0.3, &[1.0, 2.0], 1000, 1).is_err());
        // ... which is fine when rho = 0 (no coupling).
        assert!(car_joint_covariance_check(&graph, 0.0, &[1.0, 2.0], 1000, 1).is_ok());
        // Too many regions for a brute-force check.
        let big = AdjacencyGraph::from_edges(named(9), &[(0, 1)]).unwrap();
        assert!(car_joint_covariance_check(&big, 0.1, &[1.0; 9], 1000, 1).is_err());
    }
}
