//! Global and local Moran's I over a binary contiguity graph.
//!
//! The statistic uses raw binary weights (no row standardisation), so the
//! scaling factor is `N / w_total`:
//!
//! ```text
//! I = (N / w_total) * sum_ij w_ij (z_i - zbar)(z_j - zbar) / sum_i (z_i - zbar)^2
//! ```
//!
//! Inference comes in two flavours. [`morans_z_test`] applies the classical
//! moments under the randomisation assumption (all permutations of the
//! observed values equally likely) and a normal approximation; the default
//! alternative is one-sided positive autocorrelation, the direction of
//! interest for clustering questions, with a two-sided option. The
//! [`morans_permutation_test`] draws seeded random permutations and counts
//! how often the permuted statistic reaches the observed one.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::lattice::AdjacencyGraph;
use crate::rngutil::stream_rng;
use crate::special::normal_sf;
use crate::{Error, Result};

/// Which alternative hypothesis the analytic p-value covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tail {
    /// Positive autocorrelation: `P(Z >= z)`.
    #[default]
    Upper,
    /// Either direction: `2 P(Z >= |z|)`.
    TwoSided,
}

/// Outcome of a Moran's I analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct MoranResult {
    /// Observed statistic.
    pub statistic: f64,
    /// Expectation under the null, `-1 / (N - 1)`.
    pub expected: f64,
    /// Standardised statistic under the randomisation variance.
    pub z_score: f64,
    /// Normal-approximation p-value for the requested tail.
    pub p_value_analytic: f64,
    /// Permutation p-value, when a permutation test was run.
    pub p_value_permutation: Option<f64>,
    pub n_regions: usize,
    pub n_permutations: Option<u32>,
}

fn check_inputs(values: &[f64], graph: &AdjacencyGraph) -> Result<()> {
    if values.len() != graph.n_regions() {
        return Err(Error::invalid(format_args!(
            "value vector has length {} but the graph has {} regions",
            values.len(),
            graph.n_regions()
        )));
    }
    if values.len() < 2 {
        return Err(Error::invalid("Moran's I needs at least two regions"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("values must be finite"));
    }
    Ok(())
}

/// Centered deviations and their sum of squares; errors when the input is
/// constant (the statistic is undefined) or the graph has no edges.
fn deviations(values: &[f64], graph: &AdjacencyGraph) -> Result<(Vec<f64>, f64)> {
    if graph.w_total() == 0 {
        return Err(Error::undefined(
            "Moran's I needs at least one contiguity tie; the graph is all islands",
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    if ss == 0.0 {
        return Err(Error::undefined(
            "Moran's I is undefined for a constant value vector",
        ));
    }
    Ok((dev, ss))
}

fn cross_product(dev: &[f64], graph: &AdjacencyGraph) -> f64 {
    let mut acc = 0.0;
    for (i, nb) in graph.neighbor_lists().iter().enumerate() {
        let di = dev[i];
        for &j in nb {
            acc += di * dev[j];
        }
    }
    acc
}

/// Global Moran's I.
pub fn morans_i_global(values: &[f64], graph: &AdjacencyGraph) -> Result<f64> {
    check_inputs(values, graph)?;
    let (dev, ss) = deviations(values, graph)?;
    let n = values.len() as f64;
    Ok((n / graph.w_total() as f64) * cross_product(&dev, graph) / ss)
}

/// Local Moran's I for every region. The values satisfy
/// `sum_i I_i = I_global * w_total`.
pub fn morans_i_local(values: &[f64], graph: &AdjacencyGraph) -> Result<Vec<f64>> {
    check_inputs(values, graph)?;
    let (dev, ss) = deviations(values, graph)?;
    let scale = values.len() as f64 / ss;
    Ok(graph
        .neighbor_lists()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let lag: f64 = nb.iter().map(|&j| dev[j]).sum();
            scale * dev[i] * lag
        })
        .collect())
}

/// Moments of I under the randomisation assumption.
///
/// Returns `(expected, variance)`. For the symmetric binary weights used
/// here the spatial sums reduce to `S0 = w_total`, `S1 = 2 w_total`,
/// `S2 = 4 sum_i deg_i^2`.
fn randomisation_moments(dev: &[f64], ss: f64, graph: &AdjacencyGraph) -> Result<(f64, f64)> {
    let n = dev.len() as f64;
    if dev.len() < 4 {
        return Err(Error::invalid(
            "the randomisation variance of Moran's I needs at least 4 regions",
        ));
    }
    let s0 = graph.w_total() as f64;
    let s1 = 2.0 * s0;
    let s2: f64 = (0..graph.n_regions())
        .map(|i| {
            let d = 2.0 * graph.degree(i) as f64;
            d * d
        })
        .sum();
    let m2 = ss / n;
    let m4 = dev.iter().map(|d| d * d * d * d).sum::<f64>() / n;
    let b2 = m4 / (m2 * m2);
    let expected = -1.0 / (n - 1.0);
    let num = n * ((n * n - 3.0 * n + 3.0) * s1 - n * s2 + 3.0 * s0 * s0)
        - b2 * ((n * n - n) * s1 - 2.0 * n * s2 + 6.0 * s0 * s0);
    let den = (n - 1.0) * (n - 2.0) * (n - 3.0) * s0 * s0;
    let variance = num / den - expected * expected;
    if !(variance > 0.0) {
        return Err(Error::numerical(format_args!(
            "randomisation variance of Moran's I is not positive ({variance})"
        )));
    }
    Ok((expected, variance))
}

/// Moran's I with the analytic z-test for the given tail.
pub fn morans_z_test_tailed(
    values: &[f64],
    graph: &AdjacencyGraph,
    tail: Tail,
) -> Result<MoranResult> {
    check_inputs(values, graph)?;
    let (dev, ss) = deviations(values, graph)?;
    let n = values.len();
    let statistic = (n as f64 / graph.w_total() as f64) * cross_product(&dev, graph) / ss;
    let (expected, variance) = randomisation_moments(&dev, ss, graph)?;
    let z_score = (statistic - expected) / libm::sqrt(variance);
    let p_value_analytic = match tail {
        Tail::Upper => normal_sf(z_score),
        Tail::TwoSided => (2.0 * normal_sf(libm::fabs(z_score))).min(1.0),
    };
    Ok(MoranResult {
        statistic,
        expected,
        z_score,
        p_value_analytic,
        p_value_permutation: None,
        n_regions: n,
        n_permutations: None,
    })
}

/// Moran's I with the analytic z-test against positive autocorrelation.
pub fn morans_z_test(values: &[f64], graph: &AdjacencyGraph) -> Result<MoranResult> {
    morans_z_test_tailed(values, graph, Tail::Upper)
}

/// Permutation test for positive autocorrelation.
///
/// Draws `n_permutations >= 99` random relabellings. Replicate `k` shuffles
/// with its own RNG sub-stream derived from `(seed, k)`, so the p-value is
/// reproducible and independent of evaluation order. The permutation
/// p-value uses the add-one rule `(1 + #{I_perm >= I_obs}) / (n_perm + 1)`;
/// the analytic test is reported alongside.
pub fn morans_permutation_test(
    values: &[f64],
    graph: &AdjacencyGraph,
    n_permutations: u32,
    seed: u64,
) -> Result<MoranResult> {
    if n_permutations < 99 {
        return Err(Error::invalid(format_args!(
            "permutation test needs at least 99 permutations, got {n_permutations}"
        )));
    }
    let mut result = morans_z_test(values, graph)?;
    let observed = result.statistic;

    // The denominator sum of squares and the scaling constant are permutation
    // invariant; only the cross product changes.
    let (dev, ss) = deviations(values, graph)?;
    let scale = values.len() as f64 / (graph.w_total() as f64 * ss);

    let mut hits = 0u32;
    let mut perm = dev.clone();
    for k in 0..n_permutations {
        let mut rng = stream_rng(seed, k as u64);
        perm.copy_from_slice(&dev);
        perm.shuffle(&mut rng);
        let stat = scale * cross_product(&perm, graph);
        if stat >= observed {
            hits += 1;
        }
    }
    result.p_value_permutation =
        Some((1.0 + hits as f64) / (n_permutations as f64 + 1.0));
    result.n_permutations = Some(n_permutations);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::AdjacencyGraph;
    use alloc::string::ToString;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn cycle_graph(n: usize) -> AdjacencyGraph {
        let ids: Vec<_> = (0..n).map(|i| i.to_string()).collect();
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        AdjacencyGraph::from_edges(ids, &edges).unwrap()
    }

    fn pair_graph() -> AdjacencyGraph {
        AdjacencyGraph::from_edges(vec!["a".to_string(), "b".to_string()], &[(0, 1)]).unwrap()
    }

    #[test]
    fn two_regions_opposite_values() {
        // Deviations are +-1/2; cross product = 2 * (-1/4) = -1/2;
        // I = (2/2) * (-1/2) / (1/2) = -1.
        let g = pair_graph();
        let i = morans_i_global(&[1.0, 0.0], &g).unwrap();
        assert_abs_diff_eq!(i, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn four_cycle_checkerboard() {
        let g = cycle_graph(4);
        let i = morans_i_global(&[1.0, 0.0, 1.0, 0.0], &g).unwrap();
        assert_abs_diff_eq!(i, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_vector_is_undefined() {
        let g = cycle_graph(4);
        let err = morans_i_global(&[2.0, 2.0, 2.0, 2.0], &g).unwrap_err();
        assert!(matches!(err, Error::UndefinedStatistic(_)));
    }

    #[test]
    fn all_island_graph_is_undefined() {
        let g = AdjacencyGraph::from_edges(vec!["a".to_string(), "b".to_string()], &[]).unwrap();
        assert!(matches!(
            morans_i_global(&[1.0, 0.0], &g),
            Err(Error::UndefinedStatistic(_))
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = pair_graph();
        assert!(morans_i_global(&[1.0], &g).is_err());
    }

    #[test]
    fn expected_value_formula() {
        let g = cycle_graph(6);
        let r = morans_z_test(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0], &g).unwrap();
        assert_abs_diff_eq!(r.expected, -0.2, epsilon = 1e-15);
        assert_eq!(r.n_regions, 6);
    }

    #[test]
    fn local_moran_sums_to_global_times_weight() {
        let g = cycle_graph(7);
        let values = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0];
        let global = morans_i_global(&values, &g).unwrap();
        let local = morans_i_local(&values, &g).unwrap();
        let sum: f64 = local.iter().sum();
        assert_abs_diff_eq!(sum, global * g.w_total() as f64, epsilon = 1e-12);
    }

    #[test]
    fn local_moran_two_region_oracle() {
        // dev = (1/2, -1/2), scale = 2 / (1/2) = 4,
        // I_1 = 4 * (1/2) * (-1/2) = -1, same for I_2.
        let g = pair_graph();
        let local = morans_i_local(&[1.0, 0.0], &g).unwrap();
        assert_abs_diff_eq!(local[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(local[1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn checkerboard_z_is_negative_with_upper_tail_near_one() {
        let g = cycle_graph(6);
        let r = morans_z_test(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &g).unwrap();
        assert_abs_diff_eq!(r.statistic, -1.0, epsilon = 1e-12);
        assert!(r.z_score < 0.0);
        assert!(r.p_value_analytic > 0.5);
        let two = morans_z_test_tailed(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &g, Tail::TwoSided)
            .unwrap();
        assert_abs_diff_eq!(
            two.p_value_analytic,
            2.0 * normal_sf(libm::fabs(two.z_score)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn permutation_test_is_deterministic_and_bounded() {
        let g = cycle_graph(8);
        let values = [5.0, 4.0, 4.0, 3.0, 1.0, 0.0, 0.0, 2.0];
        let a = morans_permutation_test(&values, &g, 199, 7).unwrap();
        let b = morans_permutation_test(&values, &g, 199, 7).unwrap();
        assert_eq!(a, b);
        let p = a.p_value_permutation.unwrap();
        // Add-one rule bounds.
        assert!(p >= 1.0 / 200.0 && p <= 1.0);
        assert_eq!(a.n_permutations, Some(199));
        // A different seed may move the p-value but stays in bounds.
        let c = morans_permutation_test(&values, &g, 199, 8).unwrap();
        assert!(c.p_value_permutation.unwrap() >= 1.0 / 200.0);
    }

    #[test]
    fn permutation_count_floor() {
        let g = cycle_graph(4);
        assert!(morans_permutation_test(&[1.0, 0.0, 1.0, 0.0], &g, 98, 1).is_err());
    }
}
