//! Bridge-sampling estimate of the marginal log-likelihood.
//!
//! Given draws from a posterior `pi = q / Z` whose unnormalised density
//! `q` can be evaluated, and a tractable reference density `g` (here a
//! Gaussian moment-matched to the draws), the optimal-bridge fixed point
//!
//! ```text
//! Z  <-  mean_g[ q / (s1 q + s2 Z g) ]  /  mean_pi[ g / (s1 q + s2 Z g) ]
//! ```
//!
//! (`s1`, `s2` the sample-share weights) converges to the estimator with
//! the smallest asymptotic variance over all bridge functions. Everything
//! runs in log space so the likelihood scale never overflows.
//!
//! For the CAR model the sampled parameters are first mapped to
//! unconstrained coordinates so the Gaussian reference has matching
//! support: sum-to-zero blocks (intrinsic spatial and rw1 effects) drop
//! to a Helmert basis of one lower dimension, and positive scalars
//! (`theta`, the precisions) move to the log scale. The prior factors of
//! `q` include the exact normalising constants of the reduced-rank
//! Gaussian priors, so estimates are comparable across models that share
//! the same (flat-prior) fixed-effect block.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use super::{CarProblem, Likelihood, PosteriorDraws, SpatialPrior, TemporalPrior};
use crate::linalg::{chol_lower, helmert_basis, sample_mvn, spd_log_det, RunningCov};
use crate::rngutil::stream_rng;
use crate::special::ln_gamma;
use crate::{Error, Result};

/// Outcome of a bridge-sampling run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeResult {
    pub log_marginal: f64,
    /// Monte-Carlo standard error from ten contiguous draw blocks.
    pub mc_se: f64,
    /// Set when the estimate should not be trusted: fewer than 200
    /// posterior draws, a failed fixed-point iteration, or `mc_se`
    /// above 0.5.
    pub unstable: bool,
    pub n_posterior: usize,
    pub n_reference: usize,
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = libm::fmax(a, b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + libm::log(libm::exp(a - m) + libm::exp(b - m))
}

fn logmeanexp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |acc, &x| libm::fmax(acc, x));
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    let sum: f64 = v.iter().map(|&x| libm::exp(x - m)).sum();
    m + libm::log(sum / v.len() as f64)
}

/// Run the fixed-point iteration on precomputed log ratios
/// `l = log q - log g` at posterior (`l_p`) and reference (`l_g`) draws.
/// Returns the log estimate and whether the iteration converged.
fn iterate_bridge(l_p: &[f64], l_g: &[f64], init: f64) -> (f64, bool) {
    let n1 = l_p.len() as f64;
    let n2 = l_g.len() as f64;
    let ls1 = libm::log(n1 / (n1 + n2));
    let ls2 = libm::log(n2 / (n1 + n2));
    let mut num_terms = alloc::vec![0.0; l_g.len()];
    let mut den_terms = alloc::vec![0.0; l_p.len()];
    let mut z = init;
    for _ in 0..2000 {
        for (term, &lg) in num_terms.iter_mut().zip(l_g) {
            *term = lg - logaddexp(ls1 + lg, ls2 + z);
        }
        for (term, &lp) in den_terms.iter_mut().zip(l_p) {
            *term = -logaddexp(ls1 + lp, ls2 + z);
        }
        let z_new = logmeanexp(&num_terms) - logmeanexp(&den_terms);
        if !z_new.is_finite() {
            return (z_new, false);
        }
        if libm::fabs(z_new - z) < 1e-10 {
            return (z_new, true);
        }
        z = z_new;
    }
    (z, false)
}

/// Estimate `log Z` where `Z = integral of exp(log_q)` over the draw
/// space, from posterior draws of `pi = exp(log_q)/Z`.
///
/// `log_q` must be evaluable everywhere (it may return `-inf` outside the
/// support, but every posterior draw must have finite `log_q`). The
/// reference is a Gaussian matched to the draw moments; `n_reference`
/// fresh reference points are drawn from sub-stream 0 of `seed`.
pub fn bridge_log_marginal(
    draws: &[Vec<f64>],
    log_q: impl Fn(&[f64]) -> f64,
    n_reference: usize,
    seed: u64,
) -> Result<BridgeResult> {
    let n1 = draws.len();
    if n1 < 2 {
        return Err(Error::invalid("bridge needs at least two posterior draws"));
    }
    if n_reference < 2 {
        return Err(Error::invalid("bridge needs at least two reference draws"));
    }
    let d = draws[0].len();
    if d == 0 {
        return Err(Error::invalid("bridge draws must have at least one coordinate"));
    }

    // Moment-matched Gaussian reference.
    let mut acc = RunningCov::new(d);
    for x in draws {
        if x.len() != d {
            return Err(Error::invalid("ragged posterior draw matrix"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite posterior draw"));
        }
        acc.push(&DVector::from_iterator(d, x.iter().copied()));
    }
    let mean = acc.mean().clone();
    let mut sigma = acc.covariance().expect("at least two draws");
    let ridge = 1e-10 * (1.0 + sigma.trace() / d as f64);
    for j in 0..d {
        sigma[(j, j)] += ridge;
    }
    let chol = match chol_lower(&sigma) {
        Some(c) => c,
        None => {
            // Degenerate covariance: fall back to independent coordinates.
            let mut diag = DMatrix::zeros(d, d);
            for j in 0..d {
                diag[(j, j)] = sigma[(j, j)];
            }
            chol_lower(&diag).ok_or_else(|| {
                Error::numerical("posterior draws have a degenerate covariance")
            })?
        }
    };
    let l_factor = chol.l_dirty().lower_triangle();
    let log_det: f64 = (0..d).map(|j| 2.0 * libm::log(l_factor[(j, j)])).sum();
    let log_norm = -0.5 * d as f64 * libm::log(2.0 * core::f64::consts::PI) - 0.5 * log_det;
    let log_phi = |x: &[f64]| -> f64 {
        let v = DVector::from_iterator(d, x.iter().copied()) - &mean;
        let w = l_factor
            .solve_lower_triangular(&v)
            .expect("cholesky factor is nonsingular");
        log_norm - 0.5 * w.norm_squared()
    };

    let mut rng = stream_rng(seed, 0);
    let mut l_g = Vec::with_capacity(n_reference);
    let mut point = alloc::vec![0.0; d];
    for _ in 0..n_reference {
        let g = sample_mvn(&mean, &chol, &mut rng);
        for (dst, src) in point.iter_mut().zip(g.iter()) {
            *dst = *src;
        }
        let lq = log_q(&point);
        if lq.is_nan() || lq == f64::INFINITY {
            return Err(Error::numerical("log q not evaluable at a reference draw"));
        }
        l_g.push(lq - log_phi(&point));
    }
    let mut l_p = Vec::with_capacity(n1);
    for x in draws {
        let l = log_q(x) - log_phi(x);
        if !l.is_finite() {
            return Err(Error::numerical(
                "log q - log reference not finite at a posterior draw",
            ));
        }
        l_p.push(l);
    }

    // Importance-sampling initialiser from the reference draws.
    let init = logmeanexp(&l_g);
    if !init.is_finite() {
        return Err(Error::numerical(
            "reference draws never reach the posterior bulk",
        ));
    }
    let (log_marginal, converged) = iterate_bridge(&l_p, &l_g, init);
    if !log_marginal.is_finite() {
        return Err(Error::numerical("bridge iteration diverged"));
    }

    // Block standard error: rerun the bridge on ten contiguous blocks.
    let mc_se = if n1 >= 20 && n_reference >= 20 {
        let nb = 10usize;
        let mut blocks = Vec::with_capacity(nb);
        for b in 0..nb {
            let ps = (b * n1 / nb, (b + 1) * n1 / nb);
            let gs = (b * n_reference / nb, (b + 1) * n_reference / nb);
            let (zb, ok) = iterate_bridge(&l_p[ps.0..ps.1], &l_g[gs.0..gs.1], log_marginal);
            if !ok || !zb.is_finite() {
                blocks.clear();
                break;
            }
            blocks.push(zb);
        }
        if blocks.len() == nb {
            let m = blocks.iter().sum::<f64>() / nb as f64;
            let var =
                blocks.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (nb - 1) as f64;
            libm::sqrt(var / nb as f64)
        } else {
            f64::NAN
        }
    } else {
        f64::NAN
    };

    let unstable = n1 < 200 || !converged || !(mc_se <= 0.5);
    Ok(BridgeResult {
        log_marginal,
        mc_se,
        unstable,
        n_posterior: n1,
        n_reference,
    })
}

/// Bridge estimate for a fitted CAR model from its pooled draws.
///
/// The intrinsic spatial prior is only integrable on its sum-to-zero
/// subspace when the graph is connected, so a disconnected (or island)
/// graph under `Icar` is an error here — the model can still be fitted,
/// it just has no comparable marginal likelihood.
pub(crate) fn car_log_marginal(
    problem: &CarProblem,
    draws: &PosteriorDraws,
    seed: u64,
) -> Result<BridgeResult> {
    let spec = problem.spec().clone();
    let pf = problem.n_fixed();
    let n = problem.n_regions;
    let t = problem.n_years;
    let include_s = spec.include_spatial;
    let include_t = spec.include_temporal;
    let nb = matches!(spec.likelihood, Likelihood::NegativeBinomial);

    let n_kept = draws.beta.len();
    if n_kept < 2 {
        return Err(Error::invalid("bridge needs at least two posterior draws"));
    }
    if (include_s && (draws.spatial.len() != n_kept || draws.tau_s.len() != n_kept))
        || (include_t && (draws.temporal.len() != n_kept || draws.tau_gamma.len() != n_kept))
        || (nb && draws.theta.len() != n_kept)
    {
        return Err(Error::invalid("posterior draw blocks have mismatched lengths"));
    }

    // Spatial prior precision structure (the matrix whose quadratic form
    // `spatial_quad` computes), reduced to the Helmert basis when
    // intrinsic.
    let (spatial_basis, logdet_s, dim_s) = if include_s {
        let mut m = DMatrix::zeros(n, n);
        let edge_w = match spec.spatial_prior {
            SpatialPrior::Icar => 1.0,
            SpatialPrior::ProperCar { rho } => rho,
        };
        for (i, j) in problem.graph.edges() {
            m[(i, j)] -= edge_w;
            m[(j, i)] -= edge_w;
        }
        for i in 0..n {
            let deg = problem.graph.degree(i);
            m[(i, i)] = if deg == 0 { 1.0 } else { deg as f64 };
        }
        match spec.spatial_prior {
            SpatialPrior::Icar => {
                if problem.graph.connected_components().len() != 1 {
                    return Err(Error::invalid(
                        "marginal likelihood under the intrinsic spatial prior needs a connected graph",
                    ));
                }
                let h = helmert_basis(n);
                let a = h.transpose() * &m * &h;
                let ld = spd_log_det(&a)?;
                (Some(h), ld, n - 1)
            }
            SpatialPrior::ProperCar { .. } => (None, spd_log_det(&m)?, n),
        }
    } else {
        (None, 0.0, 0)
    };

    // Temporal prior structure: rw1 second differences or the identity.
    let (temporal_basis, logdet_g, dim_g) = if include_t {
        match spec.temporal_prior {
            TemporalPrior::Rw1 => {
                let mut q = DMatrix::zeros(t, t);
                for k in 0..t - 1 {
                    q[(k, k)] += 1.0;
                    q[(k + 1, k + 1)] += 1.0;
                    q[(k, k + 1)] -= 1.0;
                    q[(k + 1, k)] -= 1.0;
                }
                let h = helmert_basis(t);
                let a = h.transpose() * &q * &h;
                let ld = spd_log_det(&a)?;
                (Some(h), ld, t - 1)
            }
            TemporalPrior::Iid => (None, 0.0, t),
        }
    } else {
        (None, 0.0, 0)
    };

    // Map draws to the unconstrained bridge coordinates
    // (beta, u_s, u_gamma, ln theta, ln tau_s, ln tau_gamma).
    let dim_total = pf
        + dim_s
        + dim_g
        + usize::from(nb)
        + usize::from(include_s)
        + usize::from(include_t);
    let mut xi = Vec::with_capacity(n_kept);
    for k in 0..n_kept {
        let mut v = Vec::with_capacity(dim_total);
        v.extend_from_slice(&draws.beta[k]);
        if include_s {
            match &spatial_basis {
                Some(h) => {
                    let s = DVector::from_iterator(n, draws.spatial[k].iter().copied());
                    let u = h.transpose() * s;
                    v.extend(u.iter().copied());
                }
                None => v.extend_from_slice(&draws.spatial[k]),
            }
        }
        if include_t {
            match &temporal_basis {
                Some(h) => {
                    let g = DVector::from_iterator(t, draws.temporal[k].iter().copied());
                    let u = h.transpose() * g;
                    v.extend(u.iter().copied());
                }
                None => v.extend_from_slice(&draws.temporal[k]),
            }
        }
        if nb {
            v.push(libm::log(draws.theta[k]));
        }
        if include_s {
            v.push(libm::log(draws.tau_s[k]));
        }
        if include_t {
            v.push(libm::log(draws.tau_gamma[k]));
        }
        xi.push(v);
    }

    let hp = spec.hyperpriors;
    let ln2pi = libm::log(2.0 * core::f64::consts::PI);
    // Log density of Gamma(shape, rate) at exp(lx), in lx coordinates
    // (Jacobian included).
    let gamma_log_scale = |lx: f64, shape: f64, rate: f64| -> f64 {
        shape * libm::log(rate) - ln_gamma(shape) + shape * lx - rate * libm::exp(lx)
    };

    let log_q = move |v: &[f64]| -> f64 {
        let beta = &v[..pf];
        let mut pos = pf;
        let s_full: Vec<f64> = if include_s {
            let out = match &spatial_basis {
                Some(h) => {
                    let u = DVector::from_iterator(dim_s, v[pos..pos + dim_s].iter().copied());
                    (h * u).iter().copied().collect()
                }
                None => v[pos..pos + dim_s].to_vec(),
            };
            pos += dim_s;
            out
        } else {
            alloc::vec![0.0; n]
        };
        let g_full: Vec<f64> = if include_t {
            let out = match &temporal_basis {
                Some(h) => {
                    let u = DVector::from_iterator(dim_g, v[pos..pos + dim_g].iter().copied());
                    (h * u).iter().copied().collect()
                }
                None => v[pos..pos + dim_g].to_vec(),
            };
            pos += dim_g;
            out
        } else {
            alloc::vec![0.0; t]
        };
        let theta = if nb {
            let lt = v[pos];
            pos += 1;
            libm::exp(lt)
        } else {
            1.0
        };

        let mut lp = problem.log_likelihood_full(beta, &s_full, &g_full, theta);
        if nb {
            let ltheta = libm::log(theta);
            lp += gamma_log_scale(ltheta, hp.theta_shape, hp.theta_rate);
        }
        if include_s {
            let ltau = v[pos];
            pos += 1;
            let tau = libm::exp(ltau);
            let quad = problem.spatial_quad(&s_full);
            lp += 0.5 * dim_s as f64 * (ltau - ln2pi) + 0.5 * logdet_s - 0.5 * tau * quad;
            lp += gamma_log_scale(ltau, hp.tau_s_shape, hp.tau_s_rate);
        }
        if include_t {
            let ltau = v[pos];
            let tau = libm::exp(ltau);
            let quad = problem.temporal_quad(&g_full);
            lp += 0.5 * dim_g as f64 * (ltau - ln2pi) + 0.5 * logdet_g - 0.5 * tau * quad;
            lp += gamma_log_scale(ltau, hp.tau_gamma_shape, hp.tau_gamma_rate);
        }
        lp
    };

    bridge_log_marginal(&xi, log_q, n_kept, seed)
}
