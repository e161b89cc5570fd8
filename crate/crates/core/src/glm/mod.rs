//! Negative binomial regression for panel counts.
//!
//! The data model is a panel of counts over (region, year) cells with a
//! positive exposure offset and a fixed set of covariates. The likelihood is
//! the NB2 parameterisation with a log link:
//!
//! ```text
//! y ~ NegBin(mu, theta),  Var(y) = mu + mu^2 / theta,
//! log mu = beta_0 + x' beta [+ log offset]
//! ```
//!
//! [`fit_nb_glm`] alternates iteratively reweighted least squares for the
//! coefficients with one-dimensional Newton updates of the dispersion
//! `theta` on the profile likelihood, until the relative change of the
//! log-likelihood drops below `1e-8` (or 100 outer rounds). As
//! `theta -> inf` the model degenerates to Poisson; `theta` is capped at
//! `1e6` and fits that hit the cap are flagged [`NbFit::poisson_limit`]
//! (quasi-Poisson behaviour).
//!
//! The L1-penalised path solver and cross-validation live in [`lasso`]
//! (re-exported here). Calendar year is deliberately *not* part of the
//! covariate design: temporal structure is handled by the random-effect
//! models downstream, not by the covariate selection stage.

mod lasso;

pub use lasso::{
    cv_select_lambda, lasso_nb_path, select_features, select_lambda_from_curve, CvCurves,
    LambdaRule, LassoPath, SelectedFeature, SelectedFeatures,
};

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::special::{digamma, ln_gamma, trigamma};
use crate::{Error, Result};

/// Dispersion cap: above this the fit is reported as the Poisson limit.
pub const THETA_CAP: f64 = 1e6;

/// One observed (region, year) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub region_index: usize,
    pub year_index: usize,
    pub count: u64,
    /// Exposure (population at risk); must be positive.
    pub offset: f64,
    pub covariates: Vec<f64>,
}

/// How a covariate column has been rescaled by [`prepare_covariates`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateScale {
    pub mean: f64,
    pub sd: f64,
}

/// Transform metadata attached to a prepared dataset, sufficient to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelTransform {
    /// Shift used inside `log(x + shift)` for log-flagged covariates.
    pub log_shift: f64,
    /// Post-log mean/sd used for standardisation, one per covariate.
    pub scales: Vec<CovariateScale>,
}

/// A validated panel of count observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub rows: Vec<PanelRow>,
    pub covariate_names: Vec<String>,
    /// Which covariates take the `log(x + shift)` transform in
    /// [`prepare_covariates`] (counts and other skewed positives).
    pub transform_log: Vec<bool>,
    /// Set when the covariates have been log-transformed/standardised.
    pub transform: Option<PanelTransform>,
}

impl PanelDataset {
    /// Validate and assemble a panel.
    ///
    /// Requirements: at least one row; every offset positive and finite;
    /// covariate vectors all of the declared length with finite entries;
    /// no duplicate (region, year) cell.
    pub fn new(
        rows: Vec<PanelRow>,
        covariate_names: Vec<String>,
        transform_log: Vec<bool>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("panel has no rows"));
        }
        if transform_log.len() != covariate_names.len() {
            return Err(Error::invalid(
                "transform_log length must match the number of covariates",
            ));
        }
        let p = covariate_names.len();
        let mut cells = BTreeSet::new();
        for (k, row) in rows.iter().enumerate() {
            if !(row.offset > 0.0) || !row.offset.is_finite() {
                return Err(Error::invalid(format_args!(
                    "row {k}: offset must be positive and finite, got {}",
                    row.offset
                )));
            }
            if row.covariates.len() != p {
                return Err(Error::invalid(format_args!(
                    "row {k}: expected {p} covariates, got {}",
                    row.covariates.len()
                )));
            }
            if row.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format_args!(
                    "row {k}: covariates must be finite"
                )));
            }
            if !cells.insert((row.region_index, row.year_index)) {
                return Err(Error::invalid(format_args!(
                    "duplicate (region {}, year {}) cell",
                    row.region_index, row.year_index
                )));
            }
        }
        Ok(PanelDataset {
            rows,
            covariate_names,
            transform_log,
            transform: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// One past the largest region index present.
    pub fn n_regions(&self) -> usize {
        self.rows.iter().map(|r| r.region_index + 1).max().unwrap_or(0)
    }

    /// One past the largest year index present.
    pub fn n_years(&self) -> usize {
        self.rows.iter().map(|r| r.year_index + 1).max().unwrap_or(0)
    }

    /// Keep only the named covariates (used after feature selection).
    pub fn with_covariates(&self, names: &[String]) -> Result<PanelDataset> {
        let mut idx = Vec::with_capacity(names.len());
        for name in names {
            let j = self
                .covariate_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| {
                    Error::invalid(format_args!("unknown covariate {name:?}"))
                })?;
            idx.push(j);
        }
        let rows = self
            .rows
            .iter()
            .map(|r| PanelRow {
                region_index: r.region_index,
                year_index: r.year_index,
                count: r.count,
                offset: r.offset,
                covariates: idx.iter().map(|&j| r.covariates[j]).collect(),
            })
            .collect();
        Ok(PanelDataset {
            rows,
            covariate_names: names.to_vec(),
            transform_log: idx.iter().map(|&j| self.transform_log[j]).collect(),
            transform: self.transform.as_ref().map(|t| PanelTransform {
                log_shift: t.log_shift,
                scales: idx.iter().map(|&j| t.scales[j]).collect(),
            }),
        })
    }
}

/// Result of a maximum-likelihood negative binomial fit.
#[derive(Debug, Clone, PartialEq)]
pub struct NbFit {
    pub intercept: f64,
    /// Slope per covariate, in the order of `covariate_names`.
    pub coefficients: Vec<f64>,
    pub dispersion_theta: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: u32,
    /// `theta` hit [`THETA_CAP`]: the counts carry no detectable
    /// overdispersion and the fit behaves as (quasi-)Poisson.
    pub poisson_limit: bool,
}

// ---------------------------------------------------------------------------
// Pointwise likelihood terms
// ---------------------------------------------------------------------------

/// Log-likelihood contribution of one NB2 observation.
pub fn nb_ll_term(y: u64, mu: f64, theta: f64) -> f64 {
    let yf = y as f64;
    let y_part = if y == 0 { 0.0 } else { yf * libm::log(mu) };
    ln_gamma(yf + theta) - ln_gamma(theta) - ln_gamma(yf + 1.0) + theta * libm::log(theta)
        + y_part
        - (yf + theta) * libm::log(theta + mu)
}

/// Log-likelihood contribution of one Poisson observation.
pub fn poisson_ll_term(y: u64, mu: f64) -> f64 {
    let yf = y as f64;
    let y_part = if y == 0 { 0.0 } else { yf * libm::log(mu) };
    y_part - mu - ln_gamma(yf + 1.0)
}

/// Unit deviance of one NB2 observation.
pub fn nb_unit_deviance(y: u64, mu: f64, theta: f64) -> f64 {
    let yf = y as f64;
    let y_part = if y == 0 { 0.0 } else { yf * libm::log(yf / mu) };
    2.0 * (y_part - (yf + theta) * libm::log((yf + theta) / (mu + theta)))
}

/// Unit deviance of one Poisson observation.
pub fn poisson_unit_deviance(y: u64, mu: f64) -> f64 {
    let yf = y as f64;
    let y_part = if y == 0 { 0.0 } else { yf * libm::log(yf / mu) };
    2.0 * (y_part - (yf - mu))
}

// ---------------------------------------------------------------------------
// Whole-panel likelihood pieces
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn eta_clamp(eta: f64) -> f64 {
    // exp() must stay finite; the fitted scale of count models is far
    // inside these bounds.
    eta.clamp(-500.0, 500.0)
}

fn linear_predictors(
    data: &PanelDataset,
    use_offset: bool,
    intercept: f64,
    coefficients: &[f64],
) -> Vec<f64> {
    data.rows
        .iter()
        .map(|row| {
            let mut eta = intercept;
            for (x, b) in row.covariates.iter().zip(coefficients) {
                eta += x * b;
            }
            if use_offset {
                eta += libm::log(row.offset);
            }
            eta_clamp(eta)
        })
        .collect()
}

/// Total NB2 log-likelihood of a panel under the given coefficients.
pub fn nb_log_likelihood(
    data: &PanelDataset,
    use_offset: bool,
    intercept: f64,
    coefficients: &[f64],
    theta: f64,
) -> f64 {
    let etas = linear_predictors(data, use_offset, intercept, coefficients);
    data.rows
        .iter()
        .zip(&etas)
        .map(|(row, &eta)| nb_ll_term(row.count, libm::exp(eta), theta))
        .sum()
}

/// Analytic score (gradient of the log-likelihood in `(intercept, coefs)`).
///
/// Component 0 is the intercept derivative, then one entry per covariate.
pub fn nb_score(
    data: &PanelDataset,
    use_offset: bool,
    intercept: f64,
    coefficients: &[f64],
    theta: f64,
) -> Vec<f64> {
    let etas = linear_predictors(data, use_offset, intercept, coefficients);
    let p = data.n_covariates();
    let mut grad = alloc::vec![0.0; p + 1];
    for (row, &eta) in data.rows.iter().zip(&etas) {
        let mu = libm::exp(eta);
        let u = theta * (row.count as f64 - mu) / (theta + mu);
        grad[0] += u;
        for (g, x) in grad[1..].iter_mut().zip(&row.covariates) {
            *g += u * x;
        }
    }
    grad
}

/// Total NB2 deviance of a panel under the given coefficients.
pub fn nb_deviance(
    data: &PanelDataset,
    use_offset: bool,
    intercept: f64,
    coefficients: &[f64],
    theta: f64,
) -> f64 {
    let etas = linear_predictors(data, use_offset, intercept, coefficients);
    data.rows
        .iter()
        .zip(&etas)
        .map(|(row, &eta)| nb_unit_deviance(row.count, libm::exp(eta), theta))
        .sum()
}

/// Total Poisson deviance of a panel under the given coefficients.
pub fn poisson_deviance(
    data: &PanelDataset,
    use_offset: bool,
    intercept: f64,
    coefficients: &[f64],
) -> f64 {
    let etas = linear_predictors(data, use_offset, intercept, coefficients);
    data.rows
        .iter()
        .zip(&etas)
        .map(|(row, &eta)| poisson_unit_deviance(row.count, libm::exp(eta)))
        .sum()
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Column name for error messages: 0 is the intercept.
fn column_name(data: &PanelDataset, j: usize) -> String {
    if j == 0 {
        String::from("(intercept)")
    } else {
        data.covariate_names[j - 1].clone()
    }
}

/// Reject covariates with zero variance up front, naming the offender.
fn check_covariate_variance(data: &PanelDataset) -> Result<()> {
    let n = data.n_rows() as f64;
    for j in 0..data.n_covariates() {
        let mean = data.rows.iter().map(|r| r.covariates[j]).sum::<f64>() / n;
        let var = data
            .rows
            .iter()
            .map(|r| {
                let d = r.covariates[j] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        if var == 0.0 {
            return Err(Error::invalid(format_args!(
                "covariate {:?} is constant; drop it before fitting",
                data.covariate_names[j]
            )));
        }
    }
    Ok(())
}

/// Solve the weighted least-squares normal equations, reporting the first
/// aliased column on failure.
fn solve_irls(
    data: &PanelDataset,
    xtwx: &DMatrix<f64>,
    xtwz: &DVector<f64>,
) -> Result<DVector<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(xtwx.clone()) {
        return Ok(chol.solve(xtwz));
    }
    // Diagnose: run a pivoted-free Cholesky by hand and report the column
    // whose pivot collapses.
    let d = xtwx.nrows();
    let mut l = xtwx.clone();
    for k in 0..d {
        let mut pivot = l[(k, k)];
        for m in 0..k {
            pivot -= l[(k, m)] * l[(k, m)];
        }
        let scale = xtwx[(k, k)].abs().max(1e-300);
        if pivot <= 1e-12 * scale {
            return Err(Error::singular(format_args!(
                "design column {:?} is aliased with earlier columns",
                column_name(data, k)
            )));
        }
        let pivot = libm::sqrt(pivot);
        l[(k, k)] = pivot;
        for i in k + 1..d {
            let mut v = l[(i, k)];
            for m in 0..k {
                v -= l[(i, m)] * l[(k, m)];
            }
            l[(i, k)] = v / pivot;
        }
    }
    Err(Error::singular("normal equations are not positive definite"))
}

/// IRLS pass for the coefficients at fixed `theta`. Returns the new
/// `(intercept, coefficients)`.
fn irls_update(
    data: &PanelDataset,
    use_offset: bool,
    intercept: f64,
    coefficients: &[f64],
    theta: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = data.n_rows();
    let p = data.n_covariates();
    let etas = linear_predictors(data, use_offset, intercept, coefficients);
    let mut xtwx = DMatrix::zeros(p + 1, p + 1);
    let mut xtwz = DVector::zeros(p + 1);
    let mut xrow = alloc::vec![0.0; p + 1];
    for k in 0..n {
        let row = &data.rows[k];
        let mu = libm::exp(etas[k]);
        // Fisher weight mu^2 / Var(y) for the log link.
        let w = mu * theta / (theta + mu);
        let off = if use_offset { libm::log(row.offset) } else { 0.0 };
        let z = (etas[k] - off) + (row.count as f64 - mu) / mu;
        xrow[0] = 1.0;
        xrow[1..].copy_from_slice(&row.covariates);
        for a in 0..=p {
            xtwz[a] += w * xrow[a] * z;
            for b in a..=p {
                xtwx[(a, b)] += w * xrow[a] * xrow[b];
            }
        }
    }
    for a in 0..=p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let beta = solve_irls(data, &xtwx, &xtwz)?;
    Ok((beta[0], beta.as_slice()[1..].to_vec()))
}

/// Profile score and curvature of the log-likelihood in `theta`.
fn theta_score_info(data: &PanelDataset, mus: &[f64], theta: f64) -> (f64, f64) {
    let mut score = 0.0;
    let mut info = 0.0;
    let dig_t = digamma(theta);
    let trig_t = trigamma(theta);
    let log_t = libm::log(theta);
    for (row, &mu) in data.rows.iter().zip(mus) {
        let yf = row.count as f64;
        score += digamma(yf + theta) - dig_t + log_t + 1.0
            - libm::log(theta + mu)
            - (yf + theta) / (theta + mu);
        info += trigamma(yf + theta) - trig_t + 1.0 / theta - 2.0 / (theta + mu)
            + (yf + theta) / ((theta + mu) * (theta + mu));
    }
    (score, info)
}

/// Newton steps for `theta` on the log scale, keeping it in
/// `[theta_floor, THETA_CAP]`.
fn update_theta(
    data: &PanelDataset,
    mus: &[f64],
    mut theta: f64,
    theta_floor: f64,
    max_steps: u32,
) -> f64 {
    for _ in 0..max_steps {
        let (score, info) = theta_score_info(data, mus, theta);
        // On u = log(theta): f' = theta * score, f'' = theta^2 * info + theta * score.
        let grad_u = theta * score;
        let hess_u = theta * theta * info + grad_u;
        let mut step = if hess_u < 0.0 {
            -grad_u / hess_u
        } else {
            // Not locally concave; move along the score direction.
            0.5 * grad_u.signum()
        };
        step = step.clamp(-2.0, 2.0);
        let new_theta = (theta * libm::exp(step)).clamp(theta_floor, THETA_CAP);
        if libm::fabs(libm::log(new_theta / theta)) < 1e-10 {
            theta = new_theta;
            break;
        }
        theta = new_theta;
        if theta >= THETA_CAP || theta <= theta_floor {
            break;
        }
    }
    theta
}

/// Maximum-likelihood NB2 fit.
///
/// Alternates IRLS for the coefficients with Newton updates of `theta`
/// until the relative log-likelihood change drops below `1e-8`, up to 100
/// outer rounds. Needs at least `p + 2` rows for `p` covariates; constant
/// and aliased covariates are rejected with the column named.
pub fn fit_nb_glm(data: &PanelDataset, use_offset: bool) -> Result<NbFit> {
    let p = data.n_covariates();
    if data.n_rows() < p + 2 {
        return Err(Error::invalid(format_args!(
            "need at least {} rows to fit {} covariates, got {}",
            p + 2,
            p,
            data.n_rows()
        )));
    }
    check_covariate_variance(data)?;

    // Start from the saturated-ish response on the link scale.
    let mut intercept = {
        let n = data.n_rows() as f64;
        data.rows
            .iter()
            .map(|r| {
                let off = if use_offset { r.offset } else { 1.0 };
                libm::log((r.count as f64 + 0.5) / off)
            })
            .sum::<f64>()
            / n
    };
    let mut coefficients = alloc::vec![0.0; p];
    let mut theta = 1.0;
    let mut ll = nb_log_likelihood(data, use_offset, intercept, &coefficients, theta);
    let mut converged = false;
    let mut iterations = 0;

    for outer in 1..=100 {
        iterations = outer;
        // Coefficients at fixed theta: a few IRLS passes.
        for _ in 0..25 {
            let (b0, b) = irls_update(data, use_offset, intercept, &coefficients, theta)?;
            let delta = libm::fabs(b0 - intercept).max(
                b.iter()
                    .zip(&coefficients)
                    .map(|(new, old)| libm::fabs(new - old))
                    .fold(0.0, f64::max),
            );
            intercept = b0;
            coefficients = b;
            if delta < 1e-10 {
                break;
            }
        }
        // Dispersion at fixed coefficients.
        let mus: Vec<f64> =
            linear_predictors(data, use_offset, intercept, &coefficients)
                .iter()
                .map(|&eta| libm::exp(eta))
                .collect();
        theta = update_theta(data, &mus, theta, 1e-8, 10);

        let new_ll = nb_log_likelihood(data, use_offset, intercept, &coefficients, theta);
        if !new_ll.is_finite() {
            return Err(Error::numerical(
                "log-likelihood became non-finite during fitting",
            ));
        }
        let rel = libm::fabs(new_ll - ll) / (libm::fabs(new_ll) + 1e-10);
        ll = new_ll;
        if rel < 1e-8 {
            converged = true;
            break;
        }
    }

    Ok(NbFit {
        intercept,
        coefficients,
        dispersion_theta: theta,
        log_likelihood: ll,
        converged,
        iterations,
        poisson_limit: theta >= THETA_CAP,
    })
}

// ---------------------------------------------------------------------------
// Covariate preparation
// ---------------------------------------------------------------------------

/// Log-transform flagged covariates and standardise all of them.
///
/// Covariates with `transform_log` set become `log(x + log_shift)`; a
/// negative value under a log flag is rejected, as is `x + log_shift == 0`.
/// Every covariate is then centred and scaled to unit (population) standard
/// deviation. The transform metadata is stored on the result so
/// [`back_transform`] can undo it exactly.
pub fn prepare_covariates(data: &PanelDataset, log_shift: f64) -> Result<PanelDataset> {
    if data.transform.is_some() {
        return Err(Error::invalid("covariates are already prepared"));
    }
    if !(log_shift >= 0.0) || !log_shift.is_finite() {
        return Err(Error::invalid(format_args!(
            "log shift must be finite and non-negative, got {log_shift}"
        )));
    }
    let n = data.n_rows() as f64;
    let p = data.n_covariates();
    let mut rows = data.rows.clone();

    for j in 0..p {
        if !data.transform_log[j] {
            continue;
        }
        for row in rows.iter_mut() {
            let x = row.covariates[j];
            if x < 0.0 {
                return Err(Error::invalid(format_args!(
                    "covariate {:?} has a negative value ({x}) under a log transform",
                    data.covariate_names[j]
                )));
            }
            if x + log_shift <= 0.0 {
                return Err(Error::invalid(format_args!(
                    "covariate {:?} has value {x} with log shift {log_shift}; log is undefined",
                    data.covariate_names[j]
                )));
            }
            row.covariates[j] = libm::log(x + log_shift);
        }
    }

    let mut scales = Vec::with_capacity(p);
    for j in 0..p {
        let mean = rows.iter().map(|r| r.covariates[j]).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|r| {
                let d = r.covariates[j] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        if var == 0.0 {
            return Err(Error::invalid(format_args!(
                "covariate {:?} is constant; it cannot be standardised",
                data.covariate_names[j]
            )));
        }
        let sd = libm::sqrt(var);
        for row in rows.iter_mut() {
            row.covariates[j] = (row.covariates[j] - mean) / sd;
        }
        scales.push(CovariateScale { mean, sd });
    }

    Ok(PanelDataset {
        rows,
        covariate_names: data.covariate_names.clone(),
        transform_log: data.transform_log.clone(),
        transform: Some(PanelTransform { log_shift, scales }),
    })
}

/// Undo [`prepare_covariates`], recovering the raw covariates.
pub fn back_transform(data: &PanelDataset) -> Result<PanelDataset> {
    let transform = data
        .transform
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no transform to undo"))?;
    let mut rows = data.rows.clone();
    for j in 0..data.n_covariates() {
        let CovariateScale { mean, sd } = transform.scales[j];
        for row in rows.iter_mut() {
            let mut x = row.covariates[j] * sd + mean;
            if data.transform_log[j] {
                x = libm::exp(x) - transform.log_shift;
            }
            row.covariates[j] = x;
        }
    }
    Ok(PanelDataset {
        rows,
        covariate_names: data.covariate_names.clone(),
        transform_log: data.transform_log.clone(),
        transform: None,
    })
}
