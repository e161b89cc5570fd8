//! L1-penalised negative binomial regression paths.
//!
//! The penalised objective (to maximise) is
//!
//! ```text
//! Q(b0, b) = loglik(b0, b, theta) - lambda * sum_j |b_j|
//! ```
//!
//! with the intercept unpenalised. Covariates are standardised internally
//! (mean 0, unit sd); reported paths live on that internal scale and
//! [`select_features`] maps back to the scale of the input data.
//!
//! The solver follows the usual GLM-LASSO recipe: at each `lambda`, build
//! the quadratic local approximation of the log-likelihood (IRLS weights and
//! working response), run cyclic coordinate descent with soft-thresholding
//! on the surrogate, and re-approximate until the penalised objective is
//! stable. A step-halving line search keeps the objective monotone across
//! sweeps. Solutions are warm-started from the previous grid point, and the
//! dispersion `theta` is re-estimated once per `lambda` by Newton steps on
//! the profile likelihood, capped to `[1e-3, 1e6]`.
//!
//! The default grid has 100 points, log-spaced from `lambda_max` (the
//! smallest penalty that zeroes every slope) down to `1e-3 * lambda_max`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{
    check_covariate_variance, fit_nb_glm, update_theta, CovariateScale, PanelDataset, PanelRow,
};
use crate::rngutil::stream_rng;
use crate::{Error, Result};

/// Default number of grid points.
pub const DEFAULT_N_LAMBDA: usize = 100;
/// Default ratio of the smallest to the largest penalty on the grid.
pub const DEFAULT_LAMBDA_MIN_RATIO: f64 = 1e-3;
/// Dispersion bounds used inside the path solver.
const LASSO_THETA_FLOOR: f64 = 1e-3;
const LASSO_THETA_CAP: f64 = 1e6;

/// Penalty selection policy on a cross-validation curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaRule {
    /// The `lambda` with the smallest mean held-out deviance.
    Min,
    /// The largest `lambda` whose mean held-out deviance is within one
    /// standard error of the minimum.
    OneSe,
}

/// Cross-validation curves attached to a [`LassoPath`].
///
/// The loss is the held-out NB deviance on the predictive-log-likelihood
/// scale, `-2 * loglik(y; mu, theta)` per observation. Because `theta` is
/// re-estimated along the path, the saturated-model term of the textbook
/// deviance would shift with `theta` and make grid points incomparable;
/// dropping it (a constant within any fixed `theta`) turns the loss into a
/// proper scoring rule that compares cleanly across the whole path.
#[derive(Debug, Clone, PartialEq)]
pub struct CvCurves {
    /// Per-lambda mean of the fold-average held-out deviance.
    pub mean_deviance: Vec<f64>,
    /// Per-lambda standard error over folds.
    pub se_deviance: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_1se: f64,
    pub n_folds: usize,
    pub seed: u64,
}

impl CvCurves {
    pub fn selected(&self, rule: LambdaRule) -> f64 {
        match rule {
            LambdaRule::Min => self.lambda_min,
            LambdaRule::OneSe => self.lambda_1se,
        }
    }
}

/// A fitted regularisation path on the internal standardised design.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    /// Strictly decreasing penalty grid.
    pub lambdas: Vec<f64>,
    /// Intercept per grid point (standardised design scale).
    pub intercepts: Vec<f64>,
    /// Slopes per grid point, one entry per covariate.
    pub coefficients: Vec<Vec<f64>>,
    /// Dispersion per grid point.
    pub thetas: Vec<f64>,
    /// Unpenalised log-likelihood of each solution.
    pub log_likelihoods: Vec<f64>,
    /// Internal standardisation (per covariate) applied to the design.
    pub scales: Vec<CovariateScale>,
    /// Cross-validation curves, present after [`cv_select_lambda`].
    pub cv: Option<CvCurves>,
}

impl LassoPath {
    /// Index of a grid value (they are compared exactly; grid values are
    /// carried around verbatim).
    fn index_of(&self, lambda: f64) -> Option<usize> {
        self.lambdas.iter().position(|&l| l == lambda)
    }

    /// Map a grid point's solution back to the covariate scale of the
    /// input dataset: `b_j = b_j_std / sd_j`, with the intercept shifted
    /// accordingly.
    pub fn solution_on_data_scale(&self, index: usize) -> (f64, Vec<f64>) {
        let b_std = &self.coefficients[index];
        let mut intercept = self.intercepts[index];
        let mut coefs = Vec::with_capacity(b_std.len());
        for (b, scale) in b_std.iter().zip(&self.scales) {
            let c = b / scale.sd;
            intercept -= c * scale.mean;
            coefs.push(c);
        }
        (intercept, coefs)
    }
}

/// One retained covariate after selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFeature {
    pub name: String,
    /// Slope on the scale of the covariates as passed in (destandardised).
    pub coefficient: f64,
    /// Slope on the internal standardised scale (comparable across
    /// covariates).
    pub coefficient_standardized: f64,
}

/// Outcome of [`select_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFeatures {
    pub rule: LambdaRule,
    pub lambda: f64,
    /// Intercept on the data scale.
    pub intercept: f64,
    pub theta: f64,
    /// Non-zero covariates in input order.
    pub features: Vec<SelectedFeature>,
}

// ---------------------------------------------------------------------------
// Standardised design
// ---------------------------------------------------------------------------

struct StdDesign {
    /// Row-major standardised covariates.
    x: Vec<Vec<f64>>,
    scales: Vec<CovariateScale>,
}

fn standardise(data: &PanelDataset) -> Result<StdDesign> {
    check_covariate_variance(data)?;
    let n = data.n_rows() as f64;
    let p = data.n_covariates();
    let mut scales = Vec::with_capacity(p);
    for j in 0..p {
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
        scales.push(CovariateScale {
            mean,
            sd: libm::sqrt(var),
        });
    }
    let x = data
        .rows
        .iter()
        .map(|r| {
            r.covariates
                .iter()
                .zip(&scales)
                .map(|(v, s)| (v - s.mean) / s.sd)
                .collect()
        })
        .collect();
    Ok(StdDesign { x, scales })
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct LassoState {
    intercept: f64,
    coefs: Vec<f64>,
    theta: f64,
}

#[inline]
fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

fn std_log_likelihood(
    data: &PanelDataset,
    design: &StdDesign,
    use_offset: bool,
    state: &LassoState,
) -> f64 {
    let mut acc = 0.0;
    for (row, x) in data.rows.iter().zip(&design.x) {
        let mut eta = state.intercept;
        for (v, b) in x.iter().zip(&state.coefs) {
            eta += v * b;
        }
        if use_offset {
            eta += libm::log(row.offset);
        }
        acc += super::nb_ll_term(row.count, libm::exp(super::eta_clamp(eta)), state.theta);
    }
    acc
}

fn penalised_objective(
    data: &PanelDataset,
    design: &StdDesign,
    use_offset: bool,
    state: &LassoState,
    lambda: f64,
) -> f64 {
    let l1: f64 = state.coefs.iter().map(|b| libm::fabs(*b)).sum();
    std_log_likelihood(data, design, use_offset, state) - lambda * l1
}

/// Solve for one `lambda` from a warm start. Returns the new state and the
/// trace of the penalised objective across approximation sweeps (the trace
/// is non-decreasing; the line search enforces it).
fn fit_at_lambda(
    data: &PanelDataset,
    design: &StdDesign,
    use_offset: bool,
    warm: &LassoState,
    lambda: f64,
) -> Result<(LassoState, Vec<f64>)> {
    let n = data.n_rows();
    let p = data.n_covariates();
    let mut state = warm.clone();
    let mut objective = penalised_objective(data, design, use_offset, &state, lambda);
    if !objective.is_finite() {
        return Err(Error::numerical(
            "penalised objective is not finite at the warm start",
        ));
    }
    let mut trace = alloc::vec![objective];

    for _ in 0..60 {
        // Quadratic local approximation at the current state.
        let mut w = alloc::vec![0.0; n];
        let mut z = alloc::vec![0.0; n];
        for (k, (row, x)) in data.rows.iter().zip(&design.x).enumerate() {
            let mut eta = state.intercept;
            for (v, b) in x.iter().zip(&state.coefs) {
                eta += v * b;
            }
            let off = if use_offset { libm::log(row.offset) } else { 0.0 };
            let mu = libm::exp(super::eta_clamp(eta + off));
            w[k] = mu * state.theta / (state.theta + mu);
            z[k] = eta + (row.count as f64 - mu) / mu;
        }
        let w_sum: f64 = w.iter().sum();
        let mut wx2 = alloc::vec![0.0; p];
        for (k, x) in design.x.iter().enumerate() {
            for (j, v) in x.iter().enumerate() {
                wx2[j] += w[k] * v * v;
            }
        }

        // Cyclic coordinate descent on the surrogate.
        let mut cand = state.clone();
        let mut resid: Vec<f64> = (0..n)
            .map(|k| {
                let mut eta = cand.intercept;
                for (v, b) in design.x[k].iter().zip(&cand.coefs) {
                    eta += v * b;
                }
                z[k] - eta
            })
            .collect();
        for _sweep in 0..200 {
            let mut max_delta = 0.0f64;
            // Intercept (unpenalised).
            let shift: f64 =
                resid.iter().zip(&w).map(|(r, wk)| wk * r).sum::<f64>() / w_sum;
            cand.intercept += shift;
            for r in resid.iter_mut() {
                *r -= shift;
            }
            max_delta = max_delta.max(libm::fabs(shift));
            for j in 0..p {
                let old = cand.coefs[j];
                let mut inner = 0.0;
                for k in 0..n {
                    inner += w[k] * design.x[k][j] * resid[k];
                }
                inner += wx2[j] * old;
                let new = soft_threshold(inner, lambda) / wx2[j];
                if new != old {
                    let delta = new - old;
                    for k in 0..n {
                        resid[k] -= delta * design.x[k][j];
                    }
                    cand.coefs[j] = new;
                    max_delta = max_delta.max(libm::fabs(delta));
                }
            }
            if max_delta < 1e-11 {
                break;
            }
        }

        if cand.coefs.iter().any(|b| libm::fabs(*b) > 50.0) {
            return Err(Error::numerical(
                "coefficients diverged on the standardised scale; the penalised likelihood has no finite optimum (quasi-separation)",
            ));
        }

        // Exact objective, with step halving back towards the current state
        // if the surrogate overshoots. This keeps the objective trace
        // monotone across sweeps.
        let mut accepted = cand.clone();
        let mut new_objective =
            penalised_objective(data, design, use_offset, &accepted, lambda);
        let mut t = 1.0;
        let mut halvings = 0;
        while (!new_objective.is_finite() || new_objective < objective) && halvings < 30 {
            t *= 0.5;
            accepted.intercept = state.intercept + t * (cand.intercept - state.intercept);
            for j in 0..p {
                accepted.coefs[j] = state.coefs[j] + t * (cand.coefs[j] - state.coefs[j]);
            }
            new_objective = penalised_objective(data, design, use_offset, &accepted, lambda);
            halvings += 1;
        }
        if !new_objective.is_finite() || new_objective < objective {
            // No uphill point found along the segment; keep the old state.
            trace.push(objective);
            break;
        }
        debug_assert!(new_objective >= objective - 1e-9 * (1.0 + libm::fabs(objective)));
        let gain = new_objective - objective;
        state = accepted;
        objective = new_objective;
        trace.push(objective);
        if gain <= 1e-9 * (1.0 + libm::fabs(objective)) {
            break;
        }
    }
    // Interpolated line-search steps can leave sub-epsilon residue on
    // coefficients the soft threshold had zeroed; snap them so the reported
    // support is exact. The objective change is far below solver tolerance.
    for b in state.coefs.iter_mut() {
        if libm::fabs(*b) < 1e-9 {
            *b = 0.0;
        }
    }
    Ok((state, trace))
}

/// Strip covariates for the intercept-only reference fit.
fn intercept_only(data: &PanelDataset) -> PanelDataset {
    let rows = data
        .rows
        .iter()
        .map(|r| PanelRow {
            region_index: r.region_index,
            year_index: r.year_index,
            count: r.count,
            offset: r.offset,
            covariates: Vec::new(),
        })
        .collect();
    PanelDataset {
        rows,
        covariate_names: Vec::new(),
        transform_log: Vec::new(),
        transform: None,
    }
}

fn validate_grid(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    for pair in lambdas.windows(2) {
        if !(pair[1] < pair[0]) {
            return Err(Error::invalid(
                "lambda grid must be strictly decreasing",
            ));
        }
    }
    if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::invalid("lambda values must be finite and non-negative"));
    }
    Ok(())
}

/// Fit the regularisation path.
///
/// With `lambdas == None` the grid is derived from the data: `lambda_max`
/// is the largest absolute score component at the intercept-only fit (the
/// smallest penalty with an all-zero slope solution), and the grid descends
/// log-linearly over three decades in 100 steps.
pub fn lasso_nb_path(
    data: &PanelDataset,
    use_offset: bool,
    lambdas: Option<&[f64]>,
) -> Result<LassoPath> {
    let p = data.n_covariates();
    if p == 0 {
        return Err(Error::invalid("the LASSO needs at least one covariate"));
    }
    if data.n_rows() < p + 2 {
        return Err(Error::invalid(format_args!(
            "need at least {} rows to fit {} covariates, got {}",
            p + 2,
            p,
            data.n_rows()
        )));
    }
    let design = standardise(data)?;

    // Intercept-only reference: starting point and lambda_max.
    let null_fit = fit_nb_glm(&intercept_only(data), use_offset)?;
    let theta0 = null_fit
        .dispersion_theta
        .clamp(LASSO_THETA_FLOOR, LASSO_THETA_CAP);
    let mut score_max = 0.0f64;
    {
        let mut u = alloc::vec![0.0; data.n_rows()];
        for (k, row) in data.rows.iter().enumerate() {
            let off = if use_offset { libm::log(row.offset) } else { 0.0 };
            let mu = libm::exp(super::eta_clamp(null_fit.intercept + off));
            u[k] = theta0 * (row.count as f64 - mu) / (theta0 + mu);
        }
        for j in 0..p {
            let s: f64 = (0..data.n_rows())
                .map(|k| u[k] * design.x[k][j])
                .sum();
            score_max = score_max.max(libm::fabs(s));
        }
    }

    let grid: Vec<f64> = match lambdas {
        Some(ls) => {
            validate_grid(ls)?;
            ls.to_vec()
        }
        None => {
            if !(score_max > 0.0) || !score_max.is_finite() {
                return Err(Error::numerical(
                    "could not derive a penalty grid: the null-model score is degenerate",
                ));
            }
            let hi = libm::log(score_max);
            let lo = libm::log(score_max * DEFAULT_LAMBDA_MIN_RATIO);
            (0..DEFAULT_N_LAMBDA)
                .map(|k| {
                    let f = k as f64 / (DEFAULT_N_LAMBDA - 1) as f64;
                    libm::exp(hi + f * (lo - hi))
                })
                .collect()
        }
    };

    let mut state = LassoState {
        intercept: null_fit.intercept,
        coefs: alloc::vec![0.0; p],
        theta: theta0,
    };
    let mut intercepts = Vec::with_capacity(grid.len());
    let mut coefficients = Vec::with_capacity(grid.len());
    let mut thetas = Vec::with_capacity(grid.len());
    let mut log_likelihoods = Vec::with_capacity(grid.len());

    for &lambda in &grid {
        let (next, _trace) = fit_at_lambda(data, &design, use_offset, &state, lambda)?;
        state = next;
        // One profile-likelihood dispersion update per grid point.
        let mus: Vec<f64> = data
            .rows
            .iter()
            .zip(&design.x)
            .map(|(row, x)| {
                let mut eta = state.intercept;
                for (v, b) in x.iter().zip(&state.coefs) {
                    eta += v * b;
                }
                if use_offset {
                    eta += libm::log(row.offset);
                }
                libm::exp(super::eta_clamp(eta))
            })
            .collect();
        state.theta = update_theta(data, &mus, state.theta, LASSO_THETA_FLOOR, 8)
            .clamp(LASSO_THETA_FLOOR, LASSO_THETA_CAP);

        intercepts.push(state.intercept);
        coefficients.push(state.coefs.clone());
        thetas.push(state.theta);
        log_likelihoods.push(std_log_likelihood(data, &design, use_offset, &state));
    }

    Ok(LassoPath {
        lambdas: grid,
        intercepts,
        coefficients,
        thetas,
        log_likelihoods,
        scales: design.scales,
        cv: None,
    })
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// Region-stratified fold assignment: rows are grouped by region, shuffled
/// within each group with a seeded RNG, and dealt round-robin onto folds so
/// every region's observations spread over as many folds as it has rows.
/// Returns the fold index of each row.
pub(crate) fn stratified_folds(data: &PanelDataset, n_folds: usize, seed: u64) -> Vec<usize> {
    let mut by_region: alloc::collections::BTreeMap<usize, Vec<usize>> =
        alloc::collections::BTreeMap::new();
    for (k, row) in data.rows.iter().enumerate() {
        by_region.entry(row.region_index).or_default().push(k);
    }
    let mut fold_of = alloc::vec![0usize; data.n_rows()];
    let mut rng = stream_rng(seed, 0);
    let mut counter = 0usize;
    for (_region, mut rows) in by_region {
        rows.shuffle(&mut rng);
        for k in rows {
            fold_of[k] = counter % n_folds;
            counter += 1;
        }
    }
    fold_of
}

fn subset_rows(data: &PanelDataset, keep: impl Fn(usize) -> bool) -> PanelDataset {
    let rows = data
        .rows
        .iter()
        .enumerate()
        .filter(|(k, _)| keep(*k))
        .map(|(_, r)| r.clone())
        .collect();
    PanelDataset {
        rows,
        covariate_names: data.covariate_names.clone(),
        transform_log: data.transform_log.clone(),
        transform: data.transform.clone(),
    }
}

/// Cross-validate the path and attach the deviance curves.
///
/// Runs `n_folds`-fold cross-validation (folds in `[3, n_rows]`) with
/// region-stratified assignments derived from `seed`. The returned path is
/// fitted on the full data over a common grid; its [`LassoPath::cv`] holds
/// the per-lambda mean and standard error of the fold-average held-out NB
/// deviance plus the `lambda_min` / `lambda_1se` selections.
pub fn cv_select_lambda(
    data: &PanelDataset,
    use_offset: bool,
    n_folds: usize,
    seed: u64,
    lambdas: Option<&[f64]>,
) -> Result<LassoPath> {
    if n_folds < 3 || n_folds > data.n_rows() {
        return Err(Error::invalid(format_args!(
            "n_folds must lie in [3, {}], got {n_folds}",
            data.n_rows()
        )));
    }
    let mut path = lasso_nb_path(data, use_offset, lambdas)?;
    let grid = path.lambdas.clone();
    let fold_of = stratified_folds(data, n_folds, seed);

    // fold_means[f][l]: mean held-out unit deviance of fold f at grid point l.
    let mut fold_means = alloc::vec![alloc::vec![0.0f64; grid.len()]; n_folds];
    for fold in 0..n_folds {
        let train = subset_rows(data, |k| fold_of[k] != fold);
        let valid = subset_rows(data, |k| fold_of[k] == fold);
        if valid.rows.is_empty() || train.rows.is_empty() {
            return Err(Error::invalid(format_args!(
                "fold {fold} is empty; use fewer folds"
            )));
        }
        let fold_path = lasso_nb_path(&train, use_offset, Some(&grid))?;
        for (l, _) in grid.iter().enumerate() {
            let (b0, coefs) = fold_path.solution_on_data_scale(l);
            let theta = fold_path.thetas[l];
            let mut dev = 0.0;
            for row in &valid.rows {
                let mut eta = b0;
                for (x, b) in row.covariates.iter().zip(&coefs) {
                    eta += x * b;
                }
                if use_offset {
                    eta += libm::log(row.offset);
                }
                dev += -2.0 * super::nb_ll_term(row.count, libm::exp(super::eta_clamp(eta)), theta);
            }
            fold_means[fold][l] = dev / valid.rows.len() as f64;
        }
    }

    let mut mean_deviance = alloc::vec![0.0; grid.len()];
    let mut se_deviance = alloc::vec![0.0; grid.len()];
    for l in 0..grid.len() {
        let mean: f64 =
            (0..n_folds).map(|f| fold_means[f][l]).sum::<f64>() / n_folds as f64;
        let var: f64 = (0..n_folds)
            .map(|f| {
                let d = fold_means[f][l] - mean;
                d * d
            })
            .sum::<f64>()
            / (n_folds as f64 - 1.0);
        mean_deviance[l] = mean;
        se_deviance[l] = libm::sqrt(var / n_folds as f64);
    }

    let (idx_min, _) = select_lambda_from_curve(&grid, &mean_deviance, &se_deviance, LambdaRule::Min)?;
    let (idx_1se, _) =
        select_lambda_from_curve(&grid, &mean_deviance, &se_deviance, LambdaRule::OneSe)?;
    path.cv = Some(CvCurves {
        mean_deviance,
        se_deviance,
        lambda_min: grid[idx_min],
        lambda_1se: grid[idx_1se],
        n_folds,
        seed,
    });
    Ok(path)
}

/// Apply a [`LambdaRule`] to a CV curve over a strictly decreasing grid.
///
/// `Min` picks the smallest mean deviance (ties resolve to the larger,
/// sparser `lambda`). `OneSe` picks the largest `lambda` whose mean
/// deviance is at most `min mean + its standard error`. Returns
/// `(index, lambda)`.
pub fn select_lambda_from_curve(
    lambdas: &[f64],
    mean_deviance: &[f64],
    se_deviance: &[f64],
    rule: LambdaRule,
) -> Result<(usize, f64)> {
    validate_grid(lambdas)?;
    if mean_deviance.len() != lambdas.len() || se_deviance.len() != lambdas.len() {
        return Err(Error::invalid(
            "curve vectors must have one entry per lambda",
        ));
    }
    if mean_deviance.iter().chain(se_deviance).any(|v| !v.is_finite()) {
        return Err(Error::invalid("curve values must be finite"));
    }
    // Largest lambda attaining the minimum (grid is descending).
    let mut idx_min = 0;
    for (l, &m) in mean_deviance.iter().enumerate() {
        if m < mean_deviance[idx_min] {
            idx_min = l;
        }
    }
    match rule {
        LambdaRule::Min => Ok((idx_min, lambdas[idx_min])),
        LambdaRule::OneSe => {
            let threshold = mean_deviance[idx_min] + se_deviance[idx_min];
            for (l, &m) in mean_deviance.iter().enumerate() {
                if m <= threshold {
                    return Ok((l, lambdas[l]));
                }
            }
            // The minimum itself always satisfies the bound.
            Ok((idx_min, lambdas[idx_min]))
        }
    }
}

/// Read off the non-zero covariates at the `lambda` selected by `rule`.
///
/// The path must carry CV curves (see [`cv_select_lambda`]). Coefficients
/// are reported both on the internal standardised scale and destandardised
/// to the scale of the covariates that were passed in.
pub fn select_features(path: &LassoPath, rule: LambdaRule, names: &[String]) -> Result<SelectedFeatures> {
    let cv = path.cv.as_ref().ok_or_else(|| {
        Error::invalid("path has no cross-validation curves; run cv_select_lambda first")
    })?;
    if names.len() != path.scales.len() {
        return Err(Error::invalid(format_args!(
            "expected {} covariate names, got {}",
            path.scales.len(),
            names.len()
        )));
    }
    let lambda = cv.selected(rule);
    let index = path
        .index_of(lambda)
        .ok_or_else(|| Error::invalid("selected lambda is not on the grid"))?;
    let (intercept, coefs) = path.solution_on_data_scale(index);
    let features = names
        .iter()
        .enumerate()
        .filter(|(j, _)| path.coefficients[index][*j] != 0.0)
        .map(|(j, name)| SelectedFeature {
            name: name.clone(),
            coefficient: coefs[j],
            coefficient_standardized: path.coefficients[index][j],
        })
        .collect();
    Ok(SelectedFeatures {
        rule,
        lambda,
        intercept,
        theta: path.thetas[index],
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::simulate_panel;
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lambda_max_zeroes_every_slope() {
        let data = simulate_panel(300, -6.0, &[0.5, -0.4, 0.0], 2.0, 2);
        let path = lasso_nb_path(&data, true, None).unwrap();
        assert_eq!(path.lambdas.len(), DEFAULT_N_LAMBDA);
        assert!(path.coefficients[0].iter().all(|&b| b == 0.0));
        // Further down the grid something activates.
        assert!(path.coefficients[DEFAULT_N_LAMBDA - 1]
            .iter()
            .any(|&b| b != 0.0));
    }

    #[test]
    fn tiny_lambda_matches_unpenalised_mle() {
        let data = simulate_panel(400, -6.0, &[0.6, -0.5], 2.5, 4);
        let mle = fit_nb_glm(&data, true).unwrap();
        // Extend the grid down to a negligible penalty.
        let path0 = lasso_nb_path(&data, true, None).unwrap();
        let lmax = path0.lambdas[0];
        let grid: Vec<f64> = (0..40)
            .map(|k| lmax * libm::pow(10.0, -(k as f64) * 7.0 / 39.0))
            .collect();
        let path = lasso_nb_path(&data, true, Some(&grid)).unwrap();
        let (b0, coefs) = path.solution_on_data_scale(grid.len() - 1);
        assert_abs_diff_eq!(
            b0,
            mle.intercept,
            epsilon = 1e-4 * mle.intercept.abs().max(1.0)
        );
        for (a, b) in coefs.iter().zip(&mle.coefficients) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let data = simulate_panel(200, -6.0, &[0.7, -0.3], 2.0, 8);
        let design = standardise(&data).unwrap();
        let null = fit_nb_glm(&intercept_only(&data), true).unwrap();
        let warm = LassoState {
            intercept: null.intercept,
            coefs: vec![0.0; 2],
            theta: null.dispersion_theta.clamp(1e-3, 1e6),
        };
        let path = lasso_nb_path(&data, true, None).unwrap();
        for &lambda in &[path.lambdas[10], path.lambdas[60], path.lambdas[99]] {
            let (_state, trace) = fit_at_lambda(&data, &design, true, &warm, lambda).unwrap();
            for pair in trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-8 * (1.0 + libm::fabs(pair[0])),
                    "objective decreased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn hand_curve_selection() {
        let lambdas = [4.0, 3.0, 2.0, 1.0];
        let mean = [10.0, 8.0, 7.0, 7.5];
        let se = [0.6; 4];
        let (idx, l) =
            select_lambda_from_curve(&lambdas, &mean, &se, LambdaRule::Min).unwrap();
        assert_eq!((idx, l), (2, 2.0));
        // One-SE threshold is 7.6; the largest lambda at or under it is 2
        // (the mean at lambda = 3 is 8.0, above the threshold).
        let (idx, l) =
            select_lambda_from_curve(&lambdas, &mean, &se, LambdaRule::OneSe).unwrap();
        assert_eq!((idx, l), (2, 2.0));
        // With a wider SE at the minimum, lambda = 3 comes within reach.
        let se_wide = [1.2; 4];
        let (idx, l) =
            select_lambda_from_curve(&lambdas, &mean, &se_wide, LambdaRule::OneSe).unwrap();
        assert_eq!((idx, l), (1, 3.0));
    }

    #[test]
    fn curve_validation() {
        let asc = [1.0, 2.0];
        assert!(select_lambda_from_curve(&asc, &[1.0, 1.0], &[0.0, 0.0], LambdaRule::Min)
            .is_err());
        let desc = [2.0, 1.0];
        assert!(
            select_lambda_from_curve(&desc, &[1.0], &[0.0, 0.0], LambdaRule::Min).is_err()
        );
    }

    #[test]
    fn stratified_folds_cover_regions() {
        // Panel: 12 regions x 8 years.
        let mut rows = Vec::new();
        for i in 0..12 {
            for t in 0..8 {
                rows.push(super::super::PanelRow {
                    region_index: i,
                    year_index: t,
                    count: 1,
                    offset: 1.0,
                    covariates: vec![(i + t) as f64],
                });
            }
        }
        let data = PanelDataset::new(rows, vec!["x".to_string()], vec![false]).unwrap();
        let folds = stratified_folds(&data, 4, 9);
        assert_eq!(folds, stratified_folds(&data, 4, 9));
        // Every region appears in at least two folds (8 rows >= 2 folds),
        // hence never only in a validation fold.
        for i in 0..12 {
            let mut seen = alloc::collections::BTreeSet::new();
            for (k, row) in data.rows.iter().enumerate() {
                if row.region_index == i {
                    seen.insert(folds[k]);
                }
            }
            assert!(seen.len() >= 2, "region {i} concentrated in one fold");
        }
        // Balanced fold sizes.
        for f in 0..4 {
            let size = folds.iter().filter(|&&x| x == f).count();
            assert_eq!(size, 24);
        }
    }

    #[test]
    fn cv_selects_and_recovers_planted_support() {
        // One real signal among 6 noise covariates; mean counts around 2
        // so the held-out deviance actually discriminates.
        let data = simulate_panel(500, -4.0, &[0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2.0, 31);
        let path = cv_select_lambda(&data, true, 5, 77, None).unwrap();
        let cv = path.cv.as_ref().unwrap();
        assert!(cv.lambda_1se >= cv.lambda_min);
        let names: Vec<String> = (1..=7).map(|j| alloc::format!("x{j}")).collect();
        let chosen = select_features(&path, LambdaRule::OneSe, &names).unwrap();
        assert!(
            chosen.features.iter().any(|f| f.name == "x1"),
            "signal covariate not selected: {:?}",
            chosen.features
        );
        // The 1-SE support is a subset of the min-lambda support.
        let at_min = select_features(&path, LambdaRule::Min, &names).unwrap();
        for f in &chosen.features {
            assert!(at_min.features.iter().any(|g| g.name == f.name));
        }
        // Determinism.
        let path2 = cv_select_lambda(&data, true, 5, 77, None).unwrap();
        assert_eq!(path.cv, path2.cv);
    }

    #[test]
    fn select_features_requires_cv() {
        let data = simulate_panel(200, -6.0, &[0.5], 2.0, 3);
        let path = lasso_nb_path(&data, true, None).unwrap();
        assert!(select_features(&path, LambdaRule::Min, &["x1".to_string()]).is_err());
    }

    #[test]
    fn fold_count_bounds() {
        let data = simulate_panel(30, -6.0, &[0.5], 2.0, 3);
        assert!(cv_select_lambda(&data, true, 2, 1, None).is_err());
        assert!(cv_select_lambda(&data, true, 31, 1, None).is_err());
    }
}
