//! Posterior relative-risk surfaces from a fitted CAR model.
//!
//! The fitted rate of cell `(i, t)` at one posterior draw is
//! `r_it = exp(beta_0 + x_it' beta + s_i + gamma_t)` — the offset is
//! deliberately excluded, so `r_it` is a rate per unit of exposure. Two
//! normalisations are available: against the homogeneous rate
//! `sum(y) / sum(offset)` (risk relative to "events spread evenly over
//! exposure"), or against a baseline region's fitted rate in the same
//! year (risk relative to a reference area, whose own relative risk is
//! exactly 1 in every draw).

use alloc::vec::Vec;

use super::{summarize_draws, BaselineRegion, FitResult, PosteriorSummary};
use crate::glm::{eta_clamp, PanelDataset, PanelRow};
use crate::lattice::AdjacencyGraph;
use crate::{Error, Result};

/// Normalisation of the risk surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrMode {
    /// Rate divided by the homogeneous rate `sum(y) / sum(offset)`.
    VsHomogeneous,
    /// Rate divided by the baseline region's rate in the same year.
    VsBaseline,
}

/// Posterior summary of one cell's relative risk.
#[derive(Debug, Clone, PartialEq)]
pub struct RrCell {
    pub region_index: usize,
    pub year_index: usize,
    pub summary: PosteriorSummary,
}

/// Time-averaged relative risk of one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionRr {
    pub region_index: usize,
    pub mean: f64,
    pub sd: f64,
}

/// A posterior relative-risk surface over the observed panel cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeRiskSurface {
    pub mode: RrMode,
    /// Resolved baseline region index (`VsBaseline` only).
    pub baseline: Option<usize>,
    /// One cell per observed (region, year) pair, in panel order.
    pub cells: Vec<RrCell>,
    /// Per-region relative risk averaged over years (mean and sd across
    /// draws of the time average).
    pub region_means: Vec<RegionRr>,
    /// Draws dropped because the baseline rate vanished in some year.
    pub skipped_draws: usize,
}

/// Compute the relative-risk surface of a fitted model over `data`.
///
/// `data` and `graph` must be the inputs the model was fitted on (same
/// rows, regions and years). Under `VsBaseline` the baseline region comes
/// from the fitted spec; it must have an observation in every year. Draws
/// in which the baseline rate vanishes are skipped, and more than 1% of
/// them is an error.
pub fn relative_risk(
    fit: &FitResult,
    data: &PanelDataset,
    graph: &AdjacencyGraph,
    mode: RrMode,
) -> Result<RelativeRiskSurface> {
    let data = data.with_covariates(&fit.spec.covariate_names)?;
    if data.n_rows() != fit.n_rows
        || graph.n_regions() != fit.n_regions
        || data.n_years() != fit.n_years
    {
        return Err(Error::invalid(
            "panel or graph shape does not match the fitted model",
        ));
    }
    for row in &data.rows {
        if row.region_index >= fit.n_regions || row.year_index >= fit.n_years {
            return Err(Error::invalid("panel indices out of range for the fitted model"));
        }
    }
    let nd = fit.draws.beta.len();
    if nd == 0 {
        return Err(Error::invalid("fit carries no posterior draws"));
    }
    let include_s = fit.spec.include_spatial;
    let include_t = fit.spec.include_temporal;

    let rate = |row: &PanelRow, k: usize| -> f64 {
        let b = &fit.draws.beta[k];
        let mut eta = b[0];
        for (x, bj) in row.covariates.iter().zip(&b[1..]) {
            eta += x * bj;
        }
        if include_s {
            eta += fit.draws.spatial[k][row.region_index];
        }
        if include_t {
            eta += fit.draws.temporal[k][row.year_index];
        }
        libm::exp(eta_clamp(eta))
    };

    // Normalising denominators: a single homogeneous rate, or the
    // baseline region's per-year rate at every draw.
    let mut hom = 1.0;
    let mut base_rate: Vec<Vec<f64>> = Vec::new();
    let mut skip = alloc::vec![false; nd];
    let mut baseline = None;
    match mode {
        RrMode::VsHomogeneous => {
            let mut ysum = 0.0;
            let mut esum = 0.0;
            for row in &data.rows {
                ysum += row.count as f64;
                esum += if fit.spec.use_offset { row.offset } else { 1.0 };
            }
            if !(ysum > 0.0) {
                return Err(Error::undefined(
                    "relative risk against a homogeneous rate needs at least one event",
                ));
            }
            hom = ysum / esum;
        }
        RrMode::VsBaseline => {
            let b = resolve_baseline(fit, &data, graph, &rate)?;
            baseline = Some(b);
            let mut base_rows: Vec<Option<&PanelRow>> = alloc::vec![None; fit.n_years];
            for row in &data.rows {
                if row.region_index == b {
                    base_rows[row.year_index] = Some(row);
                }
            }
            base_rate = alloc::vec![alloc::vec![0.0; nd]; fit.n_years];
            for (t, slot) in base_rows.iter().enumerate() {
                let row = slot.ok_or_else(|| {
                    Error::invalid(format_args!(
                        "baseline region {:?} has no observation in year index {t}",
                        graph.region_ids()[b]
                    ))
                })?;
                for k in 0..nd {
                    let r = rate(row, k);
                    base_rate[t][k] = r;
                    if r == 0.0 {
                        skip[k] = true;
                    }
                }
            }
        }
    }
    let skipped = skip.iter().filter(|&&s| s).count();
    if skipped as f64 > 0.01 * nd as f64 {
        return Err(Error::numerical(format_args!(
            "baseline rate vanished in {skipped} of {nd} draws"
        )));
    }
    let kept: Vec<usize> = (0..nd).filter(|&k| !skip[k]).collect();

    let mut cells = Vec::with_capacity(data.n_rows());
    let mut region_sum = alloc::vec![alloc::vec![0.0; kept.len()]; fit.n_regions];
    let mut region_rows = alloc::vec![0usize; fit.n_regions];
    let mut buf = alloc::vec![0.0; kept.len()];
    for row in &data.rows {
        for (slot, &k) in buf.iter_mut().zip(&kept) {
            let denom = match mode {
                RrMode::VsHomogeneous => hom,
                RrMode::VsBaseline => base_rate[row.year_index][k],
            };
            *slot = rate(row, k) / denom;
        }
        for (acc, v) in region_sum[row.region_index].iter_mut().zip(&buf) {
            *acc += v;
        }
        region_rows[row.region_index] += 1;
        cells.push(RrCell {
            region_index: row.region_index,
            year_index: row.year_index,
            summary: summarize_draws(&buf)?,
        });
    }

    let mut region_means = Vec::with_capacity(fit.n_regions);
    for (i, sums) in region_sum.iter().enumerate() {
        if region_rows[i] == 0 {
            return Err(Error::invalid(format_args!(
                "region index {i} has no observations"
            )));
        }
        let m = region_rows[i] as f64;
        let avg: Vec<f64> = sums.iter().map(|v| v / m).collect();
        let s = summarize_draws(&avg)?;
        region_means.push(RegionRr {
            region_index: i,
            mean: s.mean,
            sd: s.sd,
        });
    }

    Ok(RelativeRiskSurface {
        mode,
        baseline,
        cells,
        region_means,
        skipped_draws: skipped,
    })
}

/// Resolve the spec's baseline choice to a region index.
fn resolve_baseline(
    fit: &FitResult,
    data: &PanelDataset,
    graph: &AdjacencyGraph,
    rate: &impl Fn(&PanelRow, usize) -> f64,
) -> Result<usize> {
    match &fit.spec.baseline_region {
        BaselineRegion::Region(name) => graph.index_of(name).ok_or_else(|| {
            Error::invalid(format_args!("baseline region {name:?} is not in the graph"))
        }),
        BaselineRegion::LowestRisk => {
            let nd = fit.draws.beta.len();
            let mut sums = alloc::vec![0.0; fit.n_regions];
            let mut counts = alloc::vec![0usize; fit.n_regions];
            for row in &data.rows {
                let mut acc = 0.0;
                for k in 0..nd {
                    acc += rate(row, k);
                }
                sums[row.region_index] += acc;
                counts[row.region_index] += nd;
            }
            argmin_by(&sums, &counts)
        }
        BaselineRegion::ClosestToAverage => {
            let mut totals = alloc::vec![0.0; fit.n_regions];
            for row in &data.rows {
                totals[row.region_index] += row.count as f64;
            }
            let avg = totals.iter().sum::<f64>() / fit.n_regions as f64;
            let devs: Vec<f64> = totals.iter().map(|t| libm::fabs(t - avg)).collect();
            let ones = alloc::vec![1usize; fit.n_regions];
            argmin_by(&devs, &ones)
        }
    }
}

/// Index of the smallest `sums[i] / counts[i]` (first on ties); errors if
/// some region has no observations.
fn argmin_by(sums: &[f64], counts: &[usize]) -> Result<usize> {
    let mut best = None;
    let mut best_val = f64::INFINITY;
    for (i, (&s, &c)) in sums.iter().zip(counts).enumerate() {
        if c == 0 {
            return Err(Error::invalid(format_args!(
                "region index {i} has no observations"
            )));
        }
        let v = s / c as f64;
        if v < best_val {
            best_val = v;
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::invalid("no regions"))
}
