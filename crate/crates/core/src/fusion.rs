//! Building the analysis panel from heterogeneous raw inputs.
//!
//! The count models upstream want one tidy [`PanelDataset`]: a dense
//! (region, year) grid of event counts with a population offset and a set of
//! per-region covariates. The raw material is messier — service locations as
//! longitude/latitude points, household income as bracketed frequency
//! tables, census covariates with gaps, and individual event records. This
//! module carries out the fusion steps in between:
//!
//! * [`aggregate_points`] — assign service-location points to regions by
//!   even-odd [`point_in_polygon`] containment and count them per category.
//!   Boundary points go to the lexicographically smallest containing region
//!   id; points in no region land in an explicit unassigned bucket.
//! * [`estimate_average_income`] — collapse bracketed weekly-income
//!   frequency tables to a per-region average using bracket midpoints, with
//!   the open-top bracket valued at a multiple of its lower bound.
//! * [`impute_missing_counts`] — fill gaps in a per-region count covariate
//!   from a negative binomial regression on `log(population + 1)`, falling
//!   back to the observed median when too few regions are observed. Every
//!   filled cell is flagged; observed cells are never touched.
//! * [`aggregate_events`] — roll individual event records up to the
//!   (region, year) cell counts the panel wants, plus annual totals and
//!   per-status series for trend reporting.
//! * [`build_panel`] — the final join: dense regions × years grid,
//!   structural zeros for cells with no events, time-constant covariates
//!   replicated across years, offsets attached.
//!
//! Everything here is a pure, deterministic batch transform: the same
//! inputs produce bit-identical outputs, and nothing reads clocks, threads
//! or global state.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::glm::{eta_clamp, fit_nb_glm, PanelDataset, PanelRow};
use crate::lattice::{Region, Ring};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Service-location points
// ---------------------------------------------------------------------------

/// Category of a service location point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ServiceCategory {
    Pharmacy,
    Gp,
    Liquor,
    School,
    Library,
}

impl ServiceCategory {
    pub const ALL: [ServiceCategory; 5] = [
        ServiceCategory::Pharmacy,
        ServiceCategory::Gp,
        ServiceCategory::Liquor,
        ServiceCategory::School,
        ServiceCategory::Library,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ServiceCategory::Pharmacy => "pharmacy",
            ServiceCategory::Gp => "gp",
            ServiceCategory::Liquor => "liquor",
            ServiceCategory::School => "school",
            ServiceCategory::Library => "library",
        }
    }

    /// Position in [`ServiceCategory::ALL`], used to index count arrays.
    pub fn index(self) -> usize {
        match self {
            ServiceCategory::Pharmacy => 0,
            ServiceCategory::Gp => 1,
            ServiceCategory::Liquor => 2,
            ServiceCategory::School => 3,
            ServiceCategory::Library => 4,
        }
    }
}

impl core::str::FromStr for ServiceCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pharmacy" => Ok(ServiceCategory::Pharmacy),
            "gp" => Ok(ServiceCategory::Gp),
            "liquor" => Ok(ServiceCategory::Liquor),
            "school" => Ok(ServiceCategory::School),
            "library" => Ok(ServiceCategory::Library),
            other => Err(Error::invalid(format_args!(
                "unknown service category {other:?} (expected pharmacy, gp, liquor, school or library)"
            ))),
        }
    }
}

impl core::fmt::Display for ServiceCategory {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// One geocoded service location.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    /// Decimal degrees, in [-180, 180].
    pub longitude: f64,
    /// Decimal degrees, in [-90, 90].
    pub latitude: f64,
    pub category: ServiceCategory,
    /// Identifier from the source listing, carried through for reporting.
    pub source_id: String,
}

impl PointRecord {
    pub fn new(
        longitude: f64,
        latitude: f64,
        category: ServiceCategory,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let record = PointRecord {
            longitude,
            latitude,
            category,
            source_id: source_id.into(),
        };
        record.check_coordinates()?;
        Ok(record)
    }

    fn check_coordinates(&self) -> Result<()> {
        if !self.longitude.is_finite() || !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::invalid(format_args!(
                "point {:?}: longitude {} outside [-180, 180]",
                self.source_id, self.longitude
            )));
        }
        if !self.latitude.is_finite() || !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::invalid(format_args!(
                "point {:?}: latitude {} outside [-90, 90]",
                self.source_id, self.latitude
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Point-in-polygon containment
// ---------------------------------------------------------------------------

/// Is `point` exactly on the segment `a`-`b`?
fn on_segment(point: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (point[1] - a[1]) - (b[1] - a[1]) * (point[0] - a[0]);
    if cross != 0.0 {
        return false;
    }
    point[0] >= a[0].min(b[0])
        && point[0] <= a[0].max(b[0])
        && point[1] >= a[1].min(b[1])
        && point[1] <= a[1].max(b[1])
}

/// Even-odd (ray casting) containment test against a set of polygon rings.
///
/// All rings are treated alike: a point is inside when a ray from it crosses
/// the union of ring boundaries an odd number of times, so interior hole
/// rings exclude their contents and the disjoint parts of a multi-polygon
/// each count. Points exactly on any boundary segment are inside — callers
/// that attach a point to one of several touching polygons resolve the tie
/// themselves (see [`aggregate_points`]).
///
/// Every ring must be closed (first vertex repeated as the last, at least
/// four vertices) with finite coordinates.
pub fn point_in_polygon(point: [f64; 2], rings: &[Ring]) -> Result<bool> {
    if !point[0].is_finite() || !point[1].is_finite() {
        return Err(Error::invalid("point coordinates must be finite"));
    }
    if rings.is_empty() {
        return Err(Error::invalid("no polygon rings given"));
    }
    for (k, ring) in rings.iter().enumerate() {
        if ring.len() < 4 {
            return Err(Error::invalid(format_args!(
                "ring {k} has {} vertices; a closed ring needs at least 4",
                ring.len()
            )));
        }
        if ring.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format_args!(
                "ring {k} contains a non-finite coordinate"
            )));
        }
        if ring[0] != ring[ring.len() - 1] {
            return Err(Error::invalid(format_args!(
                "ring {k} is not closed (first vertex must repeat as last)"
            )));
        }
    }
    let mut inside = false;
    for ring in rings {
        for edge in ring.windows(2) {
            let (a, b) = (edge[0], edge[1]);
            if on_segment(point, a, b) {
                return Ok(true);
            }
            // Half-open vertical rule: count edges that straddle the
            // horizontal ray, so a ray through a shared vertex is not
            // double-counted.
            if (a[1] > point[1]) != (b[1] > point[1]) {
                let x_cross = a[0] + (point[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if point[0] < x_cross {
                    inside = !inside;
                }
            }
        }
    }
    Ok(inside)
}

/// Containment against all rings of a region (multi-polygon union).
pub fn region_contains(region: &Region, point: [f64; 2]) -> Result<bool> {
    point_in_polygon(point, &region.rings)
}

// ---------------------------------------------------------------------------
// Point aggregation
// ---------------------------------------------------------------------------

/// Per-region, per-category counts of service locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAggregate {
    /// Region ids in the order the regions were supplied.
    pub region_ids: Vec<String>,
    /// `counts[i][c]` = points of category index `c` inside region `i`.
    pub counts: Vec<[u64; 5]>,
    /// Per-category counts of points contained in no region.
    pub unassigned: [u64; 5],
    /// Source ids of the unassigned points, in input order.
    pub unassigned_ids: Vec<String>,
}

impl PointAggregate {
    pub fn count(&self, region_id: &str, category: ServiceCategory) -> Option<u64> {
        let i = self.region_ids.iter().position(|id| id == region_id)?;
        Some(self.counts[i][category.index()])
    }

    /// Counts of one category across all regions, in region order.
    pub fn counts_for(&self, category: ServiceCategory) -> Vec<u64> {
        let c = category.index();
        self.counts.iter().map(|row| row[c]).collect()
    }

    /// Regions + unassigned: equals the number of input points of the
    /// category.
    pub fn category_total(&self, category: ServiceCategory) -> u64 {
        let c = category.index();
        self.counts.iter().map(|row| row[c]).sum::<u64>() + self.unassigned[c]
    }

    pub fn unassigned_total(&self) -> u64 {
        self.unassigned.iter().sum()
    }
}

fn bounding_box(region: &Region) -> [f64; 4] {
    let mut bb = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for ring in &region.rings {
        for v in ring {
            bb[0] = bb[0].min(v[0]);
            bb[1] = bb[1].min(v[1]);
            bb[2] = bb[2].max(v[0]);
            bb[3] = bb[3].max(v[1]);
        }
    }
    bb
}

/// Count service points per region and category.
///
/// Each point is assigned to exactly one region, or to the unassigned
/// bucket when no region contains it. A point on a shared boundary is
/// contained by several regions; it goes to the lexicographically smallest
/// containing region id, which keeps the assignment independent of region
/// order. No point is ever dropped: per category,
/// `sum over regions + unassigned == number of input points`.
pub fn aggregate_points(points: &[PointRecord], regions: &[Region]) -> Result<PointAggregate> {
    let mut seen = BTreeSet::new();
    for region in regions {
        if !seen.insert(region.id.as_str()) {
            return Err(Error::invalid(format_args!(
                "duplicate region id {:?}",
                region.id
            )));
        }
    }
    let boxes: Vec<[f64; 4]> = regions.iter().map(bounding_box).collect();
    let mut counts = alloc::vec![[0u64; 5]; regions.len()];
    let mut unassigned = [0u64; 5];
    let mut unassigned_ids = Vec::new();

    for point in points {
        point.check_coordinates()?;
        let p = [point.longitude, point.latitude];
        let mut best: Option<usize> = None;
        for (i, region) in regions.iter().enumerate() {
            let bb = boxes[i];
            if p[0] < bb[0] || p[0] > bb[2] || p[1] < bb[1] || p[1] > bb[3] {
                continue;
            }
            if point_in_polygon(p, &region.rings)? {
                best = Some(match best {
                    Some(j) if regions[j].id <= region.id => j,
                    _ => i,
                });
            }
        }
        match best {
            Some(i) => counts[i][point.category.index()] += 1,
            None => {
                unassigned[point.category.index()] += 1;
                unassigned_ids.push(point.source_id.clone());
            }
        }
    }

    Ok(PointAggregate {
        region_ids: regions.iter().map(|r| r.id.clone()).collect(),
        counts,
        unassigned,
        unassigned_ids,
    })
}

// ---------------------------------------------------------------------------
// Income brackets
// ---------------------------------------------------------------------------

/// Default valuation of the open-top bracket: `1.5 × lower bound`.
pub const DEFAULT_OPEN_TOP_MULTIPLIER: f64 = 1.5;

/// One weekly-income bracket row: bounds in currency per week and the
/// number of residents reporting an income in the bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct IncomeBracket {
    pub lower: f64,
    /// `None` marks the open-top bracket ("$x or more"); it must be last.
    pub upper: Option<f64>,
    pub frequency: u64,
}

/// One region's income table: the ordinary brackets plus the special
/// negative / nil / not-stated buckets that sit outside them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionIncome {
    pub brackets: Vec<IncomeBracket>,
    pub negative_count: u64,
    pub nil_count: u64,
    pub not_stated_count: u64,
}

impl RegionIncome {
    /// Validate and build: brackets sorted ascending, non-overlapping,
    /// bounds finite with `upper > lower`, the open-top bracket (if any)
    /// last.
    pub fn new(
        brackets: Vec<IncomeBracket>,
        negative_count: u64,
        nil_count: u64,
        not_stated_count: u64,
    ) -> Result<Self> {
        for (k, b) in brackets.iter().enumerate() {
            if !b.lower.is_finite() || b.lower < 0.0 {
                return Err(Error::invalid(format_args!(
                    "bracket {k}: lower bound {} must be finite and non-negative",
                    b.lower
                )));
            }
            if let Some(upper) = b.upper {
                if !upper.is_finite() || upper <= b.lower {
                    return Err(Error::invalid(format_args!(
                        "bracket {k}: upper bound {upper} must be finite and exceed the lower bound {}",
                        b.lower
                    )));
                }
            }
        }
        for (k, pair) in brackets.windows(2).enumerate() {
            let upper = pair[0].upper.ok_or_else(|| {
                Error::invalid(format_args!(
                    "bracket {k} is open-top but not last; the open-top bracket must close the table"
                ))
            })?;
            if pair[1].lower <= upper {
                return Err(Error::invalid(format_args!(
                    "brackets {k} and {} overlap or are out of order",
                    k + 1
                )));
            }
        }
        Ok(RegionIncome {
            brackets,
            negative_count,
            nil_count,
            not_stated_count,
        })
    }

    /// Residents inside the ordinary brackets — the denominator of the
    /// average. Negative, nil and not-stated residents are excluded.
    pub fn adjusted_population(&self) -> u64 {
        self.brackets.iter().map(|b| b.frequency).sum()
    }
}

/// Bracketed weekly-income tables for a set of regions, keyed by region id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IncomeBracketTable {
    pub regions: BTreeMap<String, RegionIncome>,
}

impl IncomeBracketTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, region_id: impl Into<String>, income: RegionIncome) -> Result<()> {
        let id = region_id.into();
        if self.regions.contains_key(&id) {
            return Err(Error::invalid(format_args!(
                "duplicate income table for region {id:?}"
            )));
        }
        self.regions.insert(id, income);
        Ok(())
    }
}

/// Average weekly income of one region from its bracket table.
///
/// Each closed bracket is valued at its midpoint `(lower + upper) / 2`; the
/// open-top bracket at `lower × open_top_multiplier`. The average weighs
/// midpoints by bracket frequency over the adjusted population
/// ([`RegionIncome::adjusted_population`]). A region whose adjusted
/// population is zero (everyone in the special buckets) has no defined
/// average and yields `None` — a missing value for downstream imputation,
/// not an error.
pub fn average_weekly_income(
    income: &RegionIncome,
    open_top_multiplier: f64,
) -> Result<Option<f64>> {
    if !open_top_multiplier.is_finite() || open_top_multiplier < 1.0 {
        return Err(Error::invalid(format_args!(
            "open-top multiplier must be finite and at least 1, got {open_top_multiplier}"
        )));
    }
    let population = income.adjusted_population();
    if population == 0 {
        return Ok(None);
    }
    let total: f64 = income
        .brackets
        .iter()
        .map(|b| {
            let midpoint = match b.upper {
                Some(upper) => 0.5 * (b.lower + upper),
                None => b.lower * open_top_multiplier,
            };
            midpoint * b.frequency as f64
        })
        .sum();
    Ok(Some(total / population as f64))
}

/// Per-region average weekly income for a whole table; `None` entries are
/// regions with an empty adjusted population.
pub fn estimate_average_income(
    table: &IncomeBracketTable,
    open_top_multiplier: f64,
) -> Result<BTreeMap<String, Option<f64>>> {
    let mut out = BTreeMap::new();
    for (id, income) in &table.regions {
        out.insert(id.clone(), average_weekly_income(income, open_top_multiplier)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Covariate table
// ---------------------------------------------------------------------------

/// Where a covariate cell's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    /// Filled by the population regression model.
    Imputed,
    /// Filled by the observed-median fallback (too few observed regions to
    /// fit the model, or the fit failed).
    ImputedDegraded,
}

impl core::fmt::Display for Provenance {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Provenance::Observed => "observed",
            Provenance::Imputed => "imputed",
            Provenance::ImputedDegraded => "imputed-degraded",
        })
    }
}

/// Validation class of a covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateKind {
    /// Non-negative count (service locations, residents in a class).
    Count,
    /// Proportion in [0, 1].
    Share,
    /// Any finite value (average income).
    Value,
}

/// One covariate value and its provenance flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateCell {
    pub value: f64,
    pub provenance: Provenance,
}

/// One named covariate across all regions; `None` cells are gaps awaiting
/// imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateColumn {
    pub name: String,
    pub kind: CovariateKind,
    pub cells: Vec<Option<CovariateCell>>,
}

/// Per-region named covariates with provenance flags.
///
/// Rows are regions (fixed at construction), columns are covariates added
/// one at a time. Values are validated against the column kind; gaps are
/// explicit and must be imputed (or the column dropped) before the table
/// can feed [`build_panel`].
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    region_ids: Vec<String>,
    columns: Vec<CovariateColumn>,
}

/// What [`CovariateTable::impute_column`] did, for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnImputation {
    pub column: String,
    pub method: Option<ImputationMethod>,
    /// Ids of the regions whose cells were filled, in table order.
    pub imputed_regions: Vec<String>,
}

fn check_cell_value(kind: CovariateKind, name: &str, region: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::invalid(format_args!(
            "covariate {name:?}, region {region:?}: value must be finite"
        )));
    }
    match kind {
        CovariateKind::Count if value < 0.0 => Err(Error::invalid(format_args!(
            "covariate {name:?}, region {region:?}: count {value} is negative"
        ))),
        CovariateKind::Share if !(0.0..=1.0).contains(&value) => {
            Err(Error::invalid(format_args!(
                "covariate {name:?}, region {region:?}: share {value} outside [0, 1]"
            )))
        }
        _ => Ok(()),
    }
}

impl CovariateTable {
    pub fn new(region_ids: Vec<String>) -> Result<Self> {
        if region_ids.is_empty() {
            return Err(Error::invalid("covariate table needs at least one region"));
        }
        let mut seen = BTreeSet::new();
        for id in &region_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format_args!("duplicate region id {id:?}")));
            }
        }
        Ok(CovariateTable {
            region_ids,
            columns: Vec::new(),
        })
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == id)
    }

    pub fn columns(&self) -> &[CovariateColumn] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Result<&CovariateColumn> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::invalid(format_args!("unknown covariate column {name:?}")))
    }

    /// Add a column of pre-flagged cells (used when reloading a saved
    /// table). Values are validated against the kind.
    pub fn push_cells(
        &mut self,
        name: impl Into<String>,
        kind: CovariateKind,
        cells: Vec<Option<CovariateCell>>,
    ) -> Result<()> {
        let name = name.into();
        if self.columns.iter().any(|c| c.name == name) {
            return Err(Error::invalid(format_args!(
                "duplicate covariate column {name:?}"
            )));
        }
        if cells.len() != self.region_ids.len() {
            return Err(Error::invalid(format_args!(
                "column {name:?} has {} cells for {} regions",
                cells.len(),
                self.region_ids.len()
            )));
        }
        for (cell, id) in cells.iter().zip(&self.region_ids) {
            if let Some(cell) = cell {
                check_cell_value(kind, &name, id, cell.value)?;
            }
        }
        self.columns.push(CovariateColumn { name, kind, cells });
        Ok(())
    }

    /// Add a column of observed values; `None` marks a gap to impute.
    pub fn push_column(
        &mut self,
        name: impl Into<String>,
        kind: CovariateKind,
        values: Vec<Option<f64>>,
    ) -> Result<()> {
        let cells = values
            .into_iter()
            .map(|v| {
                v.map(|value| CovariateCell {
                    value,
                    provenance: Provenance::Observed,
                })
            })
            .collect();
        self.push_cells(name, kind, cells)
    }

    /// Add a complete observed count column (e.g. from
    /// [`aggregate_points`]).
    pub fn push_observed_counts(
        &mut self,
        name: impl Into<String>,
        counts: &[u64],
    ) -> Result<()> {
        self.push_column(
            name,
            CovariateKind::Count,
            counts.iter().map(|&c| Some(c as f64)).collect(),
        )
    }

    /// All gaps, as (region id, column name) pairs in column-major order.
    pub fn missing_cells(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for column in &self.columns {
            for (cell, id) in column.cells.iter().zip(&self.region_ids) {
                if cell.is_none() {
                    out.push((id.clone(), column.name.clone()));
                }
            }
        }
        out
    }

    /// Fill the gaps of one column by [`impute_missing_counts`], flagging
    /// every filled cell. Works on `Count` columns and on non-negative
    /// `Value` columns (values are rounded to whole units for the count
    /// model); `Share` columns are not imputable this way. `populations`
    /// must align with the table's regions. Observed cells are never
    /// altered.
    pub fn impute_column(&mut self, name: &str, populations: &[u64]) -> Result<ColumnImputation> {
        if populations.len() != self.region_ids.len() {
            return Err(Error::invalid(format_args!(
                "got {} populations for {} regions",
                populations.len(),
                self.region_ids.len()
            )));
        }
        let col = self
            .columns
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::invalid(format_args!("unknown covariate column {name:?}")))?;
        if col.kind == CovariateKind::Share {
            return Err(Error::invalid(format_args!(
                "column {name:?} holds shares; the count imputation model does not apply"
            )));
        }
        let mut observed = Vec::with_capacity(col.cells.len());
        for (cell, id) in col.cells.iter().zip(&self.region_ids) {
            match cell {
                Some(c) if c.value < 0.0 => {
                    return Err(Error::invalid(format_args!(
                        "column {name:?}, region {id:?}: negative value {} cannot enter the count model",
                        c.value
                    )));
                }
                Some(c) => observed.push(Some(libm::round(c.value) as u64)),
                None => observed.push(None),
            }
        }
        let filled = impute_missing_counts(&observed, populations)?;
        let mut imputed_regions = Vec::new();
        for (i, cell) in col.cells.iter_mut().enumerate() {
            if cell.is_none() {
                *cell = Some(CovariateCell {
                    value: filled.counts[i] as f64,
                    provenance: filled.provenance[i],
                });
                imputed_regions.push(self.region_ids[i].clone());
            }
        }
        Ok(ColumnImputation {
            column: name.to_string(),
            method: filled.method,
            imputed_regions,
        })
    }
}

// ---------------------------------------------------------------------------
// Count imputation
// ---------------------------------------------------------------------------

/// How the gaps of a count vector were filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputationMethod {
    /// Negative binomial regression on `log(population + 1)`.
    PopulationModel,
    /// Median of the observed counts (degraded fallback).
    ObservedMedian,
}

impl core::fmt::Display for ImputationMethod {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            ImputationMethod::PopulationModel => "population-model",
            ImputationMethod::ObservedMedian => "observed-median",
        })
    }
}

/// A completed count vector with per-cell provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedCounts {
    pub counts: Vec<u64>,
    pub provenance: Vec<Provenance>,
    /// `None` when the input had no gaps and nothing was fitted.
    pub method: Option<ImputationMethod>,
}

/// Observed median, rounded half away from zero on an even split.
fn observed_median(observed: &[u64]) -> u64 {
    let mut sorted = observed.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        libm::round(0.5 * (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64)) as u64
    }
}

/// Fill the gaps of a per-region count covariate.
///
/// With at least 10 observed regions a negative binomial regression of the
/// observed counts on `log(population + 1)` is fitted and each gap takes
/// the rounded fitted mean at its region's population (a region with
/// population 0 therefore takes `round(exp(intercept))`). With fewer
/// observed regions — or when the regression itself fails, e.g. all
/// observed populations equal — the gaps take the observed median instead
/// and carry the degraded flag. Observed cells pass through untouched, and
/// a gap-free input comes back identical with no flags set.
pub fn impute_missing_counts(
    counts: &[Option<u64>],
    populations: &[u64],
) -> Result<ImputedCounts> {
    if counts.is_empty() {
        return Err(Error::invalid("no regions to impute"));
    }
    if counts.len() != populations.len() {
        return Err(Error::invalid(format_args!(
            "got {} counts for {} populations",
            counts.len(),
            populations.len()
        )));
    }
    if counts.iter().all(|c| c.is_some()) {
        return Ok(ImputedCounts {
            counts: counts.iter().map(|c| c.unwrap()).collect(),
            provenance: alloc::vec![Provenance::Observed; counts.len()],
            method: None,
        });
    }
    let observed: Vec<(usize, u64)> = counts
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|v| (i, v)))
        .collect();
    if observed.is_empty() {
        return Err(Error::undefined(
            "cannot impute a covariate with no observed regions",
        ));
    }

    let model = if observed.len() >= 10 {
        let rows: Vec<PanelRow> = observed
            .iter()
            .map(|&(i, count)| PanelRow {
                region_index: i,
                year_index: 0,
                count,
                offset: 1.0,
                covariates: alloc::vec![libm::log(populations[i] as f64 + 1.0)],
            })
            .collect();
        PanelDataset::new(
            rows,
            alloc::vec![String::from("log_population_plus_1")],
            alloc::vec![false],
        )
        .and_then(|data| fit_nb_glm(&data, false))
        .ok()
    } else {
        None
    };

    let mut out = Vec::with_capacity(counts.len());
    let mut provenance = Vec::with_capacity(counts.len());
    let method;
    match model {
        Some(fit) => {
            method = Some(ImputationMethod::PopulationModel);
            for (i, c) in counts.iter().enumerate() {
                match c {
                    Some(v) => {
                        out.push(*v);
                        provenance.push(Provenance::Observed);
                    }
                    None => {
                        let eta = fit.intercept
                            + fit.coefficients[0] * libm::log(populations[i] as f64 + 1.0);
                        out.push(libm::round(libm::exp(eta_clamp(eta))) as u64);
                        provenance.push(Provenance::Imputed);
                    }
                }
            }
        }
        None => {
            method = Some(ImputationMethod::ObservedMedian);
            let median = observed_median(
                &observed.iter().map(|&(_, v)| v).collect::<Vec<u64>>(),
            );
            for c in counts {
                match c {
                    Some(v) => {
                        out.push(*v);
                        provenance.push(Provenance::Observed);
                    }
                    None => {
                        out.push(median);
                        provenance.push(Provenance::ImputedDegraded);
                    }
                }
            }
        }
    }
    Ok(ImputedCounts {
        counts: out,
        provenance,
        method,
    })
}

// ---------------------------------------------------------------------------
// Event aggregation
// ---------------------------------------------------------------------------

/// One raw event row (an individual incident record).
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub region_id: String,
    pub year: i32,
    /// Optional status column; when present the aggregate also reports
    /// per-status series.
    pub indigenous_status: Option<String>,
    /// Optional age band, carried through from the source but not
    /// aggregated here.
    pub age_band: Option<String>,
}

/// Event count of one (region, year) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EeCount {
    pub region_id: String,
    pub year: i32,
    pub count: u64,
}

/// Event count of one (region, status, year) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StatusCount {
    pub region_id: String,
    pub status: String,
    pub year: i32,
    pub count: u64,
}

/// Event records rolled up to the granularities the pipeline reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EventAggregate {
    /// (region, year) cell counts, sorted by region id then year: the
    /// panel's count input.
    pub cell_counts: Vec<EeCount>,
    /// Per-year totals across all regions, sorted by year (annual trend
    /// series). Sums to the number of input records.
    pub annual_totals: Vec<(i32, u64)>,
    /// Per (region, status, year) counts over the records that carry a
    /// status, sorted.
    pub status_counts: Vec<StatusCount>,
}

/// Roll raw event rows up to (region, year) counts plus the annual and
/// per-status series.
pub fn aggregate_events(events: &[EventRecord]) -> Result<EventAggregate> {
    let mut cells: BTreeMap<(&str, i32), u64> = BTreeMap::new();
    let mut annual: BTreeMap<i32, u64> = BTreeMap::new();
    let mut status: BTreeMap<(&str, &str, i32), u64> = BTreeMap::new();
    for (k, event) in events.iter().enumerate() {
        if event.region_id.is_empty() {
            return Err(Error::invalid(format_args!(
                "event row {k} has an empty region id"
            )));
        }
        *cells.entry((&event.region_id, event.year)).or_insert(0) += 1;
        *annual.entry(event.year).or_insert(0) += 1;
        if let Some(s) = &event.indigenous_status {
            *status
                .entry((&event.region_id, s.as_str(), event.year))
                .or_insert(0) += 1;
        }
    }
    Ok(EventAggregate {
        cell_counts: cells
            .into_iter()
            .map(|((region, year), count)| EeCount {
                region_id: region.to_string(),
                year,
                count,
            })
            .collect(),
        annual_totals: annual.into_iter().collect(),
        status_counts: status
            .into_iter()
            .map(|((region, s, year), count)| StatusCount {
                region_id: region.to_string(),
                status: s.to_string(),
                year,
                count,
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Panel assembly
// ---------------------------------------------------------------------------

/// What goes into the panel's exposure offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetSource {
    /// Region population (every region must then have population > 0).
    Population,
    /// No exposure scaling: offset 1 on every row.
    None,
}

/// Join counts, covariates and offsets into the dense panel.
///
/// The output has exactly one row per (region, year) pair — `region_index`
/// is the position in `regions`, `year_index` is `year - start`. Cells
/// without an event count are structural zeros (an absent record means no
/// events, not missing data). Covariates are a census snapshot: constant
/// over time, replicated across the years of each region. Count columns
/// are flagged for the log transform of the covariate-preparation step;
/// shares and values are left on their natural scale.
///
/// Rejected inputs: a covariate table with remaining gaps (impute first), a
/// table missing one of the panel's regions, event counts for regions
/// outside the region set or years outside the span, and zero population
/// under [`OffsetSource::Population`].
pub fn build_panel(
    ee_counts: &[EeCount],
    covariates: &CovariateTable,
    regions: &[Region],
    years: core::ops::RangeInclusive<i32>,
    offset_source: OffsetSource,
) -> Result<PanelDataset> {
    if regions.is_empty() {
        return Err(Error::invalid("no regions"));
    }
    let (start, end) = (*years.start(), *years.end());
    if start > end {
        return Err(Error::invalid(format_args!(
            "empty year range {start}..={end}"
        )));
    }
    let n = regions.len();
    let t = (end - start + 1) as usize;

    let mut index_of = BTreeMap::new();
    for (i, region) in regions.iter().enumerate() {
        if index_of.insert(region.id.as_str(), i).is_some() {
            return Err(Error::invalid(format_args!(
                "duplicate region id {:?}",
                region.id
            )));
        }
    }

    // Covariates must be complete and cover every region.
    let gaps = covariates.missing_cells();
    if !gaps.is_empty() {
        let listed: Vec<String> = gaps
            .iter()
            .map(|(region, column)| alloc::format!("{region}/{column}"))
            .collect();
        return Err(Error::invalid(format_args!(
            "covariate table still has {} unimputed cells: {}",
            listed.len(),
            listed.join(", ")
        )));
    }
    let mut table_row = Vec::with_capacity(n);
    let mut absent = Vec::new();
    for region in regions {
        match covariates.region_index(&region.id) {
            Some(r) => table_row.push(r),
            None => absent.push(region.id.clone()),
        }
    }
    if !absent.is_empty() {
        return Err(Error::invalid(format_args!(
            "covariate table is missing regions: {}",
            absent.join(", ")
        )));
    }

    // Event counts onto the dense grid; reject anything off it.
    let mut unknown = BTreeSet::new();
    let mut out_of_span = BTreeSet::new();
    let mut counts = alloc::vec![alloc::vec![0u64; t]; n];
    for cell in ee_counts {
        let Some(&i) = index_of.get(cell.region_id.as_str()) else {
            unknown.insert(cell.region_id.clone());
            continue;
        };
        if cell.year < start || cell.year > end {
            out_of_span.insert(cell.year);
            continue;
        }
        counts[i][(cell.year - start) as usize] += cell.count;
    }
    if !unknown.is_empty() {
        let ids: Vec<String> = unknown.into_iter().collect();
        return Err(Error::invalid(format_args!(
            "event counts reference regions outside the region set: {}",
            ids.join(", ")
        )));
    }
    if !out_of_span.is_empty() {
        let ys: Vec<String> = out_of_span.iter().map(|y| y.to_string()).collect();
        return Err(Error::invalid(format_args!(
            "event counts reference years outside {start}..={end}: {}",
            ys.join(", ")
        )));
    }

    let mut offsets = Vec::with_capacity(n);
    for region in regions {
        let offset = match offset_source {
            OffsetSource::Population => {
                if region.population == 0 {
                    return Err(Error::invalid(format_args!(
                        "region {:?} has population 0 and cannot carry a population offset",
                        region.id
                    )));
                }
                region.population as f64
            }
            OffsetSource::None => 1.0,
        };
        offsets.push(offset);
    }

    let columns = covariates.columns();
    let covariate_rows: Vec<Vec<f64>> = table_row
        .iter()
        .map(|&r| {
            columns
                .iter()
                .map(|c| c.cells[r].as_ref().expect("checked complete").value)
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(n * t);
    for i in 0..n {
        for k in 0..t {
            rows.push(PanelRow {
                region_index: i,
                year_index: k,
                count: counts[i][k],
                offset: offsets[i],
                covariates: covariate_rows[i].clone(),
            });
        }
    }
    PanelDataset::new(
        rows,
        columns.iter().map(|c| c.name.clone()).collect(),
        columns
            .iter()
            .map(|c| c.kind == CovariateKind::Count)
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Occupation classification
// ---------------------------------------------------------------------------

/// Collar class of an occupation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupationClass {
    BlueCollar,
    WhiteCollar,
    Unclassified,
}

/// Classify a raw occupation label.
///
/// Exact-match table (after trimming and case folding): technicians and
/// trades workers, community and personal service workers, and labourers
/// are blue collar; managers, clerical and administrative staff, and sales
/// workers are white collar. Anything else — including occupation groups
/// deliberately outside the two classes — is unclassified.
pub fn classify_occupation(label: &str) -> OccupationClass {
    match label.trim().to_ascii_lowercase().as_str() {
        "technicians and trades workers"
        | "community and personal service workers"
        | "labourers" => OccupationClass::BlueCollar,
        "managers" | "clerical and administrative staff" | "sales workers" => {
            OccupationClass::WhiteCollar
        }
        _ => OccupationClass::Unclassified,
    }
}

/// Counts of labels per collar class, unknown labels counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OccupationTally {
    pub blue_collar: u64,
    pub white_collar: u64,
    pub unclassified: u64,
}

pub fn tally_occupations<'a, I>(labels: I) -> OccupationTally
where
    I: IntoIterator<Item = &'a str>,
{
    let mut tally = OccupationTally::default();
    for label in labels {
        match classify_occupation(label) {
            OccupationClass::BlueCollar => tally.blue_collar += 1,
            OccupationClass::WhiteCollar => tally.white_collar += 1,
            OccupationClass::Unclassified => tally.unclassified += 1,
        }
    }
    tally
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn square(id: &str, x0: f64, y0: f64, population: u64) -> Region {
        Region::new(
            id,
            vec![vec![
                [x0, y0],
                [x0 + 1.0, y0],
                [x0 + 1.0, y0 + 1.0],
                [x0, y0 + 1.0],
                [x0, y0],
            ]],
            population,
        )
        .unwrap()
    }

    #[test]
    fn containment_basics() {
        let unit: Vec<Ring> = vec![vec![
            [0.0, 0.0],
            [1.0, 0.0],
            [1.0, 1.0],
            [0.0, 1.0],
            [0.0, 0.0],
        ]];
        assert!(point_in_polygon([0.5, 0.5], &unit).unwrap());
        assert!(!point_in_polygon([2.0, 0.5], &unit).unwrap());
        assert!(!point_in_polygon([-0.1, 1.2], &unit).unwrap());
        // Boundary points (edges and vertices) count as inside.
        assert!(point_in_polygon([1.0, 0.5], &unit).unwrap());
        assert!(point_in_polygon([0.0, 0.0], &unit).unwrap());

        // An unclosed ring is rejected.
        let open = vec![vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]];
        assert!(point_in_polygon([0.5, 0.5], &open).is_err());
    }

    #[test]
    fn holes_exclude_their_interior() {
        let with_hole: Vec<Ring> = vec![
            vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [0.0, 0.0]],
            vec![[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0], [1.0, 1.0]],
        ];
        assert!(!point_in_polygon([2.0, 2.0], &with_hole).unwrap());
        assert!(point_in_polygon([0.5, 2.0], &with_hole).unwrap());
        // The hole's boundary itself still belongs to the region.
        assert!(point_in_polygon([1.0, 2.0], &with_hole).unwrap());
    }

    #[test]
    fn points_aggregate_with_lexicographic_tiebreak() {
        // "4870" sits left of "4869"; they share the edge x = 1.
        let regions = vec![square("4870", 0.0, 0.0, 100), square("4869", 1.0, 0.0, 50)];
        let points = vec![
            PointRecord::new(0.5, 0.5, ServiceCategory::Pharmacy, "p1").unwrap(),
            PointRecord::new(1.5, 0.5, ServiceCategory::Pharmacy, "p2").unwrap(),
            PointRecord::new(1.0, 0.5, ServiceCategory::Gp, "edge").unwrap(),
            PointRecord::new(5.0, 5.0, ServiceCategory::Liquor, "ocean").unwrap(),
        ];
        let agg = aggregate_points(&points, &regions).unwrap();
        assert_eq!(agg.count("4870", ServiceCategory::Pharmacy), Some(1));
        assert_eq!(agg.count("4869", ServiceCategory::Pharmacy), Some(1));
        // The shared-edge point is inside both squares; the smaller id wins.
        assert_eq!(agg.count("4869", ServiceCategory::Gp), Some(1));
        assert_eq!(agg.count("4870", ServiceCategory::Gp), Some(0));
        // The ocean point is reported, not dropped.
        assert_eq!(agg.unassigned[ServiceCategory::Liquor.index()], 1);
        assert_eq!(agg.unassigned_ids, vec![String::from("ocean")]);
        // Conservation per category.
        for cat in ServiceCategory::ALL {
            let input = points.iter().filter(|p| p.category == cat).count() as u64;
            assert_eq!(agg.category_total(cat), input);
        }
        // Runs are bit-identical.
        assert_eq!(agg, aggregate_points(&points, &regions).unwrap());
    }

    #[test]
    fn point_validation() {
        assert!(PointRecord::new(181.0, 0.0, ServiceCategory::Gp, "x").is_err());
        assert!(PointRecord::new(0.0, -91.0, ServiceCategory::Gp, "x").is_err());
        assert!(PointRecord::new(f64::NAN, 0.0, ServiceCategory::Gp, "x").is_err());
        assert_eq!(
            "school".parse::<ServiceCategory>().unwrap(),
            ServiceCategory::School
        );
        assert!("bank".parse::<ServiceCategory>().is_err());
    }

    #[test]
    fn income_midpoints_match_hand_values() {
        let one = RegionIncome::new(
            vec![IncomeBracket {
                lower: 1.0,
                upper: Some(149.0),
                frequency: 10,
            }],
            0,
            0,
            0,
        )
        .unwrap();
        assert_eq!(
            average_weekly_income(&one, DEFAULT_OPEN_TOP_MULTIPLIER).unwrap(),
            Some(75.0)
        );

        let two = RegionIncome::new(
            vec![
                IncomeBracket {
                    lower: 1.0,
                    upper: Some(149.0),
                    frequency: 10,
                },
                IncomeBracket {
                    lower: 150.0,
                    upper: Some(299.0),
                    frequency: 10,
                },
            ],
            3,
            7,
            2,
        )
        .unwrap();
        // (75*10 + 224.5*10) / 20; the special buckets stay out of the
        // denominator.
        assert_eq!(
            average_weekly_income(&two, DEFAULT_OPEN_TOP_MULTIPLIER).unwrap(),
            Some(149.75)
        );

        let open_top = RegionIncome::new(
            vec![IncomeBracket {
                lower: 400.0,
                upper: None,
                frequency: 8,
            }],
            0,
            0,
            0,
        )
        .unwrap();
        assert_eq!(
            average_weekly_income(&open_top, 1.5).unwrap(),
            Some(600.0)
        );

        // Everyone in the special buckets: no average, not an error.
        let empty = RegionIncome::new(vec![], 4, 11, 3).unwrap();
        assert_eq!(average_weekly_income(&empty, 1.5).unwrap(), None);
    }

    #[test]
    fn income_scaling_leaves_the_average_unchanged() {
        let brackets = |k: u64| {
            RegionIncome::new(
                vec![
                    IncomeBracket {
                        lower: 1.0,
                        upper: Some(149.0),
                        frequency: 7 * k,
                    },
                    IncomeBracket {
                        lower: 150.0,
                        upper: Some(299.0),
                        frequency: 4 * k,
                    },
                    IncomeBracket {
                        lower: 300.0,
                        upper: None,
                        frequency: 2 * k,
                    },
                ],
                1,
                2,
                3,
            )
            .unwrap()
        };
        let base = average_weekly_income(&brackets(1), 1.5).unwrap().unwrap();
        for k in [2, 3, 10] {
            let scaled = average_weekly_income(&brackets(k), 1.5).unwrap().unwrap();
            assert!((scaled - base).abs() < 1e-12);
        }
    }

    #[test]
    fn income_bracket_validation() {
        let b = |lower, upper, frequency| IncomeBracket {
            lower,
            upper,
            frequency,
        };
        // Overlap.
        assert!(RegionIncome::new(
            vec![b(1.0, Some(149.0), 1), b(100.0, Some(299.0), 1)],
            0,
            0,
            0
        )
        .is_err());
        // Out of order.
        assert!(RegionIncome::new(
            vec![b(150.0, Some(299.0), 1), b(1.0, Some(149.0), 1)],
            0,
            0,
            0
        )
        .is_err());
        // Open-top bracket not last.
        assert!(RegionIncome::new(
            vec![b(300.0, None, 1), b(400.0, Some(500.0), 1)],
            0,
            0,
            0
        )
        .is_err());
        // Upper bound at or below the lower bound.
        assert!(RegionIncome::new(vec![b(100.0, Some(100.0), 1)], 0, 0, 0).is_err());
        // Multiplier below 1 makes no sense for an "or more" bracket.
        let ok = RegionIncome::new(vec![b(1.0, Some(149.0), 1)], 0, 0, 0).unwrap();
        assert!(average_weekly_income(&ok, 0.5).is_err());

        let mut table = IncomeBracketTable::new();
        table.insert("4870", ok.clone()).unwrap();
        assert!(table.insert("4870", ok).is_err());
        let averages = estimate_average_income(&table, 1.5).unwrap();
        assert_eq!(averages.get("4870"), Some(&Some(75.0)));
    }

    #[test]
    fn model_imputation_matches_a_refit_prediction() {
        // Twelve observed regions with counts that grow with population;
        // two gaps, one of them at population 0 and one sharing its
        // population (2300) with observed regions.
        let populations: Vec<u64> = vec![
            100, 200, 350, 500, 800, 1200, 1700, 2300, 3000, 3800, 4700, 2300, 0, 2300,
        ];
        let counts: Vec<Option<u64>> = vec![
            Some(0),
            Some(1),
            Some(1),
            Some(2),
            Some(3),
            Some(4),
            Some(6),
            Some(8),
            Some(10),
            Some(13),
            Some(16),
            Some(8),
            None,
            None,
        ];
        let result = impute_missing_counts(&counts, &populations).unwrap();
        assert_eq!(result.method, Some(ImputationMethod::PopulationModel));

        // Observed cells pass through untouched.
        for (i, c) in counts.iter().enumerate() {
            if let Some(v) = c {
                assert_eq!(result.counts[i], *v);
                assert_eq!(result.provenance[i], Provenance::Observed);
            } else {
                assert_eq!(result.provenance[i], Provenance::Imputed);
            }
        }

        // Refit the same regression by hand and predict.
        let rows: Vec<PanelRow> = counts
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                c.map(|count| PanelRow {
                    region_index: i,
                    year_index: 0,
                    count,
                    offset: 1.0,
                    covariates: vec![libm::log(populations[i] as f64 + 1.0)],
                })
            })
            .collect();
        let data =
            PanelDataset::new(rows, vec![String::from("lp")], vec![false]).unwrap();
        let fit = fit_nb_glm(&data, false).unwrap();
        let predict = |population: u64| {
            let eta =
                fit.intercept + fit.coefficients[0] * libm::log(population as f64 + 1.0);
            libm::round(libm::exp(eta)) as u64
        };
        assert_eq!(result.counts[13], predict(2300));
        // log(0 + 1) = 0: the fill at population 0 is round(exp(intercept)).
        assert_eq!(result.counts[12], predict(0));
        assert_eq!(
            result.counts[12],
            libm::round(libm::exp(fit.intercept)) as u64
        );
    }

    #[test]
    fn median_fallback_below_ten_observed() {
        let counts = vec![Some(1), Some(2), Some(8), Some(9), Some(40), None, None];
        let populations = vec![10, 20, 30, 40, 50, 60, 0];
        let result = impute_missing_counts(&counts, &populations).unwrap();
        assert_eq!(result.method, Some(ImputationMethod::ObservedMedian));
        assert_eq!(result.counts[5], 8);
        assert_eq!(result.counts[6], 8);
        assert_eq!(result.provenance[5], Provenance::ImputedDegraded);

        // Even split rounds half away from zero: median of {1, 2, 8, 10} is 5.
        let even = vec![Some(1), Some(2), Some(8), Some(10), None];
        let result = impute_missing_counts(&even, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(result.counts[4], 5);

        // No gaps: identity, no flags, nothing fitted.
        let full = vec![Some(3), Some(4)];
        let result = impute_missing_counts(&full, &[1, 2]).unwrap();
        assert_eq!(result.counts, vec![3, 4]);
        assert!(result.provenance.iter().all(|p| *p == Provenance::Observed));
        assert_eq!(result.method, None);

        // Nothing observed at all: undefined.
        assert!(impute_missing_counts(&[None, None], &[1, 2]).is_err());
        assert!(impute_missing_counts(&[Some(1)], &[1, 2]).is_err());
    }

    #[test]
    fn constant_population_degrades_to_the_median() {
        // Twelve observed regions, all with the same population: the
        // regression has a constant covariate and cannot be fitted, so the
        // gaps take the median with the degraded flag.
        let counts: Vec<Option<u64>> = (0..12)
            .map(|i| Some(i as u64))
            .chain([None])
            .collect();
        let populations = vec![500u64; 13];
        let result = impute_missing_counts(&counts, &populations).unwrap();
        assert_eq!(result.method, Some(ImputationMethod::ObservedMedian));
        assert_eq!(result.counts[12], 6); // median of 0..=11 -> 5.5 -> 6
        assert_eq!(result.provenance[12], Provenance::ImputedDegraded);
    }

    #[test]
    fn covariate_table_validation_and_imputation() {
        let ids = vec![
            String::from("a"),
            String::from("b"),
            String::from("c"),
        ];
        let mut table = CovariateTable::new(ids).unwrap();
        table
            .push_column(
                "aboriginal_share",
                CovariateKind::Share,
                vec![Some(0.1), Some(0.4), Some(0.9)],
            )
            .unwrap();
        // Share outside [0, 1] is rejected, as is a duplicate column.
        assert!(table
            .push_column("bad_share", CovariateKind::Share, vec![Some(1.2), None, None])
            .is_err());
        assert!(table
            .push_column(
                "aboriginal_share",
                CovariateKind::Share,
                vec![Some(0.0), Some(0.0), Some(0.0)]
            )
            .is_err());
        assert!(table
            .push_column(
                "neg",
                CovariateKind::Count,
                vec![Some(-1.0), Some(0.0), Some(1.0)]
            )
            .is_err());
        // Wrong cell count.
        assert!(table
            .push_column("short", CovariateKind::Count, vec![Some(1.0)])
            .is_err());
        assert!(CovariateTable::new(vec![String::from("x"), String::from("x")]).is_err());

        table
            .push_column(
                "pharmacy",
                CovariateKind::Count,
                vec![Some(3.0), None, Some(1.0)],
            )
            .unwrap();
        assert_eq!(
            table.missing_cells(),
            vec![(String::from("b"), String::from("pharmacy"))]
        );

        // Imputation (median path here: 2 observed) fills the gap, flags
        // it, and leaves the observed cells alone.
        let outcome = table.impute_column("pharmacy", &[100, 200, 300]).unwrap();
        assert_eq!(outcome.method, Some(ImputationMethod::ObservedMedian));
        assert_eq!(outcome.imputed_regions, vec![String::from("b")]);
        let col = table.column("pharmacy").unwrap();
        assert_eq!(col.cells[0].unwrap().value, 3.0);
        assert_eq!(col.cells[0].unwrap().provenance, Provenance::Observed);
        assert_eq!(col.cells[1].unwrap().value, 2.0);
        assert_eq!(
            col.cells[1].unwrap().provenance,
            Provenance::ImputedDegraded
        );
        assert!(table.missing_cells().is_empty());

        // Shares cannot go through the count model.
        assert!(table
            .impute_column("aboriginal_share", &[100, 200, 300])
            .is_err());
        assert!(table.impute_column("pharmacy", &[100, 200]).is_err());
    }

    #[test]
    fn events_roll_up_to_consistent_series() {
        let ev = |region: &str, year: i32, status: Option<&str>| EventRecord {
            region_id: region.to_string(),
            year,
            indigenous_status: status.map(|s| s.to_string()),
            age_band: None,
        };
        let events = vec![
            ev("a", 2009, Some("indigenous")),
            ev("a", 2009, Some("non-indigenous")),
            ev("a", 2010, None),
            ev("b", 2009, Some("indigenous")),
            ev("b", 2011, Some("indigenous")),
            ev("b", 2011, Some("indigenous")),
        ];
        let agg = aggregate_events(&events).unwrap();
        assert_eq!(
            agg.cell_counts,
            vec![
                EeCount { region_id: "a".to_string(), year: 2009, count: 2 },
                EeCount { region_id: "a".to_string(), year: 2010, count: 1 },
                EeCount { region_id: "b".to_string(), year: 2009, count: 1 },
                EeCount { region_id: "b".to_string(), year: 2011, count: 2 },
            ]
        );
        assert_eq!(agg.annual_totals, vec![(2009, 3), (2010, 1), (2011, 2)]);
        // Totals conserve the record count.
        let cells: u64 = agg.cell_counts.iter().map(|c| c.count).sum();
        let annual: u64 = agg.annual_totals.iter().map(|(_, c)| c).sum();
        assert_eq!(cells, events.len() as u64);
        assert_eq!(annual, events.len() as u64);
        // Status series only covers records that carry a status.
        let status: u64 = agg.status_counts.iter().map(|c| c.count).sum();
        assert_eq!(status, 5);
        assert_eq!(
            agg.status_counts[0],
            StatusCount {
                region_id: "a".to_string(),
                status: "indigenous".to_string(),
                year: 2009,
                count: 1
            }
        );
        assert!(aggregate_events(&[ev("", 2009, None)]).is_err());
    }

    #[test]
    fn panel_is_dense_with_structural_zeros() {
        let regions = vec![square("a", 0.0, 0.0, 120), square("b", 1.0, 0.0, 80)];
        let mut table =
            CovariateTable::new(vec![String::from("a"), String::from("b")]).unwrap();
        table
            .push_column(
                "income",
                CovariateKind::Value,
                vec![Some(410.5), Some(395.0)],
            )
            .unwrap();
        table
            .push_observed_counts("pharmacy", &[3, 0])
            .unwrap();
        let ee = vec![EeCount {
            region_id: "b".to_string(),
            year: 2010,
            count: 1,
        }];
        let panel =
            build_panel(&ee, &table, &regions, 2009..=2011, OffsetSource::Population)
                .unwrap();
        assert_eq!(panel.n_rows(), 6);
        assert_eq!(panel.n_regions(), 2);
        assert_eq!(panel.n_years(), 3);
        let total: u64 = panel.rows.iter().map(|r| r.count).sum();
        assert_eq!(total, 1);
        let hit = panel
            .rows
            .iter()
            .find(|r| r.region_index == 1 && r.year_index == 1)
            .unwrap();
        assert_eq!(hit.count, 1);
        assert_eq!(hit.offset, 80.0);
        // Census covariates are replicated across the years of a region.
        for row in &panel.rows {
            let expect = if row.region_index == 0 {
                [410.5, 3.0]
            } else {
                [395.0, 0.0]
            };
            assert_eq!(row.covariates, expect);
        }
        // Count columns are flagged for the log transform, values are not.
        assert_eq!(panel.covariate_names, vec!["income", "pharmacy"]);
        assert_eq!(panel.transform_log, vec![false, true]);

        // Offset source None puts every row at exposure 1.
        let unit = build_panel(&ee, &table, &regions, 2009..=2011, OffsetSource::None)
            .unwrap();
        assert!(unit.rows.iter().all(|r| r.offset == 1.0));
    }

    #[test]
    fn panel_rejections() {
        let regions = vec![square("a", 0.0, 0.0, 120), square("b", 1.0, 0.0, 80)];
        let ids = vec![String::from("a"), String::from("b")];
        let mut table = CovariateTable::new(ids).unwrap();
        table
            .push_column("x", CovariateKind::Value, vec![Some(1.0), None])
            .unwrap();

        // Remaining covariate gap.
        let err = build_panel(&[], &table, &regions, 2009..=2010, OffsetSource::None)
            .unwrap_err();
        assert!(alloc::format!("{err}").contains("b/x"));

        let mut table =
            CovariateTable::new(vec![String::from("a"), String::from("b")]).unwrap();
        table
            .push_column("x", CovariateKind::Value, vec![Some(1.0), Some(2.0)])
            .unwrap();

        // Unknown region in the event counts, named in the error.
        let stray = vec![EeCount {
            region_id: "zzz".to_string(),
            year: 2009,
            count: 2,
        }];
        let err = build_panel(&stray, &table, &regions, 2009..=2010, OffsetSource::None)
            .unwrap_err();
        assert!(alloc::format!("{err}").contains("zzz"));

        // Year outside the span.
        let late = vec![EeCount {
            region_id: "a".to_string(),
            year: 2030,
            count: 1,
        }];
        assert!(
            build_panel(&late, &table, &regions, 2009..=2010, OffsetSource::None).is_err()
        );

        // Zero population cannot carry the offset.
        let zero_pop = vec![square("a", 0.0, 0.0, 120), square("b", 1.0, 0.0, 0)];
        assert!(build_panel(&[], &table, &zero_pop, 2009..=2010, OffsetSource::Population)
            .is_err());
        assert!(
            build_panel(&[], &table, &zero_pop, 2009..=2010, OffsetSource::None).is_ok()
        );

        // Covariate table that does not know one of the regions.
        let partial = CovariateTable::new(vec![String::from("a")])
            .and_then(|mut t| {
                t.push_column("x", CovariateKind::Value, vec![Some(1.0)])?;
                Ok(t)
            })
            .unwrap();
        let err = build_panel(&[], &partial, &regions, 2009..=2010, OffsetSource::None)
            .unwrap_err();
        assert!(alloc::format!("{err}").contains('b'));

        // Empty year range.
        assert!(build_panel(&[], &table, &regions, 2011..=2009, OffsetSource::None)
            .is_err());
    }

    #[test]
    fn occupation_classes_follow_the_fixed_lists() {
        assert_eq!(classify_occupation("labourers"), OccupationClass::BlueCollar);
        assert_eq!(
            classify_occupation("Technicians and Trades Workers"),
            OccupationClass::BlueCollar
        );
        assert_eq!(
            classify_occupation("community and personal service workers"),
            OccupationClass::BlueCollar
        );
        assert_eq!(classify_occupation("managers"), OccupationClass::WhiteCollar);
        assert_eq!(
            classify_occupation(" Sales Workers "),
            OccupationClass::WhiteCollar
        );
        assert_eq!(
            classify_occupation("clerical and administrative staff"),
            OccupationClass::WhiteCollar
        );
        // Groups outside both lists stay unclassified rather than being
        // guessed at.
        assert_eq!(classify_occupation("astronaut"), OccupationClass::Unclassified);
        assert_eq!(
            classify_occupation("professionals"),
            OccupationClass::Unclassified
        );

        let tally = tally_occupations(
            ["labourers", "managers", "astronaut", "sales workers"].into_iter(),
        );
        assert_eq!(
            tally,
            OccupationTally {
                blue_collar: 1,
                white_collar: 2,
                unclassified: 1
            }
        );
    }
}
