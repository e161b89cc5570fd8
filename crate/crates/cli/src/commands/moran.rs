//! `moran`: global Moran's I of the admission rate surface, one row per
//! year plus the aggregated (all-years) row, with an optional variant on
//! the geometry minus the excluded regions.

use std::collections::BTreeSet;

use stareal_core::autocorr::morans_permutation_test;
use stareal_core::lattice::{AdjacencyGraph, Region};
use stareal_core::Error;

use crate::commands::Ctx;
use crate::error::{CliError, CliResult, RunStatus};
use crate::io::LoadedPanel;

pub const HEADER: [&str; 4] = ["Year", "P-value", "Z-score", "Moran's I"];

/// Per-region count and offset matrices, `[region][year]`, densely
/// populated or rejected.
fn panel_matrices(
    loaded: &LoadedPanel,
    n_regions: usize,
) -> CliResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n_years = loaded.panel.n_years();
    let mut counts = vec![vec![f64::NAN; n_years]; n_regions];
    let mut offsets = vec![vec![f64::NAN; n_years]; n_regions];
    for row in &loaded.panel.rows {
        counts[row.region_index][row.year_index] = row.count as f64;
        offsets[row.region_index][row.year_index] = row.offset;
    }
    for (i, row) in counts.iter().enumerate() {
        for (t, value) in row.iter().enumerate() {
            if value.is_nan() {
                return Err(CliError::input(format_args!(
                    "panel has no cell for region index {i}, year {}",
                    loaded.year_of(t)
                )));
            }
        }
    }
    Ok((counts, offsets))
}

/// The tested series: aggregated rate first, then one rate surface per
/// year. Rates are counts over offsets (raw counts when the offset is 1).
fn rate_series(
    counts: &[Vec<f64>],
    offsets: &[Vec<f64>],
    loaded: &LoadedPanel,
) -> Vec<(String, Vec<f64>)> {
    let n_regions = counts.len();
    let n_years = loaded.panel.n_years();
    let mut series = Vec::with_capacity(n_years + 1);

    let aggregated: Vec<f64> = (0..n_regions)
        .map(|i| {
            let c: f64 = counts[i].iter().sum();
            let o: f64 = offsets[i].iter().sum();
            c / o
        })
        .collect();
    series.push(("aggregated".to_string(), aggregated));

    for t in 0..n_years {
        let values: Vec<f64> = (0..n_regions).map(|i| counts[i][t] / offsets[i][t]).collect();
        series.push((loaded.year_of(t).to_string(), values));
    }
    series
}

/// One output row per series entry; a constant surface (or an all-island
/// graph) yields the literal `undefined` in the three statistic columns
/// and the run continues.
fn moran_rows(
    series: &[(String, Vec<f64>)],
    graph: &AdjacencyGraph,
    permutations: u32,
    seed: u64,
) -> CliResult<Vec<Vec<String>>> {
    let mut rows = Vec::with_capacity(series.len());
    for (k, (label, values)) in series.iter().enumerate() {
        match morans_permutation_test(values, graph, permutations, seed.wrapping_add(k as u64)) {
            Ok(result) => {
                let p = result
                    .p_value_permutation
                    .unwrap_or(result.p_value_analytic);
                rows.push(vec![
                    label.clone(),
                    format!("{p:.4}"),
                    format!("{:.3}", result.z_score),
                    format!("{:.3}", result.statistic),
                ]);
            }
            Err(Error::UndefinedStatistic(_)) => {
                rows.push(vec![
                    label.clone(),
                    "undefined".to_string(),
                    "undefined".to_string(),
                    "undefined".to_string(),
                ]);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rows)
}

pub fn run(ctx: &Ctx) -> CliResult<RunStatus> {
    let cfg = &ctx.config;
    let regions = ctx.load_regions()?;
    let region_ids: Vec<String> = regions.iter().map(|r| r.id.clone()).collect();
    let graph = ctx.build_graph(&regions)?;
    let loaded = ctx.load_panel(&region_ids)?;
    let (counts, offsets) = panel_matrices(&loaded, regions.len())?;

    let series = rate_series(&counts, &offsets, &loaded);
    let rows = moran_rows(&series, &graph, cfg.moran.permutations, cfg.moran.seed)?;
    let meta = ctx
        .meta("moran")
        .with("permutations", cfg.moran.permutations)
        .with("p-value", "permutation (add-one rule); z-score analytic");
    crate::io::write_csv(&ctx.out("moran.csv"), &meta, &HEADER, &rows)?;

    if !cfg.exclusions.regions.is_empty() {
        let excluded: BTreeSet<&str> = cfg.exclusions.regions.iter().map(|s| s.as_str()).collect();
        for id in &excluded {
            if !region_ids.iter().any(|r| r == id) {
                return Err(CliError::input(format_args!(
                    "excluded region {id:?} is not in the geometry"
                )));
            }
        }
        let keep: Vec<usize> = (0..regions.len())
            .filter(|&i| !excluded.contains(region_ids[i].as_str()))
            .collect();
        if keep.len() < 2 {
            return Err(CliError::input(
                "exclusion list removes all but one region; nothing to test",
            ));
        }
        let kept_regions: Vec<Region> = keep.iter().map(|&i| regions[i].clone()).collect();
        let graph_excl = ctx.build_graph(&kept_regions)?;
        let series_excl: Vec<(String, Vec<f64>)> = series
            .iter()
            .map(|(label, values)| {
                (
                    label.clone(),
                    keep.iter().map(|&i| values[i]).collect::<Vec<f64>>(),
                )
            })
            .collect();
        let rows_excl = moran_rows(
            &series_excl,
            &graph_excl,
            cfg.moran.permutations,
            cfg.moran.seed,
        )?;
        let excluded_names: Vec<&str> = excluded.iter().copied().collect();
        let meta_excl = ctx
            .meta("moran")
            .with("permutations", cfg.moran.permutations)
            .with("p-value", "permutation (add-one rule); z-score analytic")
            .with("excluded-regions", excluded_names.join(", "));
        crate::io::write_csv(&ctx.out("moran_excluded.csv"), &meta_excl, &HEADER, &rows_excl)?;
    }

    Ok(RunStatus::clean())
}
