//! `trends`: descriptive series from the raw events — annual totals, the
//! top-k regions by total admissions, and per-status annual series.

use std::collections::BTreeMap;

use stareal_core::fusion::EventAggregate;

use crate::commands::Ctx;
use crate::error::{CliError, CliResult, RunStatus};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupBy {
    /// Annual totals across all regions.
    Year,
    /// Annual series of the k regions with the most admissions.
    RegionTopK,
    /// Annual series per status value.
    Status,
}

/// Years covered by the output: the configured panel span widened to any
/// observed event years, so zero years inside the span appear explicitly
/// and no event is silently dropped.
fn year_range(ctx: &Ctx, agg: &EventAggregate) -> (i32, i32) {
    let mut lo = ctx.config.panel.year_start;
    let mut hi = ctx.config.panel.year_end;
    for &(year, _) in &agg.annual_totals {
        lo = lo.min(year);
        hi = hi.max(year);
    }
    (lo, hi)
}

fn write_year(ctx: &Ctx, agg: &EventAggregate) -> CliResult<()> {
    let (lo, hi) = year_range(ctx, agg);
    let by_year: BTreeMap<i32, u64> = agg.annual_totals.iter().copied().collect();
    let rows: Vec<Vec<String>> = (lo..=hi)
        .map(|y| vec![y.to_string(), by_year.get(&y).copied().unwrap_or(0).to_string()])
        .collect();
    io::write_csv(
        &ctx.out("trends_year.csv"),
        &ctx.meta("trends"),
        &["Year", "Count"],
        &rows,
    )
}

fn write_regions(ctx: &Ctx, agg: &EventAggregate) -> CliResult<()> {
    let (lo, hi) = year_range(ctx, agg);
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    let mut cells: BTreeMap<(&str, i32), u64> = BTreeMap::new();
    for cell in &agg.cell_counts {
        *totals.entry(&cell.region_id).or_insert(0) += cell.count;
        *cells.entry((&cell.region_id, cell.year)).or_insert(0) += cell.count;
    }
    // Highest totals first; ties go to the lexicographically smaller id.
    let mut ranked: Vec<(&str, u64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(ctx.config.trends.top_k);

    let mut rows = Vec::new();
    for (region, _) in &ranked {
        for year in lo..=hi {
            let count = cells.get(&(region, year)).copied().unwrap_or(0);
            rows.push(vec![region.to_string(), year.to_string(), count.to_string()]);
        }
    }
    io::write_csv(
        &ctx.out("trends_regions.csv"),
        &ctx.meta("trends").with("top-k", ctx.config.trends.top_k),
        &["Region", "Year", "Count"],
        &rows,
    )
}

fn write_status(ctx: &Ctx, agg: &EventAggregate) -> CliResult<()> {
    let (lo, hi) = year_range(ctx, agg);
    let mut by_status_year: BTreeMap<(&str, i32), u64> = BTreeMap::new();
    for cell in &agg.status_counts {
        *by_status_year
            .entry((cell.status.as_str(), cell.year))
            .or_insert(0) += cell.count;
    }
    let statuses: Vec<&str> = {
        let mut s: Vec<&str> = by_status_year.keys().map(|&(status, _)| status).collect();
        s.sort();
        s.dedup();
        s
    };
    let mut rows = Vec::new();
    for status in statuses {
        for year in lo..=hi {
            let count = by_status_year.get(&(status, year)).copied().unwrap_or(0);
            rows.push(vec![status.to_string(), year.to_string(), count.to_string()]);
        }
    }
    io::write_csv(
        &ctx.out("trends_status.csv"),
        &ctx.meta("trends"),
        &["Status", "Year", "Count"],
        &rows,
    )
}

pub fn run(ctx: &Ctx, group_by: Option<GroupBy>) -> CliResult<RunStatus> {
    let events = io::read_events(&ctx.config.inputs.events)?;
    let agg = events.aggregate()?;

    match group_by {
        Some(GroupBy::Year) => write_year(ctx, &agg)?,
        Some(GroupBy::RegionTopK) => write_regions(ctx, &agg)?,
        Some(GroupBy::Status) => {
            if agg.status_counts.is_empty() {
                return Err(CliError::input(format_args!(
                    "{}: status series requested but the events carry no status column",
                    ctx.config.inputs.events.display()
                )));
            }
            write_status(ctx, &agg)?;
        }
        None => {
            // All series; the status one only where the data supports it.
            write_year(ctx, &agg)?;
            write_regions(ctx, &agg)?;
            if !agg.status_counts.is_empty() {
                write_status(ctx, &agg)?;
            }
        }
    }
    Ok(RunStatus::clean())
}
