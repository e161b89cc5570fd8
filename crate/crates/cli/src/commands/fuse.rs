//! `fuse`: run the data-fusion stage end to end — aggregate service points
//! into regions, estimate average income from bracket tables, roll up event
//! records, impute covariate gaps — and write the modelling panel plus a
//! plain-text fusion report.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use stareal_core::fusion::{
    aggregate_points, build_panel, estimate_average_income, CovariateKind, CovariateTable,
    EeCount, ServiceCategory,
};

use crate::commands::Ctx;
use crate::error::{CliResult, RunStatus};
use crate::io;

/// Income joins the five service-count columns in the covariate table.
pub const INCOME_COLUMN: &str = "income";

pub fn run(ctx: &Ctx) -> CliResult<RunStatus> {
    let cfg = &ctx.config;
    let regions = ctx.load_regions()?;
    let graph = ctx.build_graph(&regions)?;
    let region_ids: Vec<String> = regions.iter().map(|r| r.id.clone()).collect();

    let points = io::read_points(&cfg.inputs.points)?;
    let assigned = aggregate_points(&points, &regions)?;

    let income_table = io::read_income(&cfg.inputs.income, &cfg.inputs.income_special)?;
    let income = estimate_average_income(&income_table, cfg.panel.open_top_multiplier)?;

    let events = io::read_events(&cfg.inputs.events)?.aggregate()?;

    // Events outside the panel span or in regions absent from the geometry
    // cannot enter the panel; drop them and account for every one in the
    // report rather than failing the whole run.
    let span = cfg.panel.year_start..=cfg.panel.year_end;
    let known: BTreeSet<&str> = region_ids.iter().map(|s| s.as_str()).collect();
    let mut kept: Vec<EeCount> = Vec::new();
    let mut dropped_outside_span = 0u64;
    let mut dropped_unknown = 0u64;
    let mut unknown_regions: BTreeSet<String> = BTreeSet::new();
    for cell in &events.cell_counts {
        if !known.contains(cell.region_id.as_str()) {
            dropped_unknown += cell.count;
            unknown_regions.insert(cell.region_id.clone());
        } else if !span.contains(&cell.year) {
            dropped_outside_span += cell.count;
        } else {
            kept.push(cell.clone());
        }
    }

    let mut table = CovariateTable::new(region_ids.clone())?;
    for category in ServiceCategory::ALL {
        let counts: Vec<u64> = (0..regions.len())
            .map(|i| assigned.counts[i][category.index()])
            .collect();
        table.push_observed_counts(category.name(), &counts)?;
    }
    let income_cells: Vec<Option<f64>> = regions
        .iter()
        .map(|r| income.get(&r.id).copied().flatten())
        .collect();
    table.push_column(INCOME_COLUMN, CovariateKind::Value, income_cells)?;

    let populations: Vec<u64> = regions.iter().map(|r| r.population).collect();
    let gap_columns: BTreeSet<String> = table
        .missing_cells()
        .into_iter()
        .map(|(_, column)| column)
        .collect();
    let mut imputations = Vec::new();
    for column in &gap_columns {
        imputations.push(table.impute_column(column, &populations)?);
    }

    let panel = build_panel(&kept, &table, &regions, span, cfg.offset_source())?;
    io::write_panel(
        &ctx.out("panel.csv"),
        &ctx.meta("fuse"),
        &panel,
        &region_ids,
        cfg.panel.year_start,
    )?;

    // ---- fusion report -------------------------------------------------
    let mut report = String::new();
    let islands = graph.islands();
    let island_names = if islands.is_empty() {
        "none".to_string()
    } else {
        islands
            .iter()
            .map(|&i| region_ids[i].as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let _ = writeln!(report, "regions: {}", regions.len());
    let _ = writeln!(report, "islands: {island_names}");
    let _ = writeln!(
        report,
        "years: {}-{}",
        cfg.panel.year_start, cfg.panel.year_end
    );
    let _ = writeln!(report, "panel rows: {}", panel.n_rows());
    let _ = writeln!(
        report,
        "panel covariates: {}",
        panel.covariate_names.join(", ")
    );

    let total_events: u64 = events.annual_totals.iter().map(|&(_, c)| c).sum();
    let kept_events: u64 = kept.iter().map(|c| c.count).sum();
    let _ = writeln!(report, "events: {total_events}");
    let _ = writeln!(report, "events kept: {kept_events}");
    let _ = writeln!(
        report,
        "events dropped outside year span: {dropped_outside_span}"
    );
    let _ = write!(report, "events dropped in unknown regions: {dropped_unknown}");
    if unknown_regions.is_empty() {
        let _ = writeln!(report);
    } else {
        let names: Vec<&str> = unknown_regions.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(report, " (regions: {})", names.join(", "));
    }

    let assigned_points: u64 = assigned.counts.iter().flatten().sum();
    let _ = writeln!(report, "points assigned: {assigned_points}");
    let _ = write!(
        report,
        "points unassigned: {}",
        assigned.unassigned.iter().sum::<u64>()
    );
    if assigned.unassigned_ids.is_empty() {
        let _ = writeln!(report);
    } else {
        let shown: Vec<&str> = assigned
            .unassigned_ids
            .iter()
            .take(20)
            .map(|s| s.as_str())
            .collect();
        let suffix = if assigned.unassigned_ids.len() > shown.len() {
            ", ..."
        } else {
            ""
        };
        let _ = writeln!(report, " (ids: {}{suffix})", shown.join(", "));
    }

    let observed_income = income.values().filter(|v| v.is_some()).count();
    let _ = writeln!(
        report,
        "income estimates observed: {observed_income} of {} regions",
        regions.len()
    );
    if imputations.iter().all(|imp| imp.imputed_regions.is_empty()) {
        let _ = writeln!(report, "imputed cells: none");
    } else {
        let _ = writeln!(report, "imputed cells:");
        for imp in &imputations {
            let method = imp
                .method
                .map(|m| m.to_string())
                .unwrap_or_else(|| "none".to_string());
            for region in &imp.imputed_regions {
                let _ = writeln!(report, "  {} in region {region} ({method})", imp.column);
            }
        }
    }

    io::write_text(&ctx.out("fusion_report.txt"), &ctx.meta("fuse"), &report)?;
    Ok(RunStatus::clean())
}
