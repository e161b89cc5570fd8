//! `synth`: generate a complete synthetic input bundle — geometry with a
//! known contiguity graph, the ground-truth panel, service points, income
//! tables and raw event rows — plus the generating parameters, so recovery
//! runs have something to check against.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::Serialize;
use stareal_core::fusion::point_in_polygon;
use stareal_core::lattice::Region;
use stareal_core::rngutil::stream_rng;
use stareal_core::synth::{generate, SyntheticBundle};

use crate::commands::Ctx;
use crate::error::{CliError, CliResult, RunStatus};
use crate::geojson;
use crate::io;

// The bundle generator itself burns sub-streams 0-5 of the scenario seed;
// the fabricated survey files draw on the streams above them.
const POINTS_STREAM: u64 = 6;
const INCOME_STREAM: u64 = 7;

const CATEGORY_CYCLE: usize = stareal_core::fusion::ServiceCategory::ALL.len();

/// Weekly income bracket ladder used for the synthetic tables, census
/// style: closed dollar ranges ($1-$149, $150-$299, ...) with an
/// open-topped final bracket.
const BRACKET_LOWERS: [f64; 7] = [1.0, 150.0, 300.0, 650.0, 1000.0, 1750.0, 3000.0];
const BRACKET_SHARES: [f64; 7] = [0.05, 0.10, 0.20, 0.25, 0.20, 0.15, 0.05];

fn bounding_box(region: &Region) -> [f64; 4] {
    let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for point in region.rings.iter().flatten() {
        bb[0] = bb[0].min(point[0]);
        bb[1] = bb[1].min(point[1]);
        bb[2] = bb[2].max(point[0]);
        bb[3] = bb[3].max(point[1]);
    }
    bb
}

fn write_points(ctx: &Ctx, bundle: &SyntheticBundle) -> CliResult<()> {
    let mut rng = stream_rng(bundle.scenario.seed, POINTS_STREAM);
    let per_region = ctx.config.synth.points_per_region;
    let categories = stareal_core::fusion::ServiceCategory::ALL;

    let mut rows = Vec::new();
    let mut k = 0usize;
    for region in &bundle.regions {
        let bb = bounding_box(region);
        for _ in 0..per_region {
            // The cells are convex, so rejection sampling from the bounding
            // box terminates quickly; fall back to the vertex mean (interior
            // for a convex cell) if it somehow does not.
            let mut point = None;
            for _ in 0..1000 {
                let x = bb[0] + (bb[2] - bb[0]) * rng.random::<f64>();
                let y = bb[1] + (bb[3] - bb[1]) * rng.random::<f64>();
                if point_in_polygon([x, y], &region.rings)? {
                    point = Some([x, y]);
                    break;
                }
            }
            let point = match point {
                Some(p) => p,
                None => {
                    let ring = &region.rings[0];
                    let n = (ring.len() - 1) as f64;
                    let sx: f64 = ring[..ring.len() - 1].iter().map(|p| p[0]).sum();
                    let sy: f64 = ring[..ring.len() - 1].iter().map(|p| p[1]).sum();
                    [sx / n, sy / n]
                }
            };
            rows.push(vec![
                format!("{}", point[0]),
                format!("{}", point[1]),
                categories[k % CATEGORY_CYCLE].name().to_string(),
                format!("p{k:06}"),
            ]);
            k += 1;
        }
    }
    io::write_csv(
        &ctx.out("points.csv"),
        &ctx.meta("synth"),
        &["longitude", "latitude", "category", "source_id"],
        &rows,
    )
}

fn write_income(ctx: &Ctx, bundle: &SyntheticBundle) -> CliResult<()> {
    let mut rng = stream_rng(bundle.scenario.seed, INCOME_STREAM);
    let mut bracket_rows = Vec::new();
    let mut special_rows = Vec::new();
    for region in &bundle.regions {
        let population = region.population as f64;
        // Jitter the base shares so average income varies across regions;
        // roughly 90% of residents state an income.
        let weights: Vec<f64> = BRACKET_SHARES
            .iter()
            .map(|s| s * (0.5 + rng.random::<f64>()))
            .collect();
        let total: f64 = weights.iter().sum();
        for (b, &lower) in BRACKET_LOWERS.iter().enumerate() {
            let frequency = (population * 0.9 * weights[b] / total).round() as u64;
            let upper = BRACKET_LOWERS
                .get(b + 1)
                .map(|u| format!("{}", u - 1.0))
                .unwrap_or_default();
            bracket_rows.push(vec![
                region.id.clone(),
                format!("{lower}"),
                upper,
                frequency.to_string(),
            ]);
        }
        special_rows.push(vec![
            region.id.clone(),
            ((population * 0.01).round() as u64).to_string(),
            ((population * 0.04).round() as u64).to_string(),
            ((population * 0.05).round() as u64).to_string(),
        ]);
    }
    io::write_csv(
        &ctx.out("income.csv"),
        &ctx.meta("synth"),
        &["region_id", "lower", "upper", "frequency"],
        &bracket_rows,
    )?;
    io::write_csv(
        &ctx.out("income_special.csv"),
        &ctx.meta("synth"),
        &["region_id", "negative", "nil", "not_stated"],
        &special_rows,
    )
}

fn write_events(ctx: &Ctx, bundle: &SyntheticBundle) -> CliResult<()> {
    let base_year = ctx.config.panel.year_start;
    const AGE_BANDS: [&str; 3] = ["0-4", "5-9", "10-14"];
    let mut rows = Vec::new();
    let mut k = 0usize;
    for row in &bundle.panel.rows {
        let region_id = &bundle.regions[row.region_index].id;
        let year = base_year + row.year_index as i32;
        for _ in 0..row.count {
            let month = (k * 5) % 12 + 1;
            let day = (k * 11) % 28 + 1;
            let status = if k % 4 == 0 {
                "indigenous"
            } else {
                "non-indigenous"
            };
            rows.push(vec![
                region_id.clone(),
                format!("{year}-{month:02}-{day:02}"),
                status.to_string(),
                AGE_BANDS[k % AGE_BANDS.len()].to_string(),
            ]);
            k += 1;
        }
    }
    io::write_csv(
        &ctx.out("events.csv"),
        &ctx.meta("synth"),
        &["region_id", "date", "indigenous_status", "age_band"],
        &rows,
    )
}

#[derive(Serialize)]
struct Truth<'a> {
    n_regions: usize,
    n_years: usize,
    intercept: f64,
    slopes: &'a [f64],
    tau_s: f64,
    tau_gamma: f64,
    theta: f64,
    seed: u64,
    covariate_correlation: &'a [Vec<f64>],
    region_ids: Vec<&'a str>,
    populations: Vec<u64>,
    edges: Vec<[usize; 2]>,
    spatial_effects: &'a [f64],
    temporal_effects: &'a [f64],
}

fn write_truth(ctx: &Ctx, bundle: &SyntheticBundle) -> CliResult<()> {
    let scenario = &bundle.scenario;
    let truth = Truth {
        n_regions: scenario.n_regions,
        n_years: scenario.n_years,
        intercept: scenario.intercept,
        slopes: &scenario.slopes,
        tau_s: scenario.tau_s,
        tau_gamma: scenario.tau_gamma,
        theta: scenario.theta,
        seed: scenario.seed,
        covariate_correlation: &scenario.covariate_correlation,
        region_ids: bundle.regions.iter().map(|r| r.id.as_str()).collect(),
        populations: bundle.regions.iter().map(|r| r.population).collect(),
        edges: bundle.graph.edges().iter().map(|&(i, j)| [i, j]).collect(),
        spatial_effects: &bundle.spatial,
        temporal_effects: &bundle.temporal,
    };
    let body = toml::to_string_pretty(&truth)
        .map_err(|e| CliError::internal(format_args!("serialising truth: {e}")))?;
    io::write_text(&ctx.out("truth.toml"), &ctx.meta("synth"), &body)
}

pub fn run(ctx: &Ctx) -> CliResult<RunStatus> {
    let scenario = ctx.config.scenario()?;
    let bundle = generate(&scenario)?;
    let region_ids: Vec<String> = bundle.regions.iter().map(|r| r.id.clone()).collect();

    let geometry = geojson::feature_collection(&ctx.meta("synth"), &bundle.regions, true, |_| {
        Vec::new()
    })?;
    io::write_atomic(&ctx.out("geometry.geojson"), geometry.as_bytes())?;

    io::write_panel(
        &ctx.out("panel.csv"),
        &ctx.meta("synth"),
        &bundle.panel,
        &region_ids,
        ctx.config.panel.year_start,
    )?;

    write_points(ctx, &bundle)?;
    write_income(ctx, &bundle)?;
    write_events(ctx, &bundle)?;
    write_truth(ctx, &bundle)?;

    let mut note = String::new();
    let _ = writeln!(
        note,
        "regions: {}, years: {}, edges: {}",
        scenario.n_regions,
        scenario.n_years,
        bundle.graph.edges().len()
    );
    io::write_text(&ctx.out("synth_report.txt"), &ctx.meta("synth"), &note)?;
    Ok(RunStatus::clean())
}
