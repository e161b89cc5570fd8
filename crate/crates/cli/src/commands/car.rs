//! `car`: fit the three model variants (fixed effects only; + spatial;
//! + spatial & temporal), emit the comparison table, the full posterior
//! summary of the DIC-best variant, and its relative-risk surfaces.

use stareal_core::carmodel::{
    assemble_fit, compare_models, fit_car, relative_risk, CarModelSpec, CarProblem, ChainDraws,
    FitResult, McmcSettings, PosteriorSummary, RrMode,
};
use stareal_core::glm::{prepare_covariates, PanelDataset};
use stareal_core::lattice::AdjacencyGraph;

use crate::commands::{lasso, Ctx};
use crate::config::RrModeSetting;
use crate::error::{CliError, CliResult, RunStatus};
use crate::geojson;
use crate::io;

pub const COMPARISON_HEADER: [&str; 5] =
    ["Model", "Effects", "DIC", "Marginal Log-likelihood", "Dbar"];
pub const SUMMARY_HEADER: [&str; 8] = [
    "Variable",
    "Mean",
    "SD",
    "2.5% Quant",
    "Median",
    "97.5% Quant",
    "Mode",
    "KLD",
];
pub const RR_HEADER: [&str; 7] = ["region_id", "year", "mean", "sd", "q2_5", "median", "q97_5"];

/// Run the chains of one fit across the thread budget. Chains own disjoint
/// RNG streams keyed by their index, so the result is bit-identical to the
/// sequential path.
pub fn fit_threaded(
    spec: CarModelSpec,
    data: &PanelDataset,
    graph: &AdjacencyGraph,
    settings: &McmcSettings,
    threads: usize,
) -> CliResult<FitResult> {
    if threads <= 1 || settings.chains <= 1 {
        return Ok(fit_car(spec, data, graph, settings)?);
    }
    let problem = CarProblem::new(spec, data, graph)?;
    let n = settings.chains as usize;
    let workers = threads.min(n);
    let outputs: Vec<ChainDraws> = std::thread::scope(|scope| {
        let problem = &problem;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut local = Vec::new();
                    let mut c = w;
                    while c < n {
                        local.push((c, problem.run_chain(settings, c as u32)));
                        c += workers;
                    }
                    local
                })
            })
            .collect();
        let mut slots: Vec<Option<ChainDraws>> = (0..n).map(|_| None).collect();
        for handle in handles {
            for (c, draws) in handle.join().expect("chain worker panicked") {
                slots[c] = Some(draws);
            }
        }
        slots
            .into_iter()
            .map(|d| d.expect("every chain index was assigned"))
            .collect()
    });
    Ok(assemble_fit(&problem, settings, &outputs)?)
}

fn summary_row(name: &str, s: &PosteriorSummary) -> Vec<String> {
    vec![
        name.to_string(),
        format!("{:.3}", s.mean),
        format!("{:.3}", s.sd),
        format!("{:.3}", s.q2_5),
        format!("{:.3}", s.median),
        format!("{:.3}", s.q97_5),
        format!("{:.3}", s.mode),
        format!("{:.3}", s.kld),
    ]
}

fn max_fixed_rhat(fit: &FitResult) -> f64 {
    fit.rhat
        .iter()
        .filter(|(name, _)| fit.fixed_names.iter().any(|f| f == name))
        .map(|&(_, r)| r)
        .fold(f64::NAN, f64::max)
}

pub fn run(ctx: &Ctx) -> CliResult<RunStatus> {
    let cfg = &ctx.config;
    let regions = ctx.load_regions()?;
    let region_ids: Vec<String> = regions.iter().map(|r| r.id.clone()).collect();
    let graph = ctx.build_graph(&regions)?;
    let loaded = ctx.load_panel(&region_ids)?;
    let prepared = prepare_covariates(&loaded.panel, cfg.panel.log_shift)?;

    // The covariate set: explicit in the configuration, otherwise the
    // LASSO selection.
    let covariates: Vec<String> = if cfg.car.covariates.is_empty() {
        let path = lasso::fit_path(ctx, &prepared)?;
        let selected = stareal_core::glm::select_features(
            &path,
            cfg.lambda_rule(),
            &prepared.covariate_names,
        )?;
        selected.features.iter().map(|f| f.name.clone()).collect()
    } else {
        for name in &cfg.car.covariates {
            if !prepared.covariate_names.contains(name) {
                return Err(CliError::input(format_args!(
                    "car.covariates names {name:?}, which is not a panel covariate (have: {})",
                    prepared.covariate_names.join(", ")
                )));
            }
        }
        cfg.car.covariates.clone()
    };

    let settings = cfg.mcmc_settings();
    let variants = [(false, false), (true, false), (true, true)];
    let mut fits: Vec<FitResult> = Vec::with_capacity(variants.len());
    for &(spatial, temporal) in &variants {
        let spec = cfg.car_spec(spatial, temporal, covariates.clone());
        fits.push(fit_threaded(spec, &prepared, &graph, &settings, ctx.threads)?);
    }

    // ---- comparison table (one row per variant) ------------------------
    let any_unconverged = fits.iter().any(|f| !f.converged);
    let mut header: Vec<&str> = COMPARISON_HEADER.to_vec();
    if any_unconverged {
        header.push("Convergence");
    }
    let mut rows = Vec::with_capacity(fits.len());
    for (k, fit) in fits.iter().enumerate() {
        let mut row = vec![
            format!("Model {}", k + 1),
            fit.spec.effects_label().to_string(),
            format!("{:.1}", fit.dic),
            format!("{:.1}", fit.marginal_loglik_estimate),
            format!("{:.1}", fit.dbar),
        ];
        if any_unconverged {
            row.push(if fit.converged {
                "converged".to_string()
            } else {
                format!("max R-hat {:.3}", max_fixed_rhat(fit))
            });
        }
        rows.push(row);
    }
    let mut comparison_meta = ctx
        .meta("car")
        .with("covariates", covariates.join(", "))
        .with(
            "mcmc",
            format!(
                "chains={} burn-in={} draws={} thin={}",
                settings.chains, settings.burn_in, settings.draws, settings.thin
            ),
        );
    let unstable: Vec<String> = fits
        .iter()
        .enumerate()
        .filter(|(_, f)| f.marginal_unstable)
        .map(|(k, _)| format!("Model {}", k + 1))
        .collect();
    if !unstable.is_empty() {
        comparison_meta = comparison_meta.with("marginal-loglik-unstable", unstable.join(", "));
    }
    io::write_csv(
        &ctx.out("car_comparison.csv"),
        &comparison_meta,
        &header,
        &rows,
    )?;

    // ---- full summary of the DIC-best variant --------------------------
    let order = compare_models(&fits)?;
    let best_index = order[0];
    let best = &fits[best_index];

    let mut summary_rows = Vec::new();
    for (name, summary) in best.fixed_names.iter().zip(&best.summaries) {
        let label = if name == "(intercept)" {
            "(Intercept)"
        } else {
            name.as_str()
        };
        summary_rows.push(summary_row(label, summary));
    }
    if let Some(s) = &best.theta_summary {
        summary_rows.push(summary_row("theta", s));
    }
    if let Some(s) = &best.tau_s_summary {
        summary_rows.push(summary_row("tau_s", s));
    }
    if let Some(s) = &best.tau_gamma_summary {
        summary_rows.push(summary_row("tau_gamma", s));
    }
    let summary_meta = ctx
        .meta("car")
        .with("model", format!("Model {}", best_index + 1))
        .with("effects", best.spec.effects_label());
    io::write_csv(
        &ctx.out("car_summary.csv"),
        &summary_meta,
        &SUMMARY_HEADER,
        &summary_rows,
    )?;

    // ---- relative-risk surfaces -----------------------------------------
    let mode = match cfg.rr.mode {
        RrModeSetting::Homogeneous => RrMode::VsHomogeneous,
        RrModeSetting::Baseline => RrMode::VsBaseline,
    };
    let surface = relative_risk(best, &prepared, &graph, mode)?;

    let mut rr_rows = Vec::with_capacity(surface.cells.len());
    for cell in &surface.cells {
        let s = &cell.summary;
        rr_rows.push(vec![
            region_ids[cell.region_index].clone(),
            loaded.year_of(cell.year_index).to_string(),
            format!("{:.4}", s.mean),
            format!("{:.4}", s.sd),
            format!("{:.4}", s.q2_5),
            format!("{:.4}", s.median),
            format!("{:.4}", s.q97_5),
        ]);
    }
    let mut rr_meta = ctx.meta("car").with(
        "rr-mode",
        match mode {
            RrMode::VsHomogeneous => "homogeneous",
            RrMode::VsBaseline => "baseline",
        },
    );
    if let Some(b) = surface.baseline {
        rr_meta = rr_meta.with("baseline-region", &region_ids[b]);
    }
    if surface.skipped_draws > 0 {
        rr_meta = rr_meta.with("skipped-draws", surface.skipped_draws);
    }
    io::write_csv(&ctx.out("rr_surface.csv"), &rr_meta, &RR_HEADER, &rr_rows)?;

    let mut rr_mean = vec![f64::NAN; regions.len()];
    let mut rr_sd = vec![f64::NAN; regions.len()];
    for region in &surface.region_means {
        rr_mean[region.region_index] = region.mean;
        rr_sd[region.region_index] = region.sd;
    }
    let map = geojson::feature_collection(&rr_meta, &regions, false, |i| {
        vec![("rr_mean", rr_mean[i]), ("rr_sd", rr_sd[i])]
    })?;
    io::write_atomic(&ctx.out("rr_map.geojson"), map.as_bytes())?;

    let mut status = RunStatus::clean();
    for (k, fit) in fits.iter().enumerate() {
        if !fit.converged {
            status.warnings.push(format!(
                "Model {} ({}) did not converge: max fixed-effect R-hat {:.3}",
                k + 1,
                fit.spec.effects_label(),
                max_fixed_rhat(fit)
            ));
        }
    }
    Ok(status)
}
