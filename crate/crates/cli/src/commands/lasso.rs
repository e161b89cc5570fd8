//! `lasso`: cross-validated NB-LASSO over the panel covariates — the full
//! CV curve plus the selected-coefficient table.

use stareal_core::glm::{cv_select_lambda, lasso_nb_path, prepare_covariates, LassoPath};

use crate::commands::Ctx;
use crate::error::{CliError, CliResult, RunStatus};
use crate::io;

pub const CURVE_HEADER: [&str; 4] = ["Lambda", "Mean Deviance", "SE Deviance", "Nonzero"];
pub const SELECTED_HEADER: [&str; 2] = ["Variable", "Coefficient"];

/// Fit the cross-validated path under the configured grid size. The
/// default grid (100 points over three decades below the data's lambda_max)
/// comes from the solver; other sizes rebuild the same shape after probing
/// lambda_max.
pub fn fit_path(ctx: &Ctx, prepared: &stareal_core::glm::PanelDataset) -> CliResult<LassoPath> {
    let cfg = &ctx.config.lasso;
    let grid: Option<Vec<f64>> = if cfg.grid_size == 100 {
        None
    } else {
        let probe = lasso_nb_path(prepared, cfg.use_offset, None)?;
        let lambda_max = probe.lambdas[0];
        let g = cfg.grid_size;
        Some(
            (0..g)
                .map(|k| lambda_max * 10f64.powf(-3.0 * k as f64 / (g - 1) as f64))
                .collect(),
        )
    };
    Ok(cv_select_lambda(
        prepared,
        cfg.use_offset,
        cfg.folds,
        cfg.seed,
        grid.as_deref(),
    )?)
}

pub fn run(ctx: &Ctx) -> CliResult<RunStatus> {
    let cfg = &ctx.config;
    let regions = ctx.load_regions()?;
    let region_ids: Vec<String> = regions.iter().map(|r| r.id.clone()).collect();
    let loaded = ctx.load_panel(&region_ids)?;
    let prepared = prepare_covariates(&loaded.panel, cfg.panel.log_shift)?;

    let path = fit_path(ctx, &prepared)?;
    let cv = path
        .cv
        .as_ref()
        .ok_or_else(|| CliError::internal("cross-validation produced no curves"))?;

    let mut curve_rows = Vec::with_capacity(path.lambdas.len());
    for (l, &lambda) in path.lambdas.iter().enumerate() {
        let nonzero = path.coefficients[l].iter().filter(|&&c| c != 0.0).count();
        curve_rows.push(vec![
            format!("{lambda}"),
            format!("{}", cv.mean_deviance[l]),
            format!("{}", cv.se_deviance[l]),
            nonzero.to_string(),
        ]);
    }
    let curve_meta = ctx
        .meta("lasso")
        .with("folds", cv.n_folds)
        .with("lambda-min", cv.lambda_min)
        .with("lambda-1se", cv.lambda_1se);
    io::write_csv(&ctx.out("lasso_cv.csv"), &curve_meta, &CURVE_HEADER, &curve_rows)?;

    let selected =
        stareal_core::glm::select_features(&path, cfg.lambda_rule(), &prepared.covariate_names)?;
    let mut rows = vec![vec!["Intercept".to_string(), format!("{:.4}", selected.intercept)]];
    for feature in &selected.features {
        rows.push(vec![
            feature.name.clone(),
            format!("{:.4}", feature.coefficient),
        ]);
    }
    let rule_name = match cfg.lasso.rule {
        crate::config::LambdaRuleSetting::OneSe => "one-se",
        crate::config::LambdaRuleSetting::Min => "min",
    };
    let selected_meta = ctx
        .meta("lasso")
        .with("rule", rule_name)
        .with("lambda", selected.lambda)
        .with("theta", format!("{:.4}", selected.theta));
    io::write_csv(
        &ctx.out("lasso_selected.csv"),
        &selected_meta,
        &SELECTED_HEADER,
        &rows,
    )?;
    Ok(RunStatus::clean())
}
