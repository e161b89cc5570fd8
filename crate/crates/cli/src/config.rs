//! Pipeline configuration: one TOML file with sections, every field
//! defaulted, validated up front.
//!
//! The resolved configuration (defaults filled in, command-line overrides
//! applied) is serialised back to TOML, hashed, and echoed into the output
//! directory as `run-config.toml`, so every run is self-describing and every
//! output file can reference the exact configuration by hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stareal_core::carmodel::{
    BaselineRegion, CarModelSpec, Hyperpriors, Likelihood, McmcSettings, SpatialPrior,
    TemporalPrior,
};
use stareal_core::fusion::OffsetSource;
use stareal_core::glm::LambdaRule;
use stareal_core::lattice::ContiguityRule;
use stareal_core::synth::{OffsetModel, SyntheticScenario};

use crate::error::{CliError, CliResult};

mod defaults {
    use std::path::PathBuf;

    pub fn geometry() -> PathBuf {
        PathBuf::from("geometry.geojson")
    }
    pub fn points() -> PathBuf {
        PathBuf::from("points.csv")
    }
    pub fn income() -> PathBuf {
        PathBuf::from("income.csv")
    }
    pub fn income_special() -> PathBuf {
        PathBuf::from("income_special.csv")
    }
    pub fn events() -> PathBuf {
        PathBuf::from("events.csv")
    }
    pub fn tolerance() -> f64 {
        1e-9
    }
    pub fn year_start() -> i32 {
        2009
    }
    pub fn year_end() -> i32 {
        2020
    }
    pub fn open_top_multiplier() -> f64 {
        1.5
    }
    pub fn log_shift() -> f64 {
        1.0
    }
    pub fn permutations() -> u32 {
        999
    }
    pub fn folds() -> usize {
        10
    }
    pub fn grid_size() -> usize {
        100
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn rho() -> f64 {
        0.9
    }
    pub fn chains() -> u32 {
        4
    }
    pub fn burn_in() -> u32 {
        2000
    }
    pub fn draws() -> u32 {
        5000
    }
    pub fn thin() -> u32 {
        1
    }
    pub fn gamma_shape() -> f64 {
        1.0
    }
    pub fn gamma_rate() -> f64 {
        0.01
    }
    pub fn theta_shape() -> f64 {
        2.0
    }
    pub fn theta_rate() -> f64 {
        0.1
    }
    pub fn top_k() -> usize {
        5
    }
    pub fn n_regions() -> usize {
        30
    }
    pub fn n_years() -> usize {
        12
    }
    pub fn intercept() -> f64 {
        -4.0
    }
    pub fn slopes() -> Vec<f64> {
        vec![0.5, -0.3]
    }
    pub fn tau_s() -> f64 {
        4.0
    }
    pub fn tau_gamma() -> f64 {
        8.0
    }
    pub fn theta() -> f64 {
        5.0
    }
    pub fn offset_low() -> f64 {
        200.0
    }
    pub fn offset_high() -> f64 {
        2000.0
    }
    pub fn offset_constant() -> f64 {
        1000.0
    }
    pub fn offset_log_mean() -> f64 {
        6.5
    }
    pub fn offset_log_sd() -> f64 {
        0.5
    }
    pub fn points_per_region() -> usize {
        40
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleSetting {
    Queen,
    Rook,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetSetting {
    Population,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRuleSetting {
    OneSe,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodSetting {
    NegativeBinomial,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialPriorSetting {
    Icar,
    Proper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalPriorSetting {
    Rw1,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RrModeSetting {
    Homogeneous,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetModelSetting {
    Uniform,
    Constant,
    LogNormal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    pub geometry: PathBuf,
    pub points: PathBuf,
    /// Income bracket counts per region.
    pub income: PathBuf,
    /// Negative / nil / not-stated income counts per region.
    pub income_special: PathBuf,
    pub events: PathBuf,
}

impl Default for InputsConfig {
    fn default() -> Self {
        InputsConfig {
            geometry: defaults::geometry(),
            points: defaults::points(),
            income: defaults::income(),
            income_special: defaults::income_special(),
            events: defaults::events(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContiguityConfig {
    pub rule: RuleSetting,
    pub tolerance: f64,
}

impl Default for ContiguityConfig {
    fn default() -> Self {
        ContiguityConfig {
            rule: RuleSetting::Queen,
            tolerance: defaults::tolerance(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelConfig {
    pub year_start: i32,
    pub year_end: i32,
    pub offset: OffsetSetting,
    /// Midpoint multiplier for the open-top income bracket.
    pub open_top_multiplier: f64,
    /// Shift used when log-transforming count covariates.
    pub log_shift: f64,
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig {
            year_start: defaults::year_start(),
            year_end: defaults::year_end(),
            offset: OffsetSetting::Population,
            open_top_multiplier: defaults::open_top_multiplier(),
            log_shift: defaults::log_shift(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoranConfig {
    pub permutations: u32,
    pub seed: u64,
}

impl Default for MoranConfig {
    fn default() -> Self {
        MoranConfig {
            permutations: defaults::permutations(),
            seed: defaults::seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub folds: usize,
    pub rule: LambdaRuleSetting,
    pub grid_size: usize,
    pub seed: u64,
    pub use_offset: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            folds: defaults::folds(),
            rule: LambdaRuleSetting::OneSe,
            grid_size: defaults::grid_size(),
            seed: defaults::seed(),
            use_offset: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub tau_s_shape: f64,
    pub tau_s_rate: f64,
    pub tau_gamma_shape: f64,
    pub tau_gamma_rate: f64,
    pub theta_shape: f64,
    pub theta_rate: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            tau_s_shape: defaults::gamma_shape(),
            tau_s_rate: defaults::gamma_rate(),
            tau_gamma_shape: defaults::gamma_shape(),
            tau_gamma_rate: defaults::gamma_rate(),
            theta_shape: defaults::theta_shape(),
            theta_rate: defaults::theta_rate(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarConfig {
    pub likelihood: LikelihoodSetting,
    pub spatial_prior: SpatialPriorSetting,
    /// Spatial dependence of the proper CAR prior (ignored under ICAR).
    pub rho: f64,
    pub temporal_prior: TemporalPriorSetting,
    /// Covariates to include; empty means "use the LASSO selection".
    pub covariates: Vec<String>,
    pub use_offset: bool,
    pub chains: u32,
    pub burn_in: u32,
    pub draws: u32,
    pub thin: u32,
    pub seed: u64,
    pub marginal_loglik: bool,
    pub hyperpriors: HyperConfig,
}

impl Default for CarConfig {
    fn default() -> Self {
        CarConfig {
            likelihood: LikelihoodSetting::NegativeBinomial,
            spatial_prior: SpatialPriorSetting::Icar,
            rho: defaults::rho(),
            temporal_prior: TemporalPriorSetting::Rw1,
            covariates: Vec::new(),
            use_offset: true,
            chains: defaults::chains(),
            burn_in: defaults::burn_in(),
            draws: defaults::draws(),
            thin: defaults::thin(),
            seed: defaults::seed(),
            marginal_loglik: true,
            hyperpriors: HyperConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrConfig {
    pub mode: RrModeSetting,
    /// Baseline region id; empty means "closest to the average count".
    pub baseline: String,
}

impl Default for RrConfig {
    fn default() -> Self {
        RrConfig {
            mode: RrModeSetting::Homogeneous,
            baseline: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExclusionsConfig {
    /// Region ids (hospital postcodes) removed in the sensitivity variant.
    pub regions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendsConfig {
    pub top_k: usize,
}

impl Default for TrendsConfig {
    fn default() -> Self {
        TrendsConfig {
            top_k: defaults::top_k(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_regions: usize,
    pub n_years: usize,
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub tau_s: f64,
    pub tau_gamma: f64,
    pub theta: f64,
    pub offsets: OffsetModelSetting,
    pub offset_low: f64,
    pub offset_high: f64,
    pub offset_constant: f64,
    pub offset_log_mean: f64,
    pub offset_log_sd: f64,
    /// Covariate correlation matrix, row major; empty means identity.
    pub correlation: Vec<Vec<f64>>,
    pub seed: u64,
    /// Service points fabricated per region (on average) for the fusion
    /// inputs.
    pub points_per_region: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_regions: defaults::n_regions(),
            n_years: defaults::n_years(),
            intercept: defaults::intercept(),
            slopes: defaults::slopes(),
            tau_s: defaults::tau_s(),
            tau_gamma: defaults::tau_gamma(),
            theta: defaults::theta(),
            offsets: OffsetModelSetting::Uniform,
            offset_low: defaults::offset_low(),
            offset_high: defaults::offset_high(),
            offset_constant: defaults::offset_constant(),
            offset_log_mean: defaults::offset_log_mean(),
            offset_log_sd: defaults::offset_log_sd(),
            correlation: Vec::new(),
            seed: defaults::seed(),
            points_per_region: defaults::points_per_region(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: defaults::out_dir(),
        }
    }
}

/// The whole pipeline configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputsConfig,
    pub contiguity: ContiguityConfig,
    pub panel: PanelConfig,
    pub moran: MoranConfig,
    pub lasso: LassoConfig,
    pub car: CarConfig,
    pub rr: RrConfig,
    pub exclusions: ExclusionsConfig,
    pub trends: TrendsConfig,
    pub synth: SynthConfig,
    pub output: OutputConfig,
}

impl PipelineConfig {
    /// Load from a TOML file; paths in the file are resolved relative to
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))?;
        let mut config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            config.rebase(dir);
        }
        Ok(config)
    }

    fn rebase(&mut self, dir: &Path) {
        for path in [
            &mut self.inputs.geometry,
            &mut self.inputs.points,
            &mut self.inputs.income,
            &mut self.inputs.income_special,
            &mut self.inputs.events,
            &mut self.output.dir,
        ] {
            if path.is_relative() {
                *path = dir.join(&path);
            }
        }
    }

    /// One `--seed N` overrides every stage seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.moran.seed = seed;
        self.lasso.seed = seed;
        self.car.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        let c = self;
        if !(c.contiguity.tolerance >= 0.0) || !c.contiguity.tolerance.is_finite() {
            return Err(CliError::input(format!(
                "contiguity.tolerance must be finite and non-negative, got {}",
                c.contiguity.tolerance
            )));
        }
        if c.panel.year_start > c.panel.year_end {
            return Err(CliError::input(format!(
                "panel.year_start {} is after panel.year_end {}",
                c.panel.year_start, c.panel.year_end
            )));
        }
        if !(c.panel.open_top_multiplier >= 1.0) || !c.panel.open_top_multiplier.is_finite() {
            return Err(CliError::input(format!(
                "panel.open_top_multiplier must be finite and at least 1, got {}",
                c.panel.open_top_multiplier
            )));
        }
        if !(c.panel.log_shift >= 0.0) || !c.panel.log_shift.is_finite() {
            return Err(CliError::input(format!(
                "panel.log_shift must be finite and non-negative, got {}",
                c.panel.log_shift
            )));
        }
        if c.moran.permutations < 99 {
            return Err(CliError::input(format!(
                "moran.permutations must be at least 99, got {}",
                c.moran.permutations
            )));
        }
        if c.lasso.folds < 3 {
            return Err(CliError::input(format!(
                "lasso.folds must be at least 3, got {}",
                c.lasso.folds
            )));
        }
        if c.lasso.grid_size < 2 || c.lasso.grid_size > 1000 {
            return Err(CliError::input(format!(
                "lasso.grid_size must lie in [2, 1000], got {}",
                c.lasso.grid_size
            )));
        }
        if c.car.chains == 0 || c.car.draws == 0 || c.car.thin == 0 {
            return Err(CliError::input(
                "car.chains, car.draws and car.thin must all be positive",
            ));
        }
        if matches!(c.car.spatial_prior, SpatialPriorSetting::Proper)
            && (!c.car.rho.is_finite() || c.car.rho.abs() >= 1.0)
        {
            return Err(CliError::input(format!(
                "car.rho must lie strictly inside (-1, 1), got {}",
                c.car.rho
            )));
        }
        if c.trends.top_k == 0 {
            return Err(CliError::input("trends.top_k must be at least 1"));
        }
        if c.synth.points_per_region == 0 {
            return Err(CliError::input("synth.points_per_region must be at least 1"));
        }
        self.scenario()?; // synth block must always be coherent
        Ok(())
    }

    pub fn contiguity_rule(&self) -> ContiguityRule {
        match self.contiguity.rule {
            RuleSetting::Queen => ContiguityRule::Queen,
            RuleSetting::Rook => ContiguityRule::Rook,
        }
    }

    pub fn offset_source(&self) -> OffsetSource {
        match self.panel.offset {
            OffsetSetting::Population => OffsetSource::Population,
            OffsetSetting::None => OffsetSource::None,
        }
    }

    pub fn lambda_rule(&self) -> LambdaRule {
        match self.lasso.rule {
            LambdaRuleSetting::OneSe => LambdaRule::OneSe,
            LambdaRuleSetting::Min => LambdaRule::Min,
        }
    }

    /// Model spec for one of the three compared variants.
    pub fn car_spec(
        &self,
        include_spatial: bool,
        include_temporal: bool,
        covariate_names: Vec<String>,
    ) -> CarModelSpec {
        let c = &self.car;
        CarModelSpec {
            likelihood: match c.likelihood {
                LikelihoodSetting::NegativeBinomial => Likelihood::NegativeBinomial,
                LikelihoodSetting::Poisson => Likelihood::Poisson,
            },
            include_spatial,
            include_temporal,
            covariate_names,
            use_offset: c.use_offset,
            spatial_prior: match c.spatial_prior {
                SpatialPriorSetting::Icar => SpatialPrior::Icar,
                SpatialPriorSetting::Proper => SpatialPrior::ProperCar { rho: c.rho },
            },
            temporal_prior: match c.temporal_prior {
                TemporalPriorSetting::Rw1 => TemporalPrior::Rw1,
                TemporalPriorSetting::Iid => TemporalPrior::Iid,
            },
            hyperpriors: Hyperpriors {
                tau_s_shape: c.hyperpriors.tau_s_shape,
                tau_s_rate: c.hyperpriors.tau_s_rate,
                tau_gamma_shape: c.hyperpriors.tau_gamma_shape,
                tau_gamma_rate: c.hyperpriors.tau_gamma_rate,
                theta_shape: c.hyperpriors.theta_shape,
                theta_rate: c.hyperpriors.theta_rate,
            },
            baseline_region: if self.rr.baseline.trim().is_empty() {
                BaselineRegion::ClosestToAverage
            } else {
                BaselineRegion::Region(self.rr.baseline.trim().to_string())
            },
        }
    }

    pub fn mcmc_settings(&self) -> McmcSettings {
        McmcSettings {
            chains: self.car.chains,
            burn_in: self.car.burn_in,
            draws: self.car.draws,
            thin: self.car.thin,
            seed: self.car.seed,
            compute_marginal_loglik: self.car.marginal_loglik,
        }
    }

    /// The generative scenario described by the `[synth]` section.
    pub fn scenario(&self) -> CliResult<SyntheticScenario> {
        let s = &self.synth;
        let mut scenario = SyntheticScenario::new(
            s.n_regions,
            s.n_years,
            s.intercept,
            s.slopes.clone(),
            s.tau_s,
            s.tau_gamma,
            s.theta,
            s.seed,
        );
        scenario.offsets = match s.offsets {
            OffsetModelSetting::Uniform => OffsetModel::Uniform {
                low: s.offset_low,
                high: s.offset_high,
            },
            OffsetModelSetting::Constant => OffsetModel::Constant(s.offset_constant),
            OffsetModelSetting::LogNormal => OffsetModel::LogNormal {
                log_mean: s.offset_log_mean,
                log_sd: s.offset_log_sd,
            },
        };
        if !s.correlation.is_empty() {
            scenario.covariate_correlation = s.correlation.clone();
        }
        scenario.validate()?;
        Ok(scenario)
    }

    /// Canonical TOML serialisation of the resolved configuration.
    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::internal(format!("serialising config: {e}")))
    }

    /// SHA-256 of the canonical serialisation, abbreviated for headers.
    pub fn hash(&self) -> CliResult<String> {
        let text = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            let _ = write!(hex, "{byte:02x}");
        }
        Ok(hex)
    }

    /// Seed summary recorded in every output's metadata header.
    pub fn seed_summary(&self) -> String {
        format!(
            "moran={} lasso={} car={} synth={}",
            self.moran.seed, self.lasso.seed, self.car.seed, self.synth.seed
        )
    }
}
