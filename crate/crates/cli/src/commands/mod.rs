//! The subcommand implementations, sharing one resolved-run context.

pub mod car;
pub mod fuse;
pub mod lasso;
pub mod moran;
pub mod synth;
pub mod trends;

use std::path::PathBuf;

use stareal_core::lattice::{build_adjacency, AdjacencyGraph, Region};

use crate::config::PipelineConfig;
use crate::error::CliResult;
use crate::geojson;
use crate::io::{self, LoadedPanel, Meta};

/// Everything a subcommand needs: the resolved configuration, its hash,
/// and the thread budget.
pub struct Ctx {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub threads: usize,
}

impl Ctx {
    pub fn out(&self, name: &str) -> PathBuf {
        self.config.output.dir.join(name)
    }

    /// Metadata header naming the pipeline stage that produced a file, so
    /// `all` and the individual subcommands emit identical trees.
    pub fn meta(&self, stage: &str) -> Meta {
        Meta::new(stage, &self.config_hash, &self.config.seed_summary())
    }

    pub fn load_regions(&self) -> CliResult<Vec<Region>> {
        geojson::read_regions(&self.config.inputs.geometry)
    }

    pub fn build_graph(&self, regions: &[Region]) -> CliResult<AdjacencyGraph> {
        Ok(build_adjacency(
            regions,
            self.config.contiguity_rule(),
            self.config.contiguity.tolerance,
        )?)
    }

    /// The panel written by `fuse` (or `synth`) into the output directory.
    pub fn load_panel(&self, region_ids: &[String]) -> CliResult<LoadedPanel> {
        io::read_panel(&self.out("panel.csv"), region_ids)
    }
}
