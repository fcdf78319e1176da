//! Run configuration: an optional JSON file, overridden by flags.

use std::path::{Path, PathBuf};

use clap::Args;
use pdeplus::benchmark::BenchmarkConfig;
use pdeplus::pdeplus::PdePlusConfig;
use pdeplus::simgen::Example;
use pdeplus::PdeConfig;
use serde::Deserialize;

use crate::error::CliError;

/// Settings shared by the subcommands that fit a model.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// JSON run configuration; flags take precedence over its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Simulated example whose default settings to start from.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub example: Option<u8>,
    /// Number of mean components (chosen from the eigenvalue profile if absent).
    #[arg(long)]
    pub kappa: Option<usize>,
    /// Bandwidth on the response index.
    #[arg(long = "h-y", allow_negative_numbers = true)]
    pub h_y: Option<f64>,
    /// Bandwidth on the covariate index.
    #[arg(long = "h-x", allow_negative_numbers = true)]
    pub h_x: Option<f64>,
    /// Convergence tolerance on successive basis functions.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Slices of the response index used by sliced inverse regression.
    #[arg(long)]
    pub slices: Option<usize>,
    /// Neighbours used to transfer coefficients to new locations.
    #[arg(long)]
    pub knn: Option<usize>,
    /// Equal-width spatial bins of the empirical variogram.
    #[arg(long)]
    pub space_bins: Option<usize>,
    /// Largest time lag (in steps) of the empirical variogram.
    #[arg(long)]
    pub max_time_lag: Option<usize>,
}

/// Fields accepted in a `--config` file. All are optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub example: Option<u8>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub test_fraction: Option<f64>,
    pub workers: Option<usize>,
    pub model: Option<PdePlusConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn example(tag: u8) -> Result<Example, CliError> {
    Example::from_tag(tag).map_err(|e| CliError::Config(e.to_string()))
}

impl ModelFlags {
    /// Benchmark-style settings: the example defaults, then the file, then flags.
    pub fn resolve(&self) -> Result<(BenchmarkConfig, FileConfig), CliError> {
        let mut file = FileConfig::load(self.config.as_deref())?;
        let tag = self.example.or(file.example).unwrap_or(1);
        let mut config = BenchmarkConfig::for_example(example(tag)?, 20, 0);
        if let Some(model) = file.model.take() {
            config.model = model;
        }
        config.n = file.n.unwrap_or(config.n);
        config.seed = file.seed.unwrap_or(config.seed);
        config.replicates = file.replicates.unwrap_or(config.replicates);
        config.test_fraction = file.test_fraction.unwrap_or(config.test_fraction);
        config.workers = file.workers.unwrap_or(config.workers);
        self.apply(&mut config.model);
        Ok((config, file))
    }

    /// Model settings for fitting a user dataset. Without an example the
    /// number of components is chosen from the data.
    pub fn model(&self) -> Result<PdePlusConfig, CliError> {
        let file = FileConfig::load(self.config.as_deref())?;
        let mut model = match (file.model, self.example.or(file.example)) {
            (Some(model), _) => model,
            (None, Some(tag)) => BenchmarkConfig::for_example(example(tag)?, 1, 0).model,
            (None, None) => PdePlusConfig::new(PdeConfig::new(3.0, 0.5)),
        };
        self.apply(&mut model);
        Ok(model)
    }

    fn apply(&self, model: &mut PdePlusConfig) {
        let pde = &mut model.pde;
        if self.kappa.is_some() {
            pde.kappa_override = self.kappa;
        }
        pde.h_y = self.h_y.unwrap_or(pde.h_y);
        pde.h_x = self.h_x.unwrap_or(pde.h_x);
        pde.delta = self.delta.unwrap_or(pde.delta);
        pde.n_slices = self.slices.unwrap_or(pde.n_slices);
        model.knn = self.knn.unwrap_or(model.knn);
        model.variogram.space_bins = self.space_bins.unwrap_or(model.variogram.space_bins);
        if self.max_time_lag.is_some() {
            model.variogram.max_time_lag = self.max_time_lag;
        }
    }
}
