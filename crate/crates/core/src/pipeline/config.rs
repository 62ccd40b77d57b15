//! Run configuration: one TOML section per module. Every field has a
//! default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CohortSpec, PipelineError, Result};
use crate::clustering::AdapOptions;
use crate::estimator::{EapBounds, PsoGaOptions};
use crate::nsga2::{NsgaOptions, SearchBudget};
use crate::numeric::derive_seed;
use crate::regressor::{CnnConfig, TrainOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed. Each stage seed mixes this with its section's own
    /// `seed`, so either can be varied independently.
    pub seed: u64,
    pub input: InputConfig,
    pub cohort: CohortSpec,
    pub training: TrainingConfig,
    pub regressor: RegressorConfig,
    pub estimator: EstimatorConfig,
    pub clustering: AdapOptions,
    pub baseline: BaselineConfig,
    pub tune: TuneConfig,
}

/// Where the sorted cells come from. Without a directory the cohort is
/// synthesized from `[cohort]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Directory of charging-record CSVs, one cell per file.
    pub records_dir: Option<PathBuf>,
}

/// The cohort the regressor and the baseline estimator learn from. It shares
/// the sampler of `[cohort]` but not its seed or size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_cells: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { n_cells: 400, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub cnn: CnnConfig,
    /// `learning_rate` here is ignored in favour of `cnn.learning_rate`.
    pub train: TrainOptions,
    /// A trained model file; when absent, `sort` trains one first.
    pub model: Option<PathBuf>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { cnn: CnnConfig::default(), train: TrainOptions::default(), model: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub options: PsoGaOptions,
    pub bounds: EapBounds,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { options: PsoGaOptions::default(), bounds: EapBounds::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacitySource {
    /// Capacity from the peak-feature network, as a capacity-only sorter
    /// would have it.
    Estimated,
    /// Ground-truth capacity: a stronger baseline, synthetic cohorts only.
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdBasis {
    /// Ground truth when every cell has it, otherwise estimates.
    Auto,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub capacity_source: CapacitySource,
    pub hidden_neurons: usize,
    pub train: TrainOptions,
    pub fuzzifier: f64,
    /// Which attribute values the average-SD table is computed on.
    pub sd_basis: SdBasis,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            capacity_source: CapacitySource::Estimated,
            hidden_neurons: 16,
            train: TrainOptions { learning_rate: 1e-2, ..TrainOptions::default() },
            fuzzifier: 2.0,
            sd_basis: SdBasis::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    /// Training cells used inside the search objective.
    pub n_cells: usize,
    pub nsga: NsgaOptions,
    pub budget: SearchBudget,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { n_cells: 200, nsga: NsgaOptions::default(), budget: SearchBudget::default() }
    }
}

/// Sub-seeds handed to each stage, recorded in every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub cohort: u64,
    pub training_cohort: u64,
    pub model_init: u64,
    pub model_train: u64,
    pub estimator: u64,
    pub clustering: u64,
    pub baseline: u64,
    pub tune: u64,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.regressor.cnn.validate()?;
        self.estimator.bounds.validate()?;
        self.estimator.options.validate()?;
        self.tune.nsga.validate()?;
        if self.training.n_cells < 10 || self.tune.n_cells < 10 {
            return Err(PipelineError::Config("training cohorts need at least 10 cells".into()));
        }
        if self.baseline.hidden_neurons == 0 || !(self.baseline.fuzzifier > 1.0) {
            return Err(PipelineError::Config("baseline needs hidden neurons and a fuzzifier above 1".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = |stream: u64, section: u64| derive_seed(derive_seed(self.seed, stream), section);
        StageSeeds {
            cohort: s(1, self.cohort.seed),
            training_cohort: s(2, self.training.seed),
            model_init: s(3, self.regressor.train.seed),
            model_train: s(4, self.regressor.train.seed),
            estimator: s(5, self.estimator.options.seed),
            clustering: s(6, self.clustering.seed),
            baseline: s(7, self.baseline.train.seed),
            tune: s(8, self.tune.nsga.seed),
        }
    }

    /// The test-cohort spec with its derived seed.
    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec { seed: self.seeds().cohort, ..self.cohort.clone() }
    }

    /// The training-cohort spec: same sampler with an independent path per
    /// cell, so the regressor never sees the sorted cohort's paths.
    pub fn training_spec(&self) -> CohortSpec {
        CohortSpec {
            seed: self.seeds().training_cohort,
            n_cells: self.training.n_cells,
            paths: 0,
            ..self.cohort.clone()
        }
    }
}
