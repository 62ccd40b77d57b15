//! End-to-end orchestration: cohort synthesis, CSV ingestion, CNN training,
//! EAP estimation, adAP sorting with capacity-only baselines, and report
//! emission.

mod cohort;
mod config;
mod io;
mod models;
mod sort;

pub use cohort::{peak_features, record_ic, simulate_charge, synth_cohort, window_ic, CohortCell, CohortSpec};
pub use config::{
    BaselineConfig, CapacitySource, EstimatorConfig, InputConfig, PipelineConfig, RegressorConfig, SdBasis, StageSeeds,
    TrainingConfig, TuneConfig,
};
pub use io::{
    emit, read_avg_sd_csv, read_cell_dir, read_clusters_csv, read_eaps_csv, read_ocv_csv, read_record_csv,
    read_report_json, write_cohort, write_ocv_csv, write_record_csv, write_report_json, AvgSdCsvRow, ClusterRow,
    EapRow, TruthRow, OCV_COLUMNS, RECORD_COLUMNS, REPORT_FILES, TRUTH_FILE,
};
pub use models::{
    baseline_inputs, evaluate_regressor, prepare_models, regression_dataset, slice_window, train_baseline,
    train_regressor, ModelSummary, Models, RegressorEvaluation, TrainingSummary,
};
pub use sort::{
    attribute_columns, avg_sd_row, run_sort, AvgSdRow, CellInput, CellResult, Method, MethodResult, Quarantined,
    RunMeta, SdValues, SortReport, Truth,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::clustering::ClusterError;
use crate::electrode::ElectrodeError;
use crate::estimator::EstimatorError;
use crate::nsga2::NsgaError;
use crate::regressor::RegressorError;
use crate::signal::SignalError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("cell {cell}: no draw landed in the capacity span after {retries} tries")]
    SamplerExhausted { cell: usize, retries: usize },
    #[error("degradation path {path}: no draw spans the capacity range after {retries} tries")]
    PathExhausted { path: usize, retries: usize },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}, line {line}: {message}")]
    Row { path: PathBuf, line: u64, message: String },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("report is empty")]
    EmptyReport,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Electrode(#[from] ElectrodeError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Nsga(#[from] NsgaError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// The cells a config asks to sort: the records directory when set,
/// otherwise a synthetic cohort.
pub fn load_inputs(config: &PipelineConfig) -> Result<Vec<CellInput>> {
    match &config.input.records_dir {
        Some(dir) => read_cell_dir(dir),
        None => {
            let cohort = synth_cohort(&crate::electrode::CellModel::reference(), &config.cohort_spec())?;
            Ok(cohort.iter().map(CellInput::from).collect())
        }
    }
}

pub fn training_cohort(config: &PipelineConfig) -> Result<Vec<CohortCell>> {
    synth_cohort(&crate::electrode::CellModel::reference(), &config.training_spec())
}

pub fn load_regressor(path: &Path) -> Result<crate::regressor::TrainedModel> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(crate::regressor::read_model(std::io::BufReader::new(file))?)
}

pub fn save_regressor(path: &Path, model: &crate::regressor::TrainedModel) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    crate::regressor::write_model(model, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| PipelineError::io(path, e))
}

/// A complete sort from configuration alone: training cohort, models
/// (loading the regressor when the config names a file), inputs, sort.
pub fn sort_from_config(config: &PipelineConfig) -> Result<SortReport> {
    config.validate()?;
    let regressor = config.regressor.model.as_deref().map(load_regressor).transpose()?;
    let models = prepare_models(config, &training_cohort(config)?, regressor)?;
    run_sort(config, &load_inputs(config)?, models)
}
