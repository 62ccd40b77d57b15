//! Training of the two learned components a sort run needs: the CNN
//! regressor and the capacity-only baseline network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{window_ic, CohortCell, PipelineConfig, Result};
use crate::regressor::{
    build_network, train, CnnConfig, Dataset, LayerSpec, Network, TrainOptions, TrainReport, TrainedModel,
};
use crate::signal::{IcPeakFeatures, IC_STEP_V, IC_WINDOW_V};

/// The part of a full-window IC (3.5–4.0 V, 1 mV) that `config` consumes.
pub fn slice_window(full: &[f64], config: &CnnConfig) -> Vec<f64> {
    let start = ((config.v1 - IC_WINDOW_V.0) / IC_STEP_V).round() as usize;
    full[start..start + config.input_len()].to_vec()
}

/// Full-window IC inputs and ground-truth ΔQ targets.
pub fn regression_dataset(cells: &[CohortCell]) -> Result<Dataset> {
    let inputs: Vec<Vec<f64>> = cells.par_iter().map(|c| window_ic(&c.record)).collect::<Result<_>>()?;
    Ok(Dataset { inputs, targets: cells.iter().map(|c| c.dq_fp.to_vec()).collect() })
}

/// Trains the configured CNN on `data`, whose inputs span the full window.
pub fn train_regressor(config: &PipelineConfig, data: &Dataset) -> Result<(TrainedModel, TrainReport)> {
    let cnn = &config.regressor.cnn;
    let seeds = config.seeds();
    let windowed =
        Dataset { inputs: data.inputs.iter().map(|x| slice_window(x, cnn)).collect(), targets: data.targets.clone() };
    let network = build_network(cnn, seeds.model_init)?;
    let opts =
        TrainOptions { learning_rate: cnn.learning_rate, seed: seeds.model_train, ..config.regressor.train.clone() };
    Ok(train(network, &windowed, &opts)?)
}

/// The three IC heights the capacity baseline reads.
pub fn baseline_inputs(peaks: &IcPeakFeatures) -> Vec<f64> {
    peaks.heights().to_vec()
}

/// A 3-input, one-hidden-layer dense network from peak heights to capacity.
pub fn train_baseline(
    config: &PipelineConfig,
    peaks: &[IcPeakFeatures],
    capacities: &[f64],
) -> Result<(TrainedModel, TrainReport)> {
    let data = Dataset {
        inputs: peaks.iter().map(baseline_inputs).collect(),
        targets: capacities.iter().map(|c| vec![*c]).collect(),
    };
    let seed = config.seeds().baseline;
    let specs = [
        LayerSpec::Dense { neurons: config.baseline.hidden_neurons, relu: true },
        LayerSpec::Dense { neurons: 1, relu: false },
    ];
    let network = Network::from_specs(3, &specs, crate::numeric::derive_seed(seed, 0))?;
    let opts = TrainOptions { seed: crate::numeric::derive_seed(seed, 1), ..config.baseline.train.clone() };
    Ok(train(network, &data, &opts)?)
}

/// Both trained components with their training reports.
#[derive(Debug, Clone)]
pub struct Models {
    pub regressor: TrainedModel,
    pub baseline: TrainedModel,
    pub summary: ModelSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub cnn: Option<CnnConfig>,
    pub cnn_parameters: usize,
    /// `None` when the regressor was loaded from a file.
    pub regressor_training: Option<TrainingSummary>,
    pub baseline_training: TrainingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
}

impl From<&TrainReport> for TrainingSummary {
    fn from(r: &TrainReport) -> Self {
        Self { epochs: r.epochs, best_epoch: r.best_epoch, train_rmse: r.train_rmse_mah, val_rmse: r.val_rmse_mah }
    }
}

/// Trains the baseline and, unless `regressor` is given, the CNN, both on
/// the training cohort.
pub fn prepare_models(
    config: &PipelineConfig,
    training: &[CohortCell],
    regressor: Option<TrainedModel>,
) -> Result<Models> {
    let (regressor, regressor_training) = match regressor {
        Some(m) => (m, None),
        None => {
            let (m, r) = train_regressor(config, &regression_dataset(training)?)?;
            (m, Some(TrainingSummary::from(&r)))
        }
    };
    let peaks: Vec<IcPeakFeatures> =
        training.par_iter().map(|c| super::peak_features(&c.record)).collect::<Result<_>>()?;
    let caps: Vec<f64> = training.iter().map(|c| c.capacity_mah).collect();
    let (baseline, b_report) = train_baseline(config, &peaks, &caps)?;
    let summary = ModelSummary {
        cnn: regressor.network.config().copied(),
        cnn_parameters: regressor.network.parameter_count(),
        regressor_training,
        baseline_training: TrainingSummary::from(&b_report),
    };
    Ok(Models { regressor, baseline, summary })
}

/// Held-out accuracy of a trained regressor, alone and through the EAP
/// estimator. Percentages are of nominal capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorEvaluation {
    pub cells: usize,
    pub dq_rmse_mah: f64,
    pub capacity_mae_pct: f64,
    pub capacity_rmse_pct: f64,
    /// Per cell: true capacity, capacity of the estimated EAPs.
    pub capacities: Vec<(f64, f64)>,
}

pub fn evaluate_regressor(
    config: &PipelineConfig,
    model: &TrainedModel,
    cells: &[CohortCell],
) -> Result<RegressorEvaluation> {
    use crate::electrode::{CellModel, NOMINAL_CAPACITY_MAH};
    use crate::estimator::{estimate, PsoGaOptions};
    let cell = CellModel::reference();
    let seed = config.seeds().estimator;
    let rows: Vec<(Vec<f64>, f64)> = cells
        .par_iter()
        .map(|c| {
            let full = window_ic(&c.record)?;
            let x = match model.network.config() {
                Some(cnn) => slice_window(&full, cnn),
                None => full,
            };
            let dq = model.predict(&x)?;
            let opts =
                PsoGaOptions { seed: crate::numeric::derive_seed(seed, c.id as u64), ..config.estimator.options };
            let est = estimate(&cell, &dq, &config.estimator.bounds, &opts)?;
            Ok((dq, est.capacity_mah))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
    let truth: Vec<Vec<f64>> = cells.iter().map(|c| c.dq_fp.to_vec()).collect();
    let capacities: Vec<(f64, f64)> = cells.iter().zip(&rows).map(|(c, r)| (c.capacity_mah, r.1)).collect();
    let n = capacities.len().max(1) as f64;
    let mae = capacities.iter().map(|(t, e)| (t - e).abs()).sum::<f64>() / n;
    let mse = capacities.iter().map(|(t, e)| (t - e).powi(2)).sum::<f64>() / n;
    Ok(RegressorEvaluation {
        cells: cells.len(),
        dq_rmse_mah: crate::regressor::rmse(&preds, &truth)?,
        capacity_mae_pct: 100.0 * mae / NOMINAL_CAPACITY_MAH,
        capacity_rmse_pct: 100.0 * mse.sqrt() / NOMINAL_CAPACITY_MAH,
        capacities,
    })
}
