//! The sort run: per-cell estimation fanned out over workers, then adAP on
//! the EAPs and capacity-only baselines at the same K.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::models::{baseline_inputs, slice_window, ModelSummary, Models};
use super::{
    peak_features, window_ic, CapacitySource, CohortCell, PipelineConfig, PipelineError, Result, SdBasis, StageSeeds,
};
use crate::clustering::{
    adap_run, agglomerative, avg_cluster_sd, fuzzy_cmeans, kmeans, silhouette, ClusterResult, ConvergenceEvent,
    ScanStep,
};
use crate::electrode::{CellModel, Eaps};
use crate::estimator::{estimate, PsoGaOptions};
use crate::numeric::derive_seed;
use crate::signal::ChargingRecord;

/// One cell to sort. `truth` is known only for synthetic cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellInput {
    pub id: usize,
    pub name: String,
    pub record: ChargingRecord,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub eaps: Eaps,
    pub capacity_mah: f64,
}

impl From<&CohortCell> for CellInput {
    fn from(c: &CohortCell) -> Self {
        Self {
            id: c.id,
            name: format!("cell_{:03}", c.id),
            record: c.record.clone(),
            truth: Some(Truth { eaps: c.eaps, capacity_mah: c.capacity_mah }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub id: usize,
    pub name: String,
    pub eaps: Eaps,
    pub loss: f64,
    pub converged: bool,
    /// Standard-window capacity of the estimated EAPs.
    pub capacity_mah: f64,
    pub baseline_capacity_mah: f64,
    pub dq_pred: Vec<f64>,
    pub peak_heights: [f64; 3],
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantined {
    pub id: usize,
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "adAP")]
    Adap,
    #[serde(rename = "KMC")]
    Kmc,
    #[serde(rename = "FCMC")]
    Fcmc,
    #[serde(rename = "AHC")]
    Ahc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Adap, Method::Kmc, Method::Fcmc, Method::Ahc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adap => "adAP",
            Method::Kmc => "KMC",
            Method::Fcmc => "FCMC",
            Method::Ahc => "AHC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One method's partition; indices refer to positions in `SortReport::cells`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub k: usize,
    pub labels: Vec<usize>,
    pub exemplars: Vec<usize>,
    /// Per-cell silhouette on the data the method clustered.
    pub silhouette: Vec<f64>,
    pub avg_silhouette: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvgSdRow {
    pub method: Method,
    pub k: usize,
    pub sd_qcell_mah: f64,
    pub sd_qpe_mah: f64,
    pub sd_qne_mah: f64,
    pub sd_qoffset_mah: f64,
}

/// Which attribute values the SD table was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdValues {
    Truth,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub seeds: StageSeeds,
    pub config: PipelineConfig,
    pub models: ModelSummary,
    pub sd_values: SdValues,
    pub baseline_capacity: CapacitySource,
    pub input_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortReport {
    pub meta: RunMeta,
    pub cells: Vec<CellResult>,
    pub quarantined: Vec<Quarantined>,
    pub methods: Vec<MethodResult>,
    pub avg_sd: Vec<AvgSdRow>,
    pub trace: Vec<ScanStep>,
    pub events: Vec<ConvergenceEvent>,
}

impl SortReport {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn avg_sd_row(&self, m: Method) -> Option<&AvgSdRow> {
        self.avg_sd.iter().find(|r| r.method == m)
    }

    /// Structural checks: row counts, label ranges and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(PipelineError::EmptyReport);
        }
        let n = self.cells.len();
        let bad = |m: String| Err(PipelineError::Config(format!("inconsistent report: {m}")));
        if n + self.quarantined.len() != self.meta.input_cells {
            return bad("cells plus quarantined differ from the input count".into());
        }
        for r in &self.methods {
            if r.labels.len() != n || r.silhouette.len() != n || r.labels.iter().any(|&l| l >= r.k) {
                return bad(format!("{} labels", r.method));
            }
        }
        let finite = self
            .avg_sd
            .iter()
            .all(|r| [r.sd_qcell_mah, r.sd_qpe_mah, r.sd_qne_mah, r.sd_qoffset_mah].iter().all(|v| v.is_finite()));
        if !finite {
            return bad("non-finite average SD".into());
        }
        Ok(())
    }
}

/// Per-cell attribute values in table order: Q_cell, Q_PE, Q_NE, Q_offset.
pub fn attribute_columns(cells: &[CellResult], values: SdValues) -> [Vec<f64>; 4] {
    let pick = |c: &CellResult| match (values, c.truth) {
        (SdValues::Truth, Some(t)) => (t.capacity_mah, t.eaps),
        _ => (c.capacity_mah, c.eaps),
    };
    let rows: Vec<(f64, Eaps)> = cells.iter().map(pick).collect();
    [
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1.q_pe).collect(),
        rows.iter().map(|r| r.1.q_ne).collect(),
        rows.iter().map(|r| r.1.q_offset).collect(),
    ]
}

pub fn avg_sd_row(method: Method, k: usize, labels: &[usize], columns: &[Vec<f64>; 4]) -> AvgSdRow {
    let sd = |j: usize| avg_cluster_sd(&columns[j], labels);
    AvgSdRow { method, k, sd_qcell_mah: sd(0), sd_qpe_mah: sd(1), sd_qne_mah: sd(2), sd_qoffset_mah: sd(3) }
}

fn process_cell(
    cell: &CellModel,
    config: &PipelineConfig,
    models: &Models,
    seeds: &StageSeeds,
    input: &CellInput,
) -> Result<CellResult> {
    let full = window_ic(&input.record)?;
    let cnn_in = match models.regressor.network.config() {
        Some(cnn) => slice_window(&full, cnn),
        None => full,
    };
    let dq_pred = models.regressor.predict(&cnn_in)?;
    let opts = PsoGaOptions { seed: derive_seed(seeds.estimator, input.id as u64), ..config.estimator.options };
    let est = estimate(cell, &dq_pred, &config.estimator.bounds, &opts)?;
    let peaks = peak_features(&input.record)?;
    let baseline_capacity_mah = models.baseline.predict(&baseline_inputs(&peaks))?[0];
    Ok(CellResult {
        id: input.id,
        name: input.name.clone(),
        eaps: est.eaps,
        loss: est.loss,
        converged: est.converged,
        capacity_mah: est.capacity_mah,
        baseline_capacity_mah,
        dq_pred,
        peak_heights: peaks.heights(),
        truth: input.truth,
    })
}

fn method_result(method: Method, data: &[Vec<f64>], r: ClusterResult) -> MethodResult {
    let (silhouette, avg_silhouette) = silhouette(data, &r.labels).unwrap_or_else(|_| (vec![0.0; data.len()], 0.0));
    MethodResult { method, k: r.k, labels: r.labels, exemplars: r.exemplars, silhouette, avg_silhouette }
}

/// Estimates every cell, then sorts the survivors. Cells that fail at any
/// per-cell stage are quarantined with the reason instead of aborting.
pub fn run_sort(config: &PipelineConfig, inputs: &[CellInput], models: Models) -> Result<SortReport> {
    config.validate()?;
    let cell = CellModel::reference();
    let seeds = config.seeds();
    let outcomes: Vec<Result<CellResult>> =
        inputs.par_iter().map(|input| process_cell(&cell, config, &models, &seeds, input)).collect();
    let mut cells = Vec::new();
    let mut quarantined = Vec::new();
    for (input, outcome) in inputs.iter().zip(outcomes) {
        match outcome {
            Ok(c) => cells.push(c),
            Err(e) => quarantined.push(Quarantined { id: input.id, name: input.name.clone(), reason: e.to_string() }),
        }
    }
    if cells.len() < 3 {
        return Err(PipelineError::Config(format!("only {} cells survived estimation", cells.len())));
    }

    let eap_data: Vec<Vec<f64>> = cells.iter().map(|c| c.eaps.as_array().to_vec()).collect();
    let adap = adap_run(&eap_data, &crate::clustering::AdapOptions { seed: seeds.clustering, ..config.clustering })?;
    let k = adap.best.k;

    let has_truth = cells.iter().all(|c| c.truth.is_some());
    let baseline_capacity = config.baseline.capacity_source;
    let capacity: Vec<Vec<f64>> = match baseline_capacity {
        CapacitySource::Estimated => cells.iter().map(|c| vec![c.baseline_capacity_mah]).collect(),
        CapacitySource::Truth if has_truth => {
            cells.iter().map(|c| vec![c.truth.expect("checked").capacity_mah]).collect()
        }
        CapacitySource::Truth => {
            return Err(PipelineError::Config("baseline capacity_source = truth needs ground truth".into()))
        }
    };
    let methods = vec![
        method_result(Method::Adap, &eap_data, adap.best),
        method_result(Method::Kmc, &capacity, kmeans(&capacity, k, derive_seed(seeds.clustering, 1))?),
        method_result(
            Method::Fcmc,
            &capacity,
            fuzzy_cmeans(&capacity, k, config.baseline.fuzzifier, derive_seed(seeds.clustering, 2))?,
        ),
        method_result(Method::Ahc, &capacity, agglomerative(&capacity, k)?),
    ];

    let sd_values = match config.baseline.sd_basis {
        SdBasis::Auto if has_truth => SdValues::Truth,
        _ => SdValues::Estimated,
    };
    let columns = attribute_columns(&cells, sd_values);
    let avg_sd = methods.iter().map(|m| avg_sd_row(m.method, m.k, &m.labels, &columns)).collect();

    let report = SortReport {
        meta: RunMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            config: config.clone(),
            models: models.summary,
            sd_values,
            baseline_capacity,
            input_cells: inputs.len(),
        },
        cells,
        quarantined,
        methods,
        avg_sd,
        trace: adap.trace,
        events: adap.events,
    };
    report.validate()?;
    Ok(report)
}
