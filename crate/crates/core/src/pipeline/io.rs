//! CSV ingestion of measured curves and emission of report files.
//!
//! Floats are written in shortest round-trip form, so every file re-reads
//! to the exact values it was written from.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sort::{CellInput, SortReport, Truth};
use super::{CohortCell, PipelineError, Result};
use crate::electrode::Eaps;
use crate::signal::{ChargingRecord, OcvCurve, Sample, SignalError};

pub const RECORD_COLUMNS: [&str; 3] = ["time_s", "current_mA", "voltage_V"];
pub const OCV_COLUMNS: [&str; 2] = ["charge_mAh", "voltage_V"];
pub const TRUTH_FILE: &str = "truth.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| PipelineError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> PipelineError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PipelineError::io(path, io),
        kind => PipelineError::Row { path: path.into(), line, message: format!("{kind:?}") },
    }
}

/// Reads the named float columns, in the given order, from a headed CSV.
/// Returns the values with the file line of each row.
fn read_columns(path: &Path, columns: &[&str]) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let index: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| PipelineError::MissingColumn { path: path.into(), column: (*c).into() })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let values = index
            .iter()
            .zip(columns)
            .map(|(&i, name)| {
                let field = record.get(i).unwrap_or("");
                field.parse::<f64>().map_err(|_| PipelineError::Row {
                    path: path.into(),
                    line,
                    message: format!("{name}: cannot parse `{field}` as a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, values));
    }
    Ok(rows)
}

/// Maps a sample-indexed signal error onto the offending file line.
fn signal_error(path: &Path, lines: &[u64], e: SignalError) -> PipelineError {
    let at = |i: usize| lines.get(i).copied().unwrap_or(0);
    let message = e.to_string();
    match e {
        SignalError::NonFinite(i)
        | SignalError::NonMonotoneTime(i)
        | SignalError::NonMonotoneCharge(i)
        | SignalError::VoltageOutOfBand { index: i, .. } => {
            PipelineError::Row { path: path.into(), line: at(i), message }
        }
        _ => PipelineError::Data { path: path.into(), message },
    }
}

/// A charging (or discharging) record: columns `time_s`, `current_mA`,
/// `voltage_V`; extra columns are ignored. Direction follows the sign of
/// the mean current.
pub fn read_record_csv(path: &Path) -> Result<ChargingRecord> {
    let rows = read_columns(path, &RECORD_COLUMNS)?;
    let lines: Vec<u64> = rows.iter().map(|r| r.0).collect();
    let samples = rows.iter().map(|(_, v)| Sample { time_s: v[0], current_ma: v[1], voltage_v: v[2] }).collect();
    ChargingRecord::infer(samples).map_err(|e| signal_error(path, &lines, e))
}

/// An OCV curve: columns `charge_mAh`, `voltage_V`.
pub fn read_ocv_csv(path: &Path) -> Result<OcvCurve> {
    let rows = read_columns(path, &OCV_COLUMNS)?;
    let lines: Vec<u64> = rows.iter().map(|r| r.0).collect();
    let (q, v): (Vec<f64>, Vec<f64>) = rows.iter().map(|(_, r)| (r[0], r[1])).unzip();
    OcvCurve::from_raw(q, v).map_err(|e| signal_error(path, &lines, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

#[derive(Serialize)]
struct RecordRow {
    time_s: f64,
    #[serde(rename = "current_mA")]
    current_ma: f64,
    #[serde(rename = "voltage_V")]
    voltage_v: f64,
}

pub fn write_record_csv(path: &Path, record: &ChargingRecord) -> Result<()> {
    write_rows(
        path,
        record.samples().iter().map(|s| RecordRow {
            time_s: s.time_s,
            current_ma: s.current_ma,
            voltage_v: s.voltage_v,
        }),
    )
}

#[derive(Serialize)]
struct OcvRow {
    #[serde(rename = "charge_mAh")]
    charge_mah: f64,
    #[serde(rename = "voltage_V")]
    voltage_v: f64,
}

pub fn write_ocv_csv(path: &Path, curve: &OcvCurve) -> Result<()> {
    write_rows(path, curve.charge().iter().zip(curve.voltage()).map(|(q, v)| OcvRow { charge_mah: *q, voltage_v: *v }))
}

/// Ground truth of a synthetic cohort, one row per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub cell_id: usize,
    pub name: String,
    #[serde(rename = "q_pe_mAh")]
    pub q_pe_mah: f64,
    #[serde(rename = "q_ne_mAh")]
    pub q_ne_mah: f64,
    #[serde(rename = "q_offset_mAh")]
    pub q_offset_mah: f64,
    #[serde(rename = "capacity_mAh")]
    pub capacity_mah: f64,
    /// Synthetic cohorts only.
    #[serde(default)]
    pub path: Option<usize>,
    #[serde(default)]
    pub aging_level: Option<f64>,
}

/// Writes a cohort as `records/<name>.csv`, `ocv/<name>.csv` and a
/// `truth.csv` next to the records, which `read_cell_dir` picks up.
pub fn write_cohort(dir: &Path, cohort: &[CohortCell]) -> Result<()> {
    let mut truth = Vec::with_capacity(cohort.len());
    for c in cohort {
        let name = CellInput::from(c).name;
        write_record_csv(&dir.join("records").join(format!("{name}.csv")), &c.record)?;
        write_ocv_csv(&dir.join("ocv").join(format!("{name}.csv")), &c.pseudo_ocv)?;
        truth.push(TruthRow {
            cell_id: c.id,
            name,
            q_pe_mah: c.eaps.q_pe,
            q_ne_mah: c.eaps.q_ne,
            q_offset_mah: c.eaps.q_offset,
            capacity_mah: c.capacity_mah,
            path: Some(c.path),
            aging_level: Some(c.aging_level),
        });
    }
    write_rows(&dir.join("records").join(TRUTH_FILE), truth)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

/// Every `*.csv` record in `dir` (sorted by file name), numbered in that
/// order. An optional `truth.csv` attaches ground truth by name.
pub fn read_cell_dir(dir: &Path) -> Result<Vec<CellInput>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        let is_csv = path.extension().is_some_and(|x| x == "csv");
        if is_csv && path.file_name().is_some_and(|n| n != TRUTH_FILE) {
            paths.push(path);
        }
    }
    paths.sort();
    let truth_path = dir.join(TRUTH_FILE);
    let truth: Vec<TruthRow> = if truth_path.exists() { read_rows(&truth_path)? } else { Vec::new() };
    paths
        .iter()
        .enumerate()
        .map(|(id, path)| {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let truth = truth.iter().find(|t| t.name == name).map(|t| Truth {
                eaps: Eaps { q_pe: t.q_pe_mah, q_ne: t.q_ne_mah, q_offset: t.q_offset_mah },
                capacity_mah: t.capacity_mah,
            });
            Ok(CellInput { id, name, record: read_record_csv(path)?, truth })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cell_id: usize,
    pub method: String,
    pub cluster: usize,
    pub exemplar_id: usize,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgSdCsvRow {
    pub method: String,
    pub k: usize,
    #[serde(rename = "sd_qcell_mAh")]
    pub sd_qcell_mah: f64,
    #[serde(rename = "sd_qpe_mAh")]
    pub sd_qpe_mah: f64,
    #[serde(rename = "sd_qne_mAh")]
    pub sd_qne_mah: f64,
    #[serde(rename = "sd_qoffset_mAh")]
    pub sd_qoffset_mah: f64,
}

/// Estimated and (when known) true attributes per cell; truth columns are
/// empty for measured cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EapRow {
    pub cell_id: usize,
    pub name: String,
    #[serde(rename = "q_pe_mAh")]
    pub q_pe_mah: f64,
    #[serde(rename = "q_ne_mAh")]
    pub q_ne_mah: f64,
    #[serde(rename = "q_offset_mAh")]
    pub q_offset_mah: f64,
    #[serde(rename = "capacity_mAh")]
    pub capacity_mah: f64,
    #[serde(rename = "baseline_capacity_mAh")]
    pub baseline_capacity_mah: f64,
    pub loss: f64,
    pub converged: bool,
    #[serde(rename = "true_q_pe_mAh")]
    pub true_q_pe_mah: Option<f64>,
    #[serde(rename = "true_q_ne_mAh")]
    pub true_q_ne_mah: Option<f64>,
    #[serde(rename = "true_q_offset_mAh")]
    pub true_q_offset_mah: Option<f64>,
    #[serde(rename = "true_capacity_mAh")]
    pub true_capacity_mah: Option<f64>,
}

#[derive(Serialize)]
struct ScatterEapRow {
    cell_id: usize,
    #[serde(rename = "q_pe_mAh")]
    q_pe_mah: f64,
    #[serde(rename = "q_ne_mAh")]
    q_ne_mah: f64,
    #[serde(rename = "q_offset_mAh")]
    q_offset_mah: f64,
    cluster: usize,
}

#[derive(Serialize)]
struct ScatterCapacityRow {
    cell_id: usize,
    method: &'static str,
    cluster: usize,
    #[serde(rename = "capacity_mAh")]
    capacity_mah: f64,
}

pub const REPORT_FILES: [&str; 7] =
    ["report.json", "clusters.csv", "avg_sd.csv", "eaps.csv", "scatter_eaps.csv", "scatter_capacity.csv", "trace.csv"];

pub fn write_report_json(path: &Path, report: &SortReport) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, report)
        .map_err(|e| PipelineError::Data { path: path.into(), message: e.to_string() })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| PipelineError::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<SortReport> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let report: SortReport =
        serde_json::from_str(&text).map_err(|e| PipelineError::Data { path: path.into(), message: e.to_string() })?;
    report.validate()?;
    Ok(report)
}

/// Writes every report file into `out_dir`, creating it if needed.
pub fn emit(report: &SortReport, out_dir: &Path) -> Result<()> {
    report.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    write_report_json(&out_dir.join("report.json"), report)?;

    let cells = &report.cells;
    let clusters = report.methods.iter().flat_map(|m| {
        (0..cells.len()).map(move |i| ClusterRow {
            cell_id: cells[i].id,
            method: m.method.name().into(),
            cluster: m.labels[i],
            exemplar_id: cells[m.exemplars[m.labels[i]]].id,
            silhouette: m.silhouette[i],
        })
    });
    write_rows(&out_dir.join("clusters.csv"), clusters)?;

    write_rows(
        &out_dir.join("avg_sd.csv"),
        report.avg_sd.iter().map(|r| AvgSdCsvRow {
            method: r.method.name().into(),
            k: r.k,
            sd_qcell_mah: r.sd_qcell_mah,
            sd_qpe_mah: r.sd_qpe_mah,
            sd_qne_mah: r.sd_qne_mah,
            sd_qoffset_mah: r.sd_qoffset_mah,
        }),
    )?;

    write_rows(
        &out_dir.join("eaps.csv"),
        cells.iter().map(|c| EapRow {
            cell_id: c.id,
            name: c.name.clone(),
            q_pe_mah: c.eaps.q_pe,
            q_ne_mah: c.eaps.q_ne,
            q_offset_mah: c.eaps.q_offset,
            capacity_mah: c.capacity_mah,
            baseline_capacity_mah: c.baseline_capacity_mah,
            loss: c.loss,
            converged: c.converged,
            true_q_pe_mah: c.truth.map(|t| t.eaps.q_pe),
            true_q_ne_mah: c.truth.map(|t| t.eaps.q_ne),
            true_q_offset_mah: c.truth.map(|t| t.eaps.q_offset),
            true_capacity_mah: c.truth.map(|t| t.capacity_mah),
        }),
    )?;

    if let Some(adap) = report.method(super::Method::Adap) {
        write_rows(
            &out_dir.join("scatter_eaps.csv"),
            cells.iter().zip(&adap.labels).map(|(c, &cluster)| ScatterEapRow {
                cell_id: c.id,
                q_pe_mah: c.eaps.q_pe,
                q_ne_mah: c.eaps.q_ne,
                q_offset_mah: c.eaps.q_offset,
                cluster,
            }),
        )?;
    }

    // Each method against the capacity it saw: EAP-derived for adAP, the
    // baseline's own input otherwise.
    let baseline_source = report.meta.baseline_capacity;
    let capacity_rows = report.methods.iter().flat_map(|m| {
        cells.iter().zip(&m.labels).map(move |(c, &cluster)| ScatterCapacityRow {
            cell_id: c.id,
            method: m.method.name(),
            cluster,
            capacity_mah: match (m.method, baseline_source, c.truth) {
                (super::Method::Adap, _, _) => c.capacity_mah,
                (_, super::CapacitySource::Truth, Some(t)) => t.capacity_mah,
                _ => c.baseline_capacity_mah,
            },
        })
    });
    write_rows(&out_dir.join("scatter_capacity.csv"), capacity_rows)?;
    write_rows(&out_dir.join("trace.csv"), report.trace.iter())
}

pub fn read_clusters_csv(path: &Path) -> Result<Vec<ClusterRow>> {
    read_rows(path)
}

pub fn read_avg_sd_csv(path: &Path) -> Result<Vec<AvgSdCsvRow>> {
    read_rows(path)
}

pub fn read_eaps_csv(path: &Path) -> Result<Vec<EapRow>> {
    read_rows(path)
}
