//! `eapsort`: cohort synthesis, regressor training and tuning, single-curve
//! EAP estimation, and full sort runs.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use eapsort_core::electrode::{CellModel, Eaps};
use eapsort_core::estimator::{estimate, EstimatorError, PsoGaOptions};
use eapsort_core::nsga2::{cnn_search_problem, evolve_observed, write_front_csv, MooProblem, NsgaError};
use eapsort_core::numeric::derive_seed;
use eapsort_core::pipeline::{
    emit, evaluate_regressor, load_inputs, load_regressor, prepare_models, read_ocv_csv, read_record_csv,
    read_report_json, regression_dataset, run_sort, save_regressor, slice_window, synth_cohort, train_regressor,
    training_cohort, window_ic, write_cohort, CohortSpec, PipelineConfig, PipelineError, OCV_COLUMNS,
};
use eapsort_core::regressor::{CnnConfig, RegressorError, TrainReport};
use eapsort_core::signal::extract_feature_points;

#[derive(Parser)]
#[command(name = "eapsort", version, about = "Electrode-level sorting of retired lithium-ion cells")]
struct Cli {
    /// TOML configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort (records, pseudo-OCVs, ground truth).
    Synth {
        /// Write the training cohort instead of the test cohort.
        #[arg(long)]
        training: bool,
    },
    /// Train the CNN regressor on the training cohort.
    Train {
        /// Also score the model on the test cohort through the estimator.
        #[arg(long)]
        evaluate: bool,
    },
    /// NSGA-II search over CNN hyperparameters and the IC window.
    Tune,
    /// Estimate EAPs for one charging record or OCV curve.
    Estimate {
        /// Charging record (time_s, current_mA, voltage_V) or OCV curve
        /// (charge_mAh, voltage_V).
        #[arg(long)]
        input: PathBuf,
        /// Trained regressor; needed for charging records.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Full run: estimate every cell, sort, and emit the report files.
    Sort,
    /// Re-emit the report files from a stored report.json.
    Report {
        /// Directory holding report.json (defaults to --out).
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

fn classify_regressor(e: &RegressorError) -> fn(String) -> Failure {
    match e {
        RegressorError::Io(_) | RegressorError::Model(_) | RegressorError::InputLength { .. } => Failure::Data,
        RegressorError::ConfigRange { .. } | RegressorError::SegmentBounds { .. } | RegressorError::Shape { .. } => {
            Failure::Usage
        }
        RegressorError::InvalidOptions(_) => Failure::Usage,
        _ => Failure::Numerical,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        let kind: fn(String) -> Failure = match &e {
            PipelineError::Config(_) => Failure::Usage,
            PipelineError::MissingColumn { .. }
            | PipelineError::Row { .. }
            | PipelineError::Data { .. }
            | PipelineError::EmptyReport
            | PipelineError::Io { .. }
            | PipelineError::Signal(_) => Failure::Data,
            PipelineError::Regressor(r) => classify_regressor(r),
            PipelineError::Estimator(EstimatorError::InvalidBounds(_) | EstimatorError::InvalidOptions(_)) => {
                Failure::Usage
            }
            PipelineError::Estimator(EstimatorError::Signal(_)) => Failure::Data,
            PipelineError::Nsga(NsgaError::InvalidOptions(_) | NsgaError::InvalidBounds(_)) => Failure::Usage,
            PipelineError::Nsga(NsgaError::Csv(_) | NsgaError::Io(_)) => Failure::Data,
            _ => Failure::Numerical,
        };
        kind(message)
    }
}

macro_rules! impl_from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}
impl_from_core!(RegressorError, EstimatorError, NsgaError);

type CliResult<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_failure(path, e))?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn synth(config: &PipelineConfig, out: &Path, training: bool) -> CliResult<()> {
    let spec: CohortSpec = if training { config.training_spec() } else { config.cohort_spec() };
    let cohort = synth_cohort(&CellModel::reference(), &spec)?;
    write_cohort(out, &cohort)?;
    std::fs::write(out.join("config.toml"), config.to_toml_string()).map_err(|e| io_failure(out, e))?;
    eprintln!("wrote {} cells to {}", cohort.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a CnnConfig,
    parameters: usize,
    report: &'a TrainReport,
    evaluation: Option<eapsort_core::pipeline::RegressorEvaluation>,
}

fn train(config: &PipelineConfig, out: &Path, evaluate: bool) -> CliResult<()> {
    let cells = training_cohort(config)?;
    let (model, report) = train_regressor(config, &regression_dataset(&cells)?)?;
    save_regressor(&out.join("model.eapcnn"), &model)?;
    let evaluation = if evaluate {
        let test = synth_cohort(&CellModel::reference(), &config.cohort_spec())?;
        Some(evaluate_regressor(config, &model, &test)?)
    } else {
        None
    };
    if let Some(e) = &evaluation {
        eprintln!(
            "held-out ΔQ RMSE {:.3} mAh, capacity MAE {:.3}%, RMSE {:.3}%",
            e.dq_rmse_mah, e.capacity_mae_pct, e.capacity_rmse_pct
        );
    }
    let summary = TrainSummary {
        config: &config.regressor.cnn,
        parameters: model.network.parameter_count(),
        report: &report,
        evaluation,
    };
    write_json(&out.join("train_report.json"), &summary)?;
    eprintln!("validation RMSE {:.3} mAh after {} epochs", report.val_rmse_mah, report.epochs);
    Ok(())
}

#[derive(Serialize)]
struct FrontEntry {
    config: CnnConfig,
    sse_mah2: f64,
    window_v: f64,
}

fn tune(config: &PipelineConfig, out: &Path) -> CliResult<()> {
    let seeds = config.seeds();
    let spec = CohortSpec { n_cells: config.tune.n_cells, ..config.training_spec() };
    let cells = synth_cohort(&CellModel::reference(), &spec)?;
    let budget = eapsort_core::nsga2::SearchBudget { seed: derive_seed(seeds.tune, 0), ..config.tune.budget.clone() };
    let problem = cnn_search_problem(regression_dataset(&cells)?, budget)?;
    let options = eapsort_core::nsga2::NsgaOptions { seed: derive_seed(seeds.tune, 1), ..config.tune.nsga.clone() };
    let result = evolve_observed(&problem, &options, |generation, population| {
        let feasible = population.iter().filter(|i| i.feasible).count();
        eprintln!("generation {generation}: {feasible} feasible");
    })?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let front_path = out.join("front.csv");
    let file = std::fs::File::create(&front_path).map_err(|e| io_failure(&front_path, e))?;
    write_front_csv(&problem, &result.pareto, std::io::BufWriter::new(file))?;
    let mut entries: Vec<FrontEntry> = result
        .pareto
        .iter()
        .filter_map(|ind| {
            let config = problem.decode(&ind.genes).ok()?;
            Some(FrontEntry { config, sse_mah2: ind.objectives[0], window_v: ind.objectives[1] })
        })
        .collect();
    entries.sort_by(|a, b| a.sse_mah2.total_cmp(&b.sse_mah2));
    write_json(&out.join("tune.json"), &entries)?;
    eprintln!("{} Pareto configurations after {} evaluations", entries.len(), result.evaluations);
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    input: PathBuf,
    source: &'static str,
    dq_fp_mah: Vec<f64>,
    eaps: Eaps,
    capacity_mah: f64,
    loss: f64,
    converged: bool,
}

fn is_ocv_file(path: &Path) -> CliResult<bool> {
    let file = std::fs::File::open(path).map_err(|e| io_failure(path, e))?;
    let mut header = String::new();
    std::io::BufReader::new(file).read_line(&mut header).map_err(|e| io_failure(path, e))?;
    Ok(header.split(',').any(|c| c.trim() == OCV_COLUMNS[0]))
}

fn estimate_one(config: &PipelineConfig, out: &Path, input: &Path, model: Option<&Path>) -> CliResult<()> {
    let (source, dq) = if is_ocv_file(input)? {
        let curve = read_ocv_csv(input)?;
        let fp = extract_feature_points(&curve).map_err(PipelineError::from)?;
        ("ocv", fp.dq_fp.to_vec())
    } else {
        let path = model
            .or(config.regressor.model.as_deref())
            .ok_or_else(|| Failure::Usage("charging records need --model or regressor.model".into()))?;
        let model = load_regressor(path)?;
        let full = window_ic(&read_record_csv(input)?)?;
        let x = match model.network.config() {
            Some(cnn) => slice_window(&full, cnn),
            None => full,
        };
        ("record", model.predict(&x)?)
    };
    let opts = PsoGaOptions { seed: derive_seed(config.seeds().estimator, 0), ..config.estimator.options };
    let est = estimate(&CellModel::reference(), &dq, &config.estimator.bounds, &opts)?;
    let output = EstimateOutput {
        input: input.to_path_buf(),
        source,
        dq_fp_mah: dq,
        eaps: est.eaps,
        capacity_mah: est.capacity_mah,
        loss: est.loss,
        converged: est.converged,
    };
    write_json(&out.join("estimate.json"), &output)?;
    println!(
        "q_pe {:.3} mAh, q_ne {:.3} mAh, q_offset {:.3} mAh, capacity {:.3} mAh",
        est.eaps.q_pe, est.eaps.q_ne, est.eaps.q_offset, est.capacity_mah
    );
    Ok(())
}

fn sort(config: &PipelineConfig, out: &Path) -> CliResult<()> {
    let regressor = config.regressor.model.as_deref().map(load_regressor).transpose()?;
    let trained_here = regressor.is_none();
    let models = prepare_models(config, &training_cohort(config)?, regressor)?;
    if trained_here {
        save_regressor(&out.join("model.eapcnn"), &models.regressor)?;
    }
    let report = run_sort(config, &load_inputs(config)?, models)?;
    emit(&report, out)?;
    let k = report.methods.first().map_or(0, |m| m.k);
    eprintln!(
        "sorted {} cells into {k} groups ({} quarantined); report in {}",
        report.cells.len(),
        report.quarantined.len(),
        out.display()
    );
    for row in &report.avg_sd {
        eprintln!(
            "{:>5}  Q_cell {:7.3}  Q_PE {:7.3}  Q_NE {:7.3}  Q_offset {:7.3} mAh",
            row.method, row.sd_qcell_mah, row.sd_qpe_mah, row.sd_qne_mah, row.sd_qoffset_mah
        );
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let config = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth { training } => synth(&config, out, *training),
        Command::Train { evaluate } => train(&config, out, *evaluate),
        Command::Tune => tune(&config, out),
        Command::Estimate { input, model } => estimate_one(&config, out, input, model.as_deref()),
        Command::Sort => sort(&config, out),
        Command::Report { from } => {
            let report = read_report_json(&from.as_deref().unwrap_or(out).join("report.json"))?;
            emit(&report, out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
