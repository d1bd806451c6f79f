//! Command-line driver for the two-stage impedance tomography pipeline:
//! dataset generation, potential-network training, conductivity
//! reconstruction, scoring, and figure rendering.
//!
//! Every subcommand accepts `--config FILE` pointing at a JSON file whose
//! fields mirror the flags; explicit flags override file values, which
//! override built-in defaults. Exit codes: 0 success, 1 runtime failure
//! (missing files, bad cases, diverged training), 2 usage errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use eit_core::dataset::{generate_dataset, load_dataset, Dataset, DatasetConfig};
use eit_core::error::{EitError, Result};
use eit_core::geometry::{build_grid, PotentialField};
use eit_core::metrics::{compute_metrics, MetricReport};
use eit_core::render::{read_history_csv, render_loss_curves, render_panels, write_history_csv};
use eit_core::stage1::{load_checkpoint, predict_potential, save_checkpoint, train_stage1, Stage1Config};
use eit_core::stage2::{reconstruct, LossWeights, ReconstructConfig};
use ndarray::Array2;

// --- argument definitions ---

#[derive(Parser)]
#[command(
    name = "eit-hybrid",
    version,
    about = "Two-stage electrical impedance tomography: measurements to potentials to conductivity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic measurement dataset directory.
    Gen(GenArgs),
    /// Train the boundary-voltage-to-potential network.
    TrainStage1(TrainArgs),
    /// Recover conductivity for one dataset case.
    Reconstruct(ReconstructArgs),
    /// Score finished reconstructions against ground truth.
    Evaluate(EvaluateArgs),
    /// Render comparison panels and loss curves for finished cases.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of samples to generate.
    #[arg(long)]
    n: Option<usize>,
    /// Base RNG seed; everything downstream is deterministic in it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Measurement noise level as a fraction of the voltage spread.
    #[arg(long)]
    noise: Option<f64>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// File form of the gen settings; every field optional.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenFile {
    n_samples: Option<usize>,
    seed: Option<u64>,
    grid_n: Option<usize>,
    mesh_target_h: Option<f64>,
    electrodes: Option<usize>,
    coverage: Option<f64>,
    contact_impedance: Option<f64>,
    family_weights: Option<[f64; 3]>,
    noise_level: Option<f64>,
    split_fractions: Option<(f64, f64, f64)>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    seed: Option<u64>,
    patience: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stage-1 checkpoint; unused with --oracle-u.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Sample index within the dataset.
    #[arg(long)]
    case: Option<usize>,
    /// Output directory for this case.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with loss weight overrides.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use the stored ground-truth potential instead of the network's.
    #[arg(long)]
    oracle_u: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReconstructFile {
    data: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    case: Option<usize>,
    out: Option<PathBuf>,
    weights: Option<LossWeights>,
    oracle_u: Option<bool>,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory the cases came from.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding one or more reconstruction case directories.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Report output path (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateFile {
    data: Option<PathBuf>,
    results: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory holding one or more reconstruction case directories.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Output directory for figures.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlotFile {
    results: Option<PathBuf>,
    out: Option<PathBuf>,
}

// --- per-case artifacts ---

const RUN_FILE: &str = "run.json";
const SIGMA_FILE: &str = "sigma.bin";
const GT_SIGMA_FILE: &str = "gt_sigma.bin";
const HISTORY_FILE: &str = "loss_history.csv";

/// Everything a finished case directory records about how it was produced.
#[derive(Debug, Serialize, Deserialize)]
struct RunEcho {
    case: usize,
    family: String,
    grid_n: usize,
    oracle_u: bool,
    weights: LossWeights,
    steps: usize,
    lr: f64,
    seed: u64,
    runtime_seconds: f64,
    diverged_at: Option<usize>,
}

/// One entry of the evaluate report.
#[derive(Debug, Serialize, Deserialize)]
struct CaseReport {
    case: usize,
    family: String,
    oracle_u: bool,
    diverged_at: Option<usize>,
    metrics: MetricReport,
}

// --- helpers ---

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| EitError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| EitError::Data(format!("{}: {e}", path.display())))
}

fn load_file_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| EitError::InvalidArgument(format!("missing required option --{flag}")))
}

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| EitError::io(path, e))
}

fn read_field(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| EitError::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(EitError::Data(format!(
            "{}: length {} is not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / 4;
    let n = (count as f64).sqrt().round() as usize;
    if n * n != count {
        return Err(EitError::Data(format!(
            "{}: {count} values do not form a square field",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((n, n), values)
        .map_err(|e| EitError::Data(format!("{}: {e}", path.display())))
}

/// Case directories under `results`: either `results` itself (when it holds
/// a run echo directly) or each immediate subdirectory that holds one,
/// sorted by name for deterministic output.
fn case_dirs(results: &Path) -> Result<Vec<PathBuf>> {
    if results.join(RUN_FILE).is_file() {
        return Ok(vec![results.to_path_buf()]);
    }
    let entries = std::fs::read_dir(results).map_err(|e| EitError::io(results, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| EitError::io(results, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(RUN_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(EitError::Data(format!(
            "{}: no case directories with a {RUN_FILE} found",
            results.display()
        )));
    }
    Ok(dirs)
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".to_string())
}

fn check_case(ds: &Dataset, case: usize) -> Result<()> {
    let total = ds.manifest.records.len();
    if case >= total {
        return Err(EitError::InvalidArgument(format!(
            "case {case} out of range: dataset has {total} samples"
        )));
    }
    Ok(())
}

// --- subcommands ---

fn run_gen(args: GenArgs) -> Result<()> {
    let file: GenFile = load_file_config(&args.config)?;
    let defaults = DatasetConfig::default();
    let config = DatasetConfig {
        n_samples: args.n.or(file.n_samples).unwrap_or(defaults.n_samples),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        grid_n: file.grid_n.unwrap_or(defaults.grid_n),
        mesh_target_h: file.mesh_target_h.unwrap_or(defaults.mesh_target_h),
        electrodes: file.electrodes.unwrap_or(defaults.electrodes),
        coverage: file.coverage.unwrap_or(defaults.coverage),
        contact_impedance: file.contact_impedance.unwrap_or(defaults.contact_impedance),
        family_weights: file.family_weights.unwrap_or(defaults.family_weights),
        noise_level: args.noise.or(file.noise_level).unwrap_or(defaults.noise_level),
        split_fractions: file.split_fractions.unwrap_or(defaults.split_fractions),
    };
    let out = require(args.out.or(file.out), "out")?;
    std::fs::create_dir_all(&out).map_err(|e| EitError::io(&out, e))?;
    let manifest = generate_dataset(&config, &out)?;
    println!(
        "wrote {} samples (grid {}, seed {}) to {}; solver resamples: {}",
        manifest.records.len(),
        config.grid_n,
        config.seed,
        out.display(),
        manifest.resamples
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let file: TrainFile = load_file_config(&args.config)?;
    let data = require(args.data.or(file.data), "data")?;
    let out = require(args.out.or(file.out), "out")?;
    let defaults = Stage1Config::default();
    let config = Stage1Config {
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch: args.batch.or(file.batch).unwrap_or(defaults.batch),
        lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        patience: file.patience.unwrap_or(defaults.patience),
    };
    let ds = load_dataset(&data)?;
    let (model, report) = train_stage1(&ds, &config)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| EitError::io(parent, e))?;
        }
    }
    save_checkpoint(&model, &ds.manifest.stats, &config, &out)?;
    let report_path = PathBuf::from(format!("{}.report.json", out.display()));
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| EitError::Data(format!("train report: {e}")))?;
    std::fs::write(&report_path, json.clone() + "\n").map_err(|e| EitError::io(&report_path, e))?;
    println!("{json}");
    if let Some(step) = report.diverged_at {
        eprintln!("training diverged at epoch {step}; checkpoint holds the best earlier state");
        return Ok(ExitCode::FAILURE);
    }
    println!("checkpoint written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_reconstruct(args: ReconstructArgs) -> Result<ExitCode> {
    let file: ReconstructFile = load_file_config(&args.config)?;
    let data = require(args.data.or(file.data), "data")?;
    let case = require(args.case.or(file.case), "case")?;
    let out = require(args.out.or(file.out), "out")?;
    let oracle_u = args.oracle_u || file.oracle_u.unwrap_or(false);

    let weights = match &args.weights {
        Some(path) => read_json::<LossWeights>(path)?,
        None => file.weights.unwrap_or_default(),
    };
    let rc_defaults = ReconstructConfig::default();
    let rc = ReconstructConfig {
        steps: args.steps.or(file.steps).unwrap_or(rc_defaults.steps),
        lr: args.lr.or(file.lr).unwrap_or(rc_defaults.lr),
        seed: args.seed.or(file.seed).unwrap_or(rc_defaults.seed),
    };

    let ds = load_dataset(&data)?;
    check_case(&ds, case)?;
    let grid = ds.grid()?;
    let n = grid.n;

    let u = if oracle_u {
        let mut field = PotentialField {
            values: ds.u.index_axis(ndarray::Axis(0), case).mapv(|v| v as f64),
            interp_fallbacks: 0,
        };
        field.regauge(&grid);
        field
    } else {
        let ckpt = require(args.ckpt.or(file.ckpt), "ckpt")?;
        let (model, _meta) = load_checkpoint(&ckpt, Some(&ds.manifest.stats))?;
        let dv: Vec<f64> = ds
            .dv
            .index_axis(ndarray::Axis(0), case)
            .iter()
            .map(|&v| v as f64)
            .collect();
        predict_potential(&model, &dv, &ds.manifest.stats, &grid)?
    };

    let rec = reconstruct(&u, &grid, &weights, &rc)?;

    std::fs::create_dir_all(&out).map_err(|e| EitError::io(&out, e))?;
    let sigma_f32: Vec<f32> = rec.sigma.iter().map(|&v| v as f32).collect();
    write_f32(&out.join(SIGMA_FILE), &sigma_f32)?;
    let gt_f32: Vec<f32> = ds
        .sigma
        .index_axis(ndarray::Axis(0), case)
        .iter()
        .copied()
        .collect();
    write_f32(&out.join(GT_SIGMA_FILE), &gt_f32)?;
    write_history_csv(&rec.history, &out.join(HISTORY_FILE))?;
    let echo = RunEcho {
        case,
        family: ds.phantoms[case].family.tag().to_string(),
        grid_n: n,
        oracle_u,
        weights,
        steps: rc.steps,
        lr: rc.lr,
        seed: rc.seed,
        runtime_seconds: rec.wall_seconds,
        diverged_at: rec.diverged_at,
    };
    let echo_json = serde_json::to_string_pretty(&echo)
        .map_err(|e| EitError::Data(format!("run echo: {e}")))?;
    let echo_path = out.join(RUN_FILE);
    std::fs::write(&echo_path, echo_json + "\n").map_err(|e| EitError::io(&echo_path, e))?;

    let last = rec.history.last();
    println!(
        "case {case} ({}): {} steps in {:.1}s, final loss {}",
        echo.family,
        rec.history.len(),
        rec.wall_seconds,
        last.map(|b| format!("{:.4e}", b.total)).unwrap_or_default()
    );
    if let Some(step) = rec.diverged_at {
        eprintln!("reconstruction diverged at step {step}; outputs hold the last finite state");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let file: EvaluateFile = load_file_config(&args.config)?;
    let data = require(args.data.or(file.data), "data")?;
    let results = require(args.results.or(file.results), "results")?;
    let out = require(args.out.or(file.out), "out")?;

    let ds = load_dataset(&data)?;
    let grid = ds.grid()?;
    let mut report: BTreeMap<String, CaseReport> = BTreeMap::new();
    for dir in case_dirs(&results)? {
        let echo: RunEcho = read_json(&dir.join(RUN_FILE))?;
        check_case(&ds, echo.case)?;
        if echo.grid_n != grid.n {
            return Err(EitError::Data(format!(
                "{}: case grid {} does not match dataset grid {}",
                dir.display(),
                echo.grid_n,
                grid.n
            )));
        }
        let rec = read_field(&dir.join(SIGMA_FILE))?;
        let gt = ds
            .sigma
            .index_axis(ndarray::Axis(0), echo.case)
            .mapv(|v| v as f64);
        let mut metrics = compute_metrics(&rec, &gt, &grid, &ds.phantoms[echo.case])?;
        metrics.runtime_seconds = Some(echo.runtime_seconds);
        let label = dir_label(&dir);
        println!(
            "{label}: case {} ({}) rmse {:.4} rel_l2 {:.4} pearson {}",
            echo.case,
            echo.family,
            metrics.rmse,
            metrics.rel_l2,
            metrics
                .pearson
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".to_string())
        );
        report.insert(
            label,
            CaseReport {
                case: echo.case,
                family: echo.family,
                oracle_u: echo.oracle_u,
                diverged_at: echo.diverged_at,
                metrics,
            },
        );
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| EitError::Data(format!("report: {e}")))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| EitError::io(parent, e))?;
        }
    }
    std::fs::write(&out, json + "\n").map_err(|e| EitError::io(&out, e))?;
    println!("report written to {}", out.display());
    Ok(())
}

fn run_plot(args: PlotArgs) -> Result<()> {
    let file: PlotFile = load_file_config(&args.config)?;
    let results = require(args.results.or(file.results), "results")?;
    let out = require(args.out.or(file.out), "out")?;
    std::fs::create_dir_all(&out).map_err(|e| EitError::io(&out, e))?;

    for dir in case_dirs(&results)? {
        let echo: RunEcho = read_json(&dir.join(RUN_FILE))?;
        let grid = build_grid(echo.grid_n)?;
        let rec = read_field(&dir.join(SIGMA_FILE))?;
        let gt = read_field(&dir.join(GT_SIGMA_FILE))?;
        let history = read_history_csv(&dir.join(HISTORY_FILE))?;
        let label = dir_label(&dir);
        let panel = out.join(format!("{label}_panel.png"));
        let curves = out.join(format!("{label}_loss.png"));
        render_panels(&gt, &rec, &grid, &panel)?;
        render_loss_curves(&history, &curves)?;
        println!("{} -> {}, {}", label, panel.display(), curves.display());
    }
    Ok(())
}

// --- entry point ---

fn setup_threads() {
    if let Ok(value) = std::env::var("EIT_HYBRID_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    setup_threads();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(args) => run_gen(args).map(|()| ExitCode::SUCCESS),
        Command::TrainStage1(args) => run_train(args),
        Command::Reconstruct(args) => run_reconstruct(args),
        Command::Evaluate(args) => run_evaluate(args).map(|()| ExitCode::SUCCESS),
        Command::Plot(args) => run_plot(args).map(|()| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
