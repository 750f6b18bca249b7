//! Batch front-end for the motioncast pipeline.
//!
//! Every subcommand is a thin, deterministic wrapper over the library:
//! all randomness flows from `--seed` (or from seeds pinned in the input
//! files), identical command lines produce byte-identical artifacts
//! modulo the timestamp inside `provenance.json`, and failures exit with
//! a category-specific code and print a single machine-parsable line
//! `error[category=<name>]: <message>` on stderr.
//!
//! Exit codes: 0 success; 1 audit failed (gradcheck above tolerance);
//! 2 usage error; 3 parameter; 4 geometry; 5 shape; 6 format;
//! 7 manifest; 8 contract; 9 numeric; 10 input-not-found; 11 io.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use motioncast::dataset::{
    build_cohort, build_training_set, mix_seed, read_dataset, read_manifest, spec_hash,
    write_dataset, CohortManifest, PatientSeeds, T2Perturbation, FRAME_RATE_HZ,
};
use motioncast::drr::{normalize01, project_coronal_warped, write_pgm, CropBox};
use motioncast::error::{Error, Result};
use motioncast::eval::{
    error_decomposition, evaluate, format_metric, read_detail_csv, run_strategy_comparison,
    summarize, summary_csv, write_report, ComparisonPlan, ComparisonResult, Horizon, ReportTags,
    DECOMPOSITION_THRESHOLD_MM,
};
use motioncast::model::{load_checkpoint, ModelConfig};
use motioncast::phantom::{generate_phantom, sample_breathing, tumor_center, PhantomSpec};
use motioncast::train::{gradcheck_forecaster, train, TrainConfig};

/// Tolerance of the `gradcheck` subcommand.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "motioncast",
    version,
    about = "Synthetic breathing phantoms, DRR rendering, and tumor motion forecasting",
    propagate_version = true
)]
struct Cli {
    /// Bound the thread pool used for rendering (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a patient cohort from a manifest and pin its provenance.
    GenCohort(GenCohortArgs),
    /// Render a breathing DRR sequence to 16-bit PGM frames.
    Render(RenderArgs),
    /// Build a windowed training dataset (.tmfd) from a phantom spec.
    BuildDataset(BuildDatasetArgs),
    /// Train a forecaster on a dataset; writes checkpoints and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print ADE/FDE in mm.
    Eval(EvalArgs),
    /// Run the full patient-specific vs multi-patient comparison grid.
    Sweep(SweepArgs),
    /// Audit analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Regenerate the summary CSV from a detail CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenCohortArgs {
    /// Cohort manifest (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Phantom spec (JSON); missing fields take defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for frame_NNNNN.pgm and positions.csv.
    #[arg(long)]
    out: PathBuf,
    /// Base seed for phantom texture and breathing.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of frames at the nominal 5 Hz.
    #[arg(long = "n-drrs", default_value_t = 50)]
    n_drrs: usize,
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Phantom spec (JSON); missing fields take defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset path (.tmfd).
    #[arg(long)]
    out: PathBuf,
    /// Base seed for phantom texture and breathing.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of frames in the planning sequence.
    #[arg(long = "n-drrs", default_value_t = 500)]
    n_drrs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (.tmfd).
    dataset: PathBuf,
    /// JSON file with "model" and "train" blocks; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for best.tmck, last.tmck, history.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Use the small preset model instead of the configured one.
    #[arg(long)]
    toy: bool,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint (.tmck).
    checkpoint: PathBuf,
    /// Dataset to evaluate on (.tmfd).
    dataset: PathBuf,
    /// Optional directory for metrics.json and provenance.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON file with a "manifest" block and an optional "plan" block.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the report CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Replace the plan's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Force the small preset model.
    #[arg(long)]
    toy: bool,
    /// Override the plan's training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Replace the n_train grid with this single size.
    #[arg(long = "n-drrs")]
    n_drrs: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for parameters and probe data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Detail CSV produced by `sweep`.
    detail: PathBuf,
    /// Output directory for the regenerated summary.csv.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        // Best effort: a later duplicate initialization (tests call the
        // binary repeatedly, never twice in-process) is not an error.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global();
    }
    let outcome = match cli.command {
        Command::GenCohort(args) => run_gen_cohort(&args),
        Command::Render(args) => run_render(&args),
        Command::BuildDataset(args) => run_build_dataset(&args),
        Command::Train(args) => run_train(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Sweep(args) => run_sweep(&args),
        Command::Gradcheck(args) => run_gradcheck(&args),
        Command::Report(args) => run_report(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error[category={}]: {err}", err.category());
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        "parameter" => 3,
        "geometry" => 4,
        "shape" => 5,
        "format" => 6,
        "manifest" => 7,
        "contract" => 8,
        "numeric" => 9,
        "input-not-found" => 10,
        "io" => 11,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn read_json_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::InputNotFound(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format_at(
            0,
            format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()),
        )
    })
}

#[derive(Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    argv: Vec<String>,
    config: serde_json::Value,
    /// The only field that varies between identical reruns.
    timestamp_unix_s: u64,
}

/// Write `provenance.json` into `dir`: everything needed to re-run the
/// command, plus a timestamp.
fn write_provenance(dir: &Path, subcommand: &'static str, config: serde_json::Value) -> Result<()> {
    let record = Provenance {
        tool: "motioncast",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        argv: std::env::args().skip(1).collect(),
        config,
        timestamp_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Parameter(format!("provenance serialization: {e}")))?;
    std::fs::write(dir.join("provenance.json"), text + "\n")?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Parameter(format!("config echo: {e}")))
}

// ---------------------------------------------------------------------------
// gen-cohort
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PatientSummary {
    patient_id: String,
    seeds: PatientSeeds,
    t2_perturbation: T2Perturbation,
    spec_hash: u64,
    p_ref_mm: [f64; 3],
    amplitudes_mm: [f64; 3],
}

fn run_gen_cohort(args: &GenCohortArgs) -> Result<ExitCode> {
    let manifest: CohortManifest = read_manifest(&args.config)?;
    let cohort = build_cohort(&manifest)?;
    ensure_dir(&args.out)?;
    let patients: Vec<PatientSummary> = cohort
        .patients
        .iter()
        .map(|p| PatientSummary {
            patient_id: p.patient_id.clone(),
            seeds: p.seeds,
            t2_perturbation: p.t2_perturbation,
            spec_hash: spec_hash(&p.phantom.spec),
            p_ref_mm: p.phantom.p_ref_mm,
            amplitudes_mm: p.phantom.amplitudes_mm,
        })
        .collect();
    let summary = serde_json::json!({
        "n_patients": patients.len(),
        "patients": patients,
    });
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Parameter(format!("cohort serialization: {e}")))?;
    std::fs::write(args.out.join("cohort.json"), text + "\n")?;
    write_provenance(&args.out, "gen-cohort", to_value(&manifest)?)?;
    println!(
        "cohort: {} patients -> {}",
        cohort.patients.len(),
        args.out.join("cohort.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn run_render(args: &RenderArgs) -> Result<ExitCode> {
    let spec: PhantomSpec = read_json_config(&args.config)?;
    if args.n_drrs == 0 {
        return Err(Error::Parameter("rendering needs at least one frame".into()));
    }
    let phantom = generate_phantom(&spec, mix_seed(args.seed, "phantom", 0))?;
    let signal = sample_breathing(
        &phantom.breathing_params,
        args.n_drrs,
        FRAME_RATE_HZ,
        mix_seed(args.seed, "breathing", 0),
    )?;
    let cbox = CropBox::around_gtv(&phantom)?;
    ensure_dir(&args.out)?;
    use rayon::prelude::*;
    let frames: Vec<motioncast::drr::DrrFrame> = signal
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, &s)| -> Result<motioncast::drr::DrrFrame> {
            let raw = project_coronal_warped(&phantom, s, [0.0; 3], &cbox)?;
            let mut frame = normalize01(&raw)
                .map_err(|e| Error::Numeric(format!("frame {i}: {e}")))?;
            frame.timestamp_s = i as f64 / FRAME_RATE_HZ;
            Ok(frame)
        })
        .collect::<Result<_>>()?;
    for (i, frame) in frames.iter().enumerate() {
        let file = std::fs::File::create(args.out.join(format!("frame_{i:05}.pgm")))?;
        write_pgm(frame, std::io::BufWriter::new(file))?;
    }
    let mut positions = String::from("frame,t_s,x_mm,y_mm,z_mm\n");
    for (i, &s) in signal.samples.iter().enumerate() {
        let p = tumor_center(&phantom, s)?;
        positions.push_str(&format!(
            "{i},{},{},{},{}\n",
            i as f64 / FRAME_RATE_HZ,
            p[0],
            p[1],
            p[2]
        ));
    }
    std::fs::write(args.out.join("positions.csv"), positions)?;
    write_provenance(
        &args.out,
        "render",
        serde_json::json!({ "spec": to_value(&spec)?, "seed": args.seed, "n_drrs": args.n_drrs }),
    )?;
    println!(
        "rendered {} frames ({}x{}) -> {}",
        frames.len(),
        frames[0].width,
        frames[0].height,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// build-dataset
// ---------------------------------------------------------------------------

fn run_build_dataset(args: &BuildDatasetArgs) -> Result<ExitCode> {
    let spec: PhantomSpec = read_json_config(&args.config)?;
    let phantom = generate_phantom(&spec, mix_seed(args.seed, "phantom", 0))?;
    let ds = build_training_set(&phantom, args.n_drrs, args.seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_dataset(&ds, &args.out)?;
    if let Some(dir) = args.out.parent() {
        let dir = if dir.as_os_str().is_empty() {
            Path::new(".")
        } else {
            dir
        };
        write_provenance(
            dir,
            "build-dataset",
            serde_json::json!({
                "spec": to_value(&spec)?,
                "seed": args.seed,
                "n_drrs": args.n_drrs,
                "out": args.out.display().to_string(),
            }),
        )?;
    }
    println!(
        "dataset: {} frames, {} windows -> {}",
        args.n_drrs,
        ds.n_samples(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn run_train(args: &TrainArgs) -> Result<ExitCode> {
    let mut cfg: TrainFileConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => TrainFileConfig::default(),
    };
    if args.toy {
        cfg.model = ModelConfig::toy();
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let ds = read_dataset(&args.dataset)?;
    ensure_dir(&args.out)?;
    let outcome = train(&cfg.model, &cfg.train, &ds, Some(&args.out))?;
    write_provenance(
        &args.out,
        "train",
        serde_json::json!({
            "model": to_value(&cfg.model)?,
            "train": to_value(&cfg.train)?,
            "dataset": args.dataset.display().to_string(),
        }),
    )?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} windows: final loss {}, best epoch {} (loss {})",
        outcome.history.len(),
        ds.n_samples(),
        format_metric(last.mean_loss),
        outcome.best_epoch,
        format_metric(outcome.best_loss),
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn run_eval(args: &EvalArgs) -> Result<ExitCode> {
    let model = load_checkpoint(&args.checkpoint)?;
    let ds = read_dataset(&args.dataset)?;
    let tags = ReportTags::default();
    let full = evaluate(&model, &ds, Horizon::Full, &tags)?;
    let first = evaluate(&model, &ds, Horizon::FirstStep, &tags)?;
    println!("n_samples={}", full.per_sample_ade.len());
    println!(
        "ade_mm={} ade_sd_mm={}",
        format_metric(full.ade_mean),
        format_metric(full.ade_sd)
    );
    println!(
        "fde_mm={} fde_sd_mm={}",
        format_metric(full.fde_mean),
        format_metric(full.fde_sd)
    );
    println!(
        "first_step_ade_mm={} first_step_ade_sd_mm={}",
        format_metric(first.ade_mean),
        format_metric(first.ade_sd)
    );
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let metrics = serde_json::json!({
            "n_samples": full.per_sample_ade.len(),
            "ade_mean_mm": full.ade_mean,
            "ade_sd_mm": full.ade_sd,
            "fde_mean_mm": full.fde_mean,
            "fde_sd_mm": full.fde_sd,
            "first_step_ade_mean_mm": first.ade_mean,
            "first_step_ade_sd_mm": first.ade_sd,
        });
        let text = serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::Parameter(format!("metrics serialization: {e}")))?;
        std::fs::write(out.join("metrics.json"), text + "\n")?;
        write_provenance(
            out,
            "eval",
            serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "dataset": args.dataset.display().to_string(),
            }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFileConfig {
    manifest: CohortManifest,
    #[serde(default)]
    plan: ComparisonPlan,
}

fn contrasts_csv(result: &ComparisonResult) -> String {
    let mut s =
        String::from("n_train,session,df,t,p,significant,degenerate,ps_mean_mm,mp_mean_mm\n");
    for c in &result.contrasts {
        let ps = c.ps_patient_means.iter().sum::<f64>() / c.ps_patient_means.len() as f64;
        let mp = c.mp_patient_means.iter().sum::<f64>() / c.mp_patient_means.len() as f64;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.n_train,
            c.session,
            c.ttest.df,
            format_metric(c.ttest.t),
            format_metric(c.ttest.p),
            c.ttest.significant,
            c.ttest.degenerate,
            format_metric(ps),
            format_metric(mp),
        ));
    }
    s
}

/// One pool row per training window of each unique
/// `(n_train, target, strategy)` cell; seeds and sessions share pools.
fn pools_csv(result: &ComparisonResult) -> String {
    let mut s = String::from("n_train,target_patient,strategy,source_patient,sample_index\n");
    let mut seen = std::collections::BTreeSet::new();
    for cell in &result.cells {
        let key = (
            cell.report.n_train,
            cell.report.patient_id.clone(),
            cell.report.strategy.clone(),
        );
        if !seen.insert(key.clone()) {
            continue;
        }
        for (source, sample) in &cell.train_pool {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                key.0, key.1, key.2, source, sample
            ));
        }
    }
    s
}

fn run_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let mut cfg: SweepFileConfig = read_json_config(&args.config)?;
    // The manifest is the single authority on test-set geometry.
    cfg.plan.n_test_sequences = cfg.manifest.n_test_sequences;
    cfg.plan.test_duration_s = cfg.manifest.test_duration_s;
    cfg.plan.setup_error_bound_mm = cfg.manifest.setup_error_bound_mm;
    if let Some(seed) = args.seed {
        cfg.plan.seeds = vec![seed];
    }
    if args.toy {
        cfg.plan.model = ModelConfig::toy();
    }
    if let Some(epochs) = args.epochs {
        cfg.plan.train.epochs = epochs;
    }
    if let Some(n) = args.n_drrs {
        cfg.plan.n_train_grid = vec![n];
    }
    let cohort = build_cohort(&cfg.manifest)?;
    let result = run_strategy_comparison(&cohort, &cfg.plan)?;
    ensure_dir(&args.out)?;
    write_report(&result, &args.out)?;
    std::fs::write(args.out.join("contrasts.csv"), contrasts_csv(&result))?;
    std::fs::write(args.out.join("pools.csv"), pools_csv(&result))?;
    let decomposition = error_decomposition(&result, DECOMPOSITION_THRESHOLD_MM)?;
    let mut decomp = String::from("patient_id,strategy,modeling_error_mm,interfractional_error_mm\n");
    for row in &decomposition.rows {
        decomp.push_str(&format!(
            "{},{},{},{}\n",
            row.patient_id,
            row.strategy,
            format_metric(row.modeling_error_mm),
            format_metric(row.interfractional_error_mm),
        ));
    }
    std::fs::write(args.out.join("decomposition.csv"), decomp)?;
    write_provenance(&args.out, "sweep", to_value(&cfg)?)?;
    println!(
        "sweep: {} cells -> {}",
        result.cells.len(),
        args.out.display()
    );
    for c in &result.contrasts {
        let ps = c.ps_patient_means.iter().sum::<f64>() / c.ps_patient_means.len() as f64;
        let mp = c.mp_patient_means.iter().sum::<f64>() / c.mp_patient_means.len() as f64;
        println!(
            "n_train={} session={}: PS {} mm vs MP {} mm (t={}, p={}{})",
            c.n_train,
            c.session,
            format_metric(ps),
            format_metric(mp),
            format_metric(c.ttest.t),
            format_metric(c.ttest.p),
            if c.ttest.degenerate { ", degenerate" } else { "" },
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// The audited configurations: narrow and shallow enough to finish in
/// well under the documented budget while walking every layer type.
fn audit_configs() -> Vec<(&'static str, ModelConfig)> {
    let narrow = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        patch_size: 16,
        image_size: 32,
        t_obs: 8,
        t_pred: 3,
        dropout: 0.0,
    };
    let wide = ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 32,
        patch_size: 16,
        image_size: 32,
        t_obs: 8,
        t_pred: 3,
        dropout: 0.0,
    };
    vec![("d8-l1", narrow), ("d16-l2", wide)]
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let mut worst = 0.0_f64;
    for (label, cfg) in audit_configs() {
        let err = gradcheck_forecaster(&cfg, args.seed, 1e-4)?;
        println!(
            "gradcheck {label}: {} parameters, max relative error {}",
            cfg.param_count(),
            format_metric(err)
        );
        worst = worst.max(err);
    }
    println!("gradcheck overall: max relative error {}", format_metric(worst));
    if worst < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "error[category=audit]: gradient audit failed: {} >= {}",
            format_metric(worst),
            format_metric(GRADCHECK_TOLERANCE)
        );
        Ok(ExitCode::from(1))
    }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn run_report(args: &ReportArgs) -> Result<ExitCode> {
    let rows = read_detail_csv(&args.detail)?;
    let summary = summarize(&rows)?;
    ensure_dir(&args.out)?;
    let text = summary_csv(&summary);
    std::fs::write(args.out.join("summary.csv"), &text)?;
    write_provenance(
        &args.out,
        "report",
        serde_json::json!({ "detail": args.detail.display().to_string() }),
    )?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
