//! Command-line pipeline: simulate datasets, recover the scan trajectory,
//! run the blind reconstruction, refocus, segment, and aggregate metrics.
//!
//! Every command reads and writes plain files (JSON, PNG, CFLD); failures
//! exit non-zero with a machine-readable JSON error on stderr.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ptycholens::dataset::{
    ground_truth_path, load_dataset, load_error_history, load_poses, save_dataset,
    save_error_history, save_focus_scan, save_poses, save_report, write_amplitude_preview,
    write_error_history_plot, write_label_png, write_phase_preview, GroundTruthData, RunReport,
};
use ptycholens::field::ComplexField;
use ptycholens::metrics;
use ptycholens::recovery::{
    data_error, initialize, FrameOrder, Reconstruction, RecoveryParams, RecoveryState,
};
use ptycholens::registration::{
    estimate_trajectory, low_confidence_frames, RegistrationConfig, ScanPose,
};
use ptycholens::refocus::{autofocus, refocus, FocusMetric};
use ptycholens::segmentation::{segment_phase, SegmentationParams, ThresholdMethod};
use ptycholens::simulator::{run_simulation, SimulationConfig};
use ptycholens::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ptycholens",
    about = "Diffuser-modulated lensless microscopy: simulation and blind reconstruction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a measurement dataset from a JSON config.
    Simulate(SimulateArgs),
    /// Recover the diffuser trajectory from the raw frames.
    Register(RegisterArgs),
    /// Jointly recover the object wavefront and the diffuser profile.
    Reconstruct(ReconstructArgs),
    /// Propagate a recovered wavefront through an axial focus scan.
    Refocus(RefocusArgs),
    /// Segment cells on the phase of a recovered wavefront.
    Segment(SegmentArgs),
    /// Aggregate quality metrics against stored ground truth.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the number of frames in the config.
    #[arg(long)]
    frames: Option<usize>,
    /// Override the trajectory seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip writing ground-truth files next to the frames.
    #[arg(long)]
    no_ground_truth: bool,
}

#[derive(Args, Clone)]
struct RegistrationFlags {
    /// Sub-pixel refinement factor (estimates quantized to 1/this pixel).
    #[arg(long, default_value_t = 50)]
    subpixel: usize,
    /// Largest accepted |shift| in high-resolution pixels.
    #[arg(long, default_value_t = 120.0)]
    max_shift: f64,
    /// Chain frame-to-frame estimates instead of anchoring to frame 0.
    #[arg(long)]
    chained: bool,
}

impl RegistrationFlags {
    fn config(&self) -> RegistrationConfig {
        RegistrationConfig {
            subpixel_factor: self.subpixel,
            max_shift_px: self.max_shift,
            chained: self.chained,
            ..RegistrationConfig::default()
        }
    }
}

#[derive(Args)]
struct RegisterArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    dataset: PathBuf,
    /// Output poses JSON path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    registration: RegistrationFlags,
    /// Warn about frames whose correlation confidence falls below this.
    #[arg(long, default_value_t = 0.2)]
    min_confidence: f64,
}

#[derive(Copy, Clone, ValueEnum)]
enum LowConfidencePolicy {
    /// Abort the reconstruction.
    Fail,
    /// Drop flagged frames and their measurements.
    Drop,
    /// Keep flagged frames.
    Keep,
}

#[derive(Copy, Clone, ValueEnum)]
enum FrameOrderArg {
    Acquisition,
    Shuffled,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the recovered fields and diagnostics.
    #[arg(long)]
    out: PathBuf,
    /// Poses JSON; when omitted the trajectory is recovered blindly.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[command(flatten)]
    registration: RegistrationFlags,
    /// Number of outer iterations.
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha_obj: f64,
    #[arg(long, default_value_t = 0.2)]
    alpha_pt: f64,
    #[arg(long, default_value_t = 0.7)]
    beta_obj: f64,
    #[arg(long, default_value_t = 0.8)]
    beta_pt: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, value_enum, default_value_t = FrameOrderArg::Acquisition)]
    frame_order: FrameOrderArg,
    #[arg(long, default_value_t = 0)]
    shuffle_seed: u64,
    /// Largest accepted |pose| component in high-resolution pixels.
    #[arg(long, default_value_t = 160.0)]
    max_pose: f64,
    /// Freeze the diffuser (use with --diffuser to reuse a recovered one).
    #[arg(long)]
    no_update_diffuser: bool,
    /// Initial diffuser profile (CFLD) instead of the all-one start.
    #[arg(long)]
    diffuser: Option<PathBuf>,
    /// Confidence below which a frame counts as unreliable.
    #[arg(long, default_value_t = 0.2)]
    min_confidence: f64,
    /// What to do with unreliable frames.
    #[arg(long, value_enum, default_value_t = LowConfidencePolicy::Fail)]
    on_low_confidence: LowConfidencePolicy,
}

#[derive(Copy, Clone, ValueEnum)]
enum MetricArg {
    NormalizedVariance,
    Tamura,
}

#[derive(Args)]
struct RefocusArgs {
    /// Recovered wavefront (CFLD).
    #[arg(long)]
    field: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    z_min: f64,
    #[arg(long, allow_negative_numbers = true)]
    z_max: f64,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::NormalizedVariance)]
    metric: MetricArg,
    /// Write an amplitude preview for every scanned plane.
    #[arg(long)]
    export_planes: bool,
}

#[derive(Args)]
struct SegmentArgs {
    /// Recovered wavefront (CFLD); its phase map is segmented.
    #[arg(long)]
    field: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Fixed phase threshold in radians (default: Otsu from the histogram).
    #[arg(long)]
    threshold_rad: Option<f64>,
    #[arg(long, default_value_t = 3.0)]
    min_seed_separation: f64,
    #[arg(long, default_value_t = 1.0)]
    smoothing_sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    oversize_factor: f64,
    #[arg(long, default_value_t = 3)]
    max_refine_rounds: usize,
    #[arg(long, default_value_t = 2.0)]
    contrast_gain: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Dataset directory the reconstruction came from.
    #[arg(long)]
    dataset: PathBuf,
    /// Reconstruction output directory.
    #[arg(long)]
    recon: PathBuf,
    /// Output directory for report.json and figures.
    #[arg(long)]
    out: PathBuf,
    /// Segmentation statistics JSON to fold into the report.
    #[arg(long)]
    segmentation: Option<PathBuf>,
    /// Expected cell count for the segmentation error metric.
    #[arg(long)]
    expected_cells: Option<usize>,
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::DegenerateInput(_) => "degenerate_input",
        Error::NumericFailure(_) | Error::NumericFailureAt { .. } => "numeric_failure",
        Error::Dataset(_) => "dataset",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::PngDecode(_) | Error::PngEncode(_) => "png",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.to_string(),
                "kind": error_kind(&err),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Register(args) => register(args),
        Command::Reconstruct(args) => reconstruct(args),
        Command::Refocus(args) => run_refocus(args),
        Command::Segment(args) => segment(args),
        Command::Report(args) => report(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)?;
    let mut config: SimulationConfig = serde_json::from_str(&text)?;
    if let Some(frames) = args.frames {
        config.trajectory.n_frames = frames;
    }
    if let Some(seed) = args.seed {
        config.trajectory.seed = seed;
    }
    let sim = run_simulation(&config)?;
    let ground_truth = if args.no_ground_truth {
        None
    } else {
        Some(GroundTruthData {
            object: Some(&sim.object),
            diffuser: Some(&sim.diffuser),
            poses: Some(&sim.poses),
        })
    };
    let manifest = save_dataset(
        &args.out,
        &sim.geometry,
        &sim.measurements,
        ground_truth,
        Some(&config.noise),
    )?;
    println!(
        "wrote {} frames ({}x{} px) to {}",
        manifest.n_frames,
        sim.measurements[0].image.height(),
        sim.measurements[0].image.width(),
        args.out.display()
    );
    Ok(())
}

fn register(args: RegisterArgs) -> Result<()> {
    let (manifest, frames) = load_dataset(&args.dataset)?;
    let geometry = manifest.geometry()?;
    let poses = estimate_trajectory(&frames, &geometry, &args.registration.config())?;
    let flagged = low_confidence_frames(&poses, args.min_confidence);
    if !flagged.is_empty() {
        eprintln!(
            "warning: {} frame(s) below confidence {}: {:?}",
            flagged.len(),
            args.min_confidence,
            flagged
        );
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_poses(&args.out, &poses)?;
    println!("wrote {} poses to {}", poses.len(), args.out.display());
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let (manifest, mut frames) = load_dataset(&args.dataset)?;
    let geometry = manifest.geometry()?;

    let mut poses = match &args.poses {
        Some(path) => load_poses(path)?,
        // default path is the blind workflow: recover the trajectory first
        None => estimate_trajectory(&frames, &geometry, &args.registration.config())?,
    };
    if poses.len() != frames.len() {
        return Err(Error::InvalidArgument(format!(
            "{} poses for {} frames",
            poses.len(),
            frames.len()
        )));
    }

    let flagged = low_confidence_frames(&poses, args.min_confidence);
    if !flagged.is_empty() {
        match args.on_low_confidence {
            LowConfidencePolicy::Fail => {
                return Err(Error::DegenerateInput(format!(
                    "frames {flagged:?} fall below confidence {}; pass --on-low-confidence drop|keep to proceed",
                    args.min_confidence
                )))
            }
            LowConfidencePolicy::Drop => {
                eprintln!("dropping {} low-confidence frame(s): {flagged:?}", flagged.len());
                let keep: Vec<bool> = poses
                    .iter()
                    .map(|p| !flagged.contains(&p.frame_index))
                    .collect();
                poses = poses
                    .iter()
                    .zip(&keep)
                    .filter(|(_, k)| **k)
                    .map(|(p, _)| *p)
                    .collect();
                frames = frames
                    .into_iter()
                    .zip(&keep)
                    .filter(|(_, k)| **k)
                    .map(|(f, _)| f)
                    .collect();
            }
            LowConfidencePolicy::Keep => {
                eprintln!(
                    "keeping {} low-confidence frame(s): {flagged:?}",
                    flagged.len()
                );
            }
        }
    }

    let params = RecoveryParams {
        n_iterations: args.iterations,
        alpha_obj: args.alpha_obj,
        alpha_pt: args.alpha_pt,
        beta_obj: args.beta_obj,
        beta_pt: args.beta_pt,
        momentum: args.momentum,
        frame_order: match args.frame_order {
            FrameOrderArg::Acquisition => FrameOrder::Acquisition,
            FrameOrderArg::Shuffled => FrameOrder::Shuffled {
                seed: args.shuffle_seed,
            },
        },
        update_diffuser: !args.no_update_diffuser,
        max_pose_px: args.max_pose,
        ..RecoveryParams::default()
    };

    let mut recon = match &args.diffuser {
        Some(path) => {
            let diffuser = ComplexField::read_cfld(path)?;
            let mut state = initialize(&frames, &geometry)?;
            if diffuser.data.dim() != state.diffuser.data.dim() {
                return Err(Error::DimensionMismatch(
                    "initial diffuser does not match the reconstruction grid".into(),
                ));
            }
            state.diffuser = diffuser;
            Reconstruction::with_state(&frames, &poses, &geometry, params, state)?
        }
        None => Reconstruction::new(&frames, &poses, &geometry, params)?,
    };
    recon.run()?;
    let object = recon.object()?;
    let state = recon.into_state();

    fs::create_dir_all(&args.out)?;
    object.write_cfld(args.out.join("object.cfld"))?;
    state.diffuser.write_cfld(args.out.join("diffuser.cfld"))?;
    save_error_history(args.out.join("error_history.json"), &state.error_history)?;
    save_poses(args.out.join("poses_used.json"), &poses)?;
    write_amplitude_preview(args.out.join("object_amplitude.png"), &object)?;
    write_phase_preview(args.out.join("object_phase.png"), &object)?;
    write_amplitude_preview(args.out.join("diffuser_amplitude.png"), &state.diffuser)?;
    write_phase_preview(args.out.join("diffuser_phase.png"), &state.diffuser)?;
    println!(
        "reconstruction done: final data error {:.4}, outputs in {}",
        state.error_history.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn run_refocus(args: RefocusArgs) -> Result<()> {
    let field = ComplexField::read_cfld(&args.field)?;
    let metric = match args.metric {
        MetricArg::NormalizedVariance => FocusMetric::NormalizedVariance,
        MetricArg::Tamura => FocusMetric::Tamura,
    };
    let scan = autofocus(&field, args.z_min, args.z_max, args.steps, metric)?;
    fs::create_dir_all(&args.out)?;
    save_focus_scan(args.out.join("focus_scan.json"), &scan)?;
    let best = refocus(&field, scan.best_z_um)?;
    best.write_cfld(args.out.join("refocused.cfld"))?;
    write_amplitude_preview(args.out.join("best_plane.png"), &best)?;
    if args.export_planes {
        for &z in &scan.z_values_um {
            let plane = refocus(&field, z)?;
            write_amplitude_preview(
                args.out.join(format!("plane_{z:+08.1}um.png")),
                &plane,
            )?;
        }
    }
    println!(
        "autofocus best z = {:.1} um over [{}, {}] um; outputs in {}",
        scan.best_z_um,
        args.z_min,
        args.z_max,
        args.out.display()
    );
    Ok(())
}

fn segment(args: SegmentArgs) -> Result<()> {
    let field = ComplexField::read_cfld(&args.field)?;
    let phase = field.phase();
    let params = SegmentationParams {
        threshold_method: match args.threshold_rad {
            Some(value_rad) => ThresholdMethod::Fixed { value_rad },
            None => ThresholdMethod::Otsu,
        },
        min_seed_separation_px: args.min_seed_separation,
        smoothing_sigma_px: args.smoothing_sigma,
        oversize_factor: args.oversize_factor,
        max_refine_rounds: args.max_refine_rounds,
        contrast_gain: args.contrast_gain,
    };
    let (labels, stats) = segment_phase(&phase, field.pitch_um, &params)?;
    fs::create_dir_all(&args.out)?;
    write_label_png(args.out.join("labels.png"), &labels)?;
    let file = fs::File::create(args.out.join("segmentation.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &stats)?;
    println!(
        "segmented {} cells ({:.0} per mm^2); outputs in {}",
        stats.n_cells,
        stats.density_per_mm2,
        args.out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct SegmentationStatsFile {
    n_cells: usize,
}

fn report(args: ReportArgs) -> Result<()> {
    let (manifest, frames) = load_dataset(&args.dataset)?;
    let geometry = manifest.geometry()?;
    let object = ComplexField::read_cfld(args.recon.join("object.cfld"))?;
    let diffuser = ComplexField::read_cfld(args.recon.join("diffuser.cfld"))?;
    let poses = load_poses(args.recon.join("poses_used.json"))?;
    let history = load_error_history(args.recon.join("error_history.json")).ok();

    let mut run_report = RunReport {
        error_history: history.clone(),
        ..RunReport::default()
    };

    // data misfit of the stored state
    let object_at_diffuser = ptycholens::propagation::PropagationKernel::without_band_limit(
        object.height(),
        object.width(),
        object.pitch_um,
        object.wavelength_um,
        geometry.d1_um,
    )?
    .apply(&object)?;
    let state = RecoveryState {
        object_at_diffuser,
        diffuser,
        error_history: history.unwrap_or_default(),
        zero_block_events: 0,
    };
    if poses.len() == frames.len() {
        run_report.final_data_error = Some(data_error(&state, &frames, &poses, &geometry)?);
    }

    if let Some(gt) = &manifest.ground_truth {
        if let Some(reference) = &gt.object_cfld {
            let truth = ComplexField::read_cfld(ground_truth_path(&args.dataset, reference))?;
            if truth.data.dim() == object.data.dim() {
                let border = 16.min(object.height() / 4);
                let mask = metrics::interior_mask(object.height(), object.width(), border);
                run_report.phase_rmse_rad =
                    Some(metrics::aligned_phase_rmse(&truth, &object, Some(&mask))?);
                run_report.amplitude_rmse =
                    Some(metrics::aligned_amplitude_rmse(&truth, &object, Some(&mask))?);
            }
        }
        if let Some(reference) = &gt.poses_json {
            let truth: Vec<ScanPose> =
                load_poses(ground_truth_path(&args.dataset, reference))?;
            if truth.len() == poses.len() {
                let errors = metrics::pose_errors(&truth, &poses)?;
                let n = errors.len() as f64;
                run_report.pose_rmse_px =
                    Some((errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt());
                run_report.pose_max_error_px =
                    Some(errors.iter().cloned().fold(0.0, f64::max));
            }
        }
    }

    if let Some(path) = &args.segmentation {
        let stats: SegmentationStatsFile =
            serde_json::from_str(&fs::read_to_string(path)?)?;
        run_report.cell_count = Some(stats.n_cells);
        if let Some(expected) = args.expected_cells {
            run_report.cell_count_error_frac =
                Some((stats.n_cells as f64 - expected as f64).abs() / expected as f64);
        }
    }

    fs::create_dir_all(&args.out)?;
    save_report(args.out.join("report.json"), &run_report)?;
    if let Some(history) = &run_report.error_history {
        write_error_history_plot(args.out.join("error_history.png"), history)?;
    }
    write_amplitude_preview(args.out.join("object_amplitude.png"), &object)?;
    write_phase_preview(args.out.join("object_phase.png"), &object)?;
    write_amplitude_preview(args.out.join("diffuser_amplitude.png"), &state.diffuser)?;
    println!(
        "report written to {} (phase RMSE: {})",
        args.out.display(),
        run_report
            .phase_rmse_rad
            .map(|v| format!("{v:.4} rad"))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}
