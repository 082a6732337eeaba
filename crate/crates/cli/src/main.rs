//! spooflab: generate, validate, and evaluate physically constrained
//! adversarial LiDAR points against 3D car detectors.
//!
//! Exit codes: 0 success, 1 attack or validation did not succeed, 2 usage
//! error, 3 I/O or detector protocol error.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{setting, FileConfig};
use spooflab_core::attack::{run_hiding_attack, AttackConfig, AttackError, GradientMode};
use spooflab_core::detector::{
    calibrate_surrogate, params_to_kv, CalibFixture, Detector, ExternalConfig, ExternalDetector,
    SurrogateDetector, SurrogateParams,
};
use spooflab_core::eval::{
    emit_report, evaluate_hiding, sweep_point_counts, EvalTarget, Report, ReportFormat,
    TargetDescriptor, DEFAULT_RECALL_THRESHOLDS, DEFAULT_SWEEP_COUNTS,
};
use spooflab_core::geometry::{cart_to_sph, CartesianPoint};
use spooflab_core::kitti::{load_frame, read_point_cloud, write_point_cloud, KittiError};
use spooflab_core::lidar::{
    azimuth_cell_count, canonical_azimuth_index, validate_physical_with_tol, AdvPoint, AdvPointSet,
    BeamTable, RayId,
};
use spooflab_core::synthetic::{render_scene, synthetic_suite};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

#[derive(Parser)]
#[command(
    name = "spooflab",
    version,
    about = "Adversarial LiDAR point injection toolkit"
)]
struct Cli {
    /// Run-config file (`key = value` lines mirroring flag names);
    /// SPOOFLAB_CONFIG names a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the LiDAR beam table as CSV (beam_index, elevation_deg).
    Beams {
        /// Sensor model; only hdl64e is built in.
        #[arg(long, default_value = "hdl64e")]
        model: String,
    },
    /// Hide one labeled car by injecting physically constrained points.
    Attack(AttackArgs),
    /// Check an attacked cloud against the physical constraints.
    Validate(ValidateArgs),
    /// Attack a target set and report ASR, recall curves, and bins.
    Eval(SuiteArgs),
    /// Report ASR as a function of the adversarial point budget.
    Sweep(SuiteArgs),
    /// Grid-search surrogate weights on fixture scenes.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Clone)]
struct AttackFlags {
    /// Adversarial point budget.
    #[arg(long)]
    points: Option<usize>,
    /// Optimization iterations per restart.
    #[arg(long)]
    iters: Option<usize>,
    /// Random re-initializations.
    #[arg(long)]
    restarts: Option<usize>,
    /// Gradient step size, meters of range.
    #[arg(long)]
    step: Option<f64>,
    /// Horizontal window available to the transmitter, degrees.
    #[arg(long = "window-deg")]
    window_deg: Option<f64>,
    /// Azimuth grid resolution, degrees.
    #[arg(long = "az-res-deg")]
    az_res_deg: Option<f64>,
    /// `surrogate` or `external:<endpoint>` where endpoint is
    /// `tcp://host:port` or `cmd:<program> [args...]`.
    #[arg(long)]
    detector: Option<String>,
    /// Gradient mode: `analytic` (surrogate only) or `fd`.
    #[arg(long)]
    grad: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Intensity of injected returns.
    #[arg(long)]
    intensity: Option<f64>,
    /// Surrogate parameter file produced by `calibrate`.
    #[arg(long = "surrogate-config")]
    surrogate_config: Option<PathBuf>,
    /// Half-extent of the surrogate anchor grid around the target, meters.
    #[arg(long = "roi-half")]
    roi_half: Option<f64>,
    /// External detector response timeout, seconds.
    #[arg(long = "timeout-sec")]
    timeout_sec: Option<u64>,
    /// Reconnect attempts for external detectors.
    #[arg(long)]
    retries: Option<u32>,
    /// Detector-call budget for finite-difference gradients.
    #[arg(long = "max-detector-calls")]
    max_detector_calls: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    flags: AttackFlags,
    /// KITTI dataset root (velodyne/, calib/, label_2/, image_2/).
    #[arg(long)]
    dataset: PathBuf,
    /// Frame id; digits are zero-padded to 6.
    #[arg(long)]
    frame: String,
    /// Index of the car label to hide.
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Output directory for the attacked cloud and the JSON report.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Attacked cloud (.bin).
    #[arg(long)]
    cloud: PathBuf,
    /// Clean baseline cloud (.bin) the attack started from.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long = "window-deg")]
    window_deg: Option<f64>,
    #[arg(long = "az-res-deg")]
    az_res_deg: Option<f64>,
    /// Angular tolerance for grid alignment, radians. The default absorbs
    /// the f32 quantization of the .bin format.
    #[arg(long = "tol-rad")]
    tol_rad: Option<f64>,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    flags: AttackFlags,
    /// KITTI dataset root; needs --frames.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated frame ids.
    #[arg(long)]
    frames: Option<String>,
    /// Use N built-in synthetic scenes instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Seed of the synthetic suite generator.
    #[arg(long = "suite-seed")]
    suite_seed: Option<u64>,
    /// Point budgets for `sweep`, comma separated.
    #[arg(long)]
    counts: Option<String>,
    /// Parallel attack tasks.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Report path; extension follows --format when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// json or csv.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    flags: AttackFlags,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    frames: Option<String>,
    /// Use N built-in synthetic fixture scenes (default 3 when no dataset
    /// is given).
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long = "suite-seed")]
    suite_seed: Option<u64>,
    /// Where to write the calibrated parameter file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: anyhow::Error) -> Failure {
    Failure { code: 3, error }
}

fn attack_failure(error: AttackError) -> Failure {
    match &error {
        AttackError::InvalidConfig(_)
        | AttackError::AnalyticUnsupported
        | AttackError::Lidar(_) => usage(anyhow!(error)),
        _ => runtime(anyhow!(error)),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let file = FileConfig::resolve(cli.config.as_deref()).map_err(usage)?;
    match cli.command {
        Command::Beams { model } => beams(&model),
        Command::Attack(args) => attack(args, &file),
        Command::Validate(args) => validate(args, &file),
        Command::Eval(args) => suite(args, &file, SuiteKind::Eval),
        Command::Sweep(args) => suite(args, &file, SuiteKind::Sweep),
        Command::Calibrate(args) => calibrate(args, &file),
    }
}

fn beams(model: &str) -> Result<ExitCode, Failure> {
    if model != "hdl64e" {
        return Err(usage(anyhow!(
            "unknown sensor model {model}; only hdl64e is built in"
        )));
    }
    print!("{}", BeamTable::hdl64e().to_csv());
    Ok(ExitCode::SUCCESS)
}

enum DetectorSpec {
    Surrogate(SurrogateParams),
    External {
        endpoint: String,
        config: ExternalConfig,
    },
}

impl DetectorSpec {
    fn build(&self, target: &TargetDescriptor, roi_half: f64) -> Result<Box<dyn Detector + Send>> {
        match self {
            DetectorSpec::Surrogate(params) => Ok(Box::new(SurrogateDetector::new(
                params.with_roi_around(target.gt.cx, target.gt.cy, roi_half),
            ))),
            DetectorSpec::External { endpoint, config } => {
                let det = ExternalDetector::new(endpoint, config.clone())
                    .context("building external detector")?;
                Ok(Box::new(det))
            }
        }
    }
}

struct ResolvedRun {
    attack: AttackConfig,
    detector: DetectorSpec,
    roi_half: f64,
}

fn resolve_run(flags: &AttackFlags, file: &FileConfig) -> Result<ResolvedRun> {
    let defaults = AttackConfig::default();
    let window_deg = setting(flags.window_deg, file, "window-deg", 10.0)?;
    let az_res_deg = setting(flags.az_res_deg, file, "az-res-deg", 0.2)?;

    let grad_text = flags
        .grad
        .clone()
        .or_else(|| file.get_str("grad").map(str::to_string))
        .unwrap_or_else(|| "analytic".to_string());
    let gradient_mode = match grad_text.as_str() {
        "analytic" => GradientMode::Analytic,
        "fd" | "finite-difference" => GradientMode::FiniteDifference,
        other => bail!("unknown gradient mode {other}; use analytic or fd"),
    };

    let attack = AttackConfig {
        points: setting(flags.points, file, "points", defaults.points)?,
        restarts: setting(flags.restarts, file, "restarts", defaults.restarts)?,
        iterations: setting(flags.iters, file, "iters", defaults.iterations)?,
        step_size: setting(flags.step, file, "step", defaults.step_size)?,
        gradient_mode,
        max_detector_calls: match flags.max_detector_calls {
            Some(v) => Some(v),
            None => file.get_parsed::<usize>("max-detector-calls")?,
        },
        window: window_deg.to_radians(),
        azimuth_resolution: az_res_deg.to_radians(),
        adv_intensity: setting(flags.intensity, file, "intensity", defaults.adv_intensity)?,
        seed: setting(flags.seed, file, "seed", defaults.seed)?,
        ..defaults
    };

    let detector_text = flags
        .detector
        .clone()
        .or_else(|| file.get_str("detector").map(str::to_string))
        .unwrap_or_else(|| "surrogate".to_string());
    let detector = if detector_text == "surrogate" {
        let mut params = SurrogateParams::default();
        let surrogate_file = flags
            .surrogate_config
            .clone()
            .or_else(|| file.get_str("surrogate-config").map(PathBuf::from));
        if let Some(path) = surrogate_file {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading surrogate config {}", path.display()))?;
            params
                .apply_kv(&text)
                .map_err(|e| anyhow!("surrogate config {}: {e}", path.display()))?;
        }
        DetectorSpec::Surrogate(params)
    } else if let Some(endpoint) = detector_text.strip_prefix("external:") {
        DetectorSpec::External {
            endpoint: endpoint.to_string(),
            config: ExternalConfig {
                timeout: Duration::from_secs(setting(flags.timeout_sec, file, "timeout-sec", 30)?),
                retries: setting(flags.retries, file, "retries", 1)?,
                threshold: 0.3,
            },
        }
    } else {
        bail!("unknown detector {detector_text}; use surrogate or external:<endpoint>")
    };

    if attack.gradient_mode == GradientMode::Analytic
        && matches!(detector, DetectorSpec::External { .. })
    {
        bail!("external detectors provide no analytic gradients; use --grad fd");
    }

    Ok(ResolvedRun {
        attack,
        detector,
        roi_half: setting(flags.roi_half, file, "roi-half", 6.0)?,
    })
}

fn attack(args: AttackArgs, file: &FileConfig) -> Result<ExitCode, Failure> {
    let run = resolve_run(&args.flags, file).map_err(usage)?;
    let frame = load_frame(&args.dataset, &args.frame).map_err(|e| runtime(anyhow!(e)))?;
    let boxes = frame.lidar_boxes().map_err(|e| runtime(anyhow!(e)))?;
    if boxes.is_empty() {
        return Err(usage(anyhow!(
            "frame {} has no car labels to target",
            frame.frame_id
        )));
    }
    let gt = *boxes.get(args.target).ok_or_else(|| {
        usage(anyhow!(
            "target index {} out of range; frame {} has {} car labels",
            args.target,
            frame.frame_id,
            boxes.len()
        ))
    })?;

    let descriptor = TargetDescriptor::new(frame.frame_id.clone(), gt);
    let beams = BeamTable::hdl64e();
    let mut detector = run
        .detector
        .build(&descriptor, run.roi_half)
        .map_err(runtime)?;
    let result = run_hiding_attack(
        &frame.cloud,
        &frame.frame_id,
        Some(frame.image_path.as_path()),
        &gt,
        detector.as_mut(),
        &beams,
        &run.attack,
    )
    .map_err(attack_failure)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(runtime)?;
    let cloud_path = args.out.join(format!("{}_adv.bin", frame.frame_id));
    write_point_cloud(&result.final_cloud, &cloud_path).map_err(|e| runtime(anyhow!(e)))?;
    let report_path = args.out.join(format!("{}_report.json", frame.frame_id));
    let report = result.to_report(&run.attack);
    let json = serde_json::to_string_pretty(&report)
        .context("serializing attack report")
        .map_err(runtime)?;
    std::fs::write(&report_path, json + "\n")
        .with_context(|| format!("writing {}", report_path.display()))
        .map_err(runtime)?;

    println!(
        "{}: target {} at {:.1} m: {} after {} restart(s), {} iteration(s); wrote {} and {}",
        frame.frame_id,
        args.target,
        descriptor.distance,
        if result.success {
            "HIDDEN"
        } else {
            "still detected"
        },
        result.restarts_used,
        result.iterations_used,
        cloud_path.display(),
        report_path.display(),
    );
    Ok(if result.success {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn validate(args: ValidateArgs, file: &FileConfig) -> Result<ExitCode, Failure> {
    let window_deg = setting(args.window_deg, file, "window-deg", 10.0).map_err(usage)?;
    let az_res_deg = setting(args.az_res_deg, file, "az-res-deg", 0.2).map_err(usage)?;
    let tol = setting(args.tol_rad, file, "tol-rad", 1e-5).map_err(usage)?;
    let az_res = az_res_deg.to_radians();

    let attacked = read_point_cloud(&args.cloud).map_err(|e| runtime(anyhow!(e)))?;
    let baseline = read_point_cloud(&args.baseline).map_err(|e| runtime(anyhow!(e)))?;

    // Injected points are those not present in the baseline (f32-bit
    // multiset difference); baseline points missing from the attacked cloud
    // were displaced by strongest-return contests.
    let quad = |p: &spooflab_core::kitti::LidarPoint| {
        [
            (p.x as f32).to_bits(),
            (p.y as f32).to_bits(),
            (p.z as f32).to_bits(),
            (p.intensity as f32).to_bits(),
        ]
    };
    let mut counts: HashMap<[u32; 4], i64> = HashMap::new();
    for p in baseline.iter() {
        *counts.entry(quad(p)).or_insert(0) += 1;
    }
    let mut injected: Vec<CartesianPoint> = Vec::new();
    for p in attacked.iter() {
        let k = quad(p);
        match counts.get_mut(&k) {
            Some(c) if *c > 0 => *c -= 1,
            _ => injected.push(CartesianPoint::new(p.x, p.y, p.z)),
        }
    }
    let displaced: i64 = counts.values().sum();

    let beams = BeamTable::hdl64e();
    let n_cells = azimuth_cell_count(az_res);
    let points: Vec<AdvPoint> = injected
        .iter()
        .map(|&p| {
            // The origin cannot be a LiDAR return; NaN angles fail the
            // grid-alignment check below.
            let s = cart_to_sph(p).unwrap_or(spooflab_core::geometry::SphericalCoord {
                range: 0.0,
                azimuth: f64::NAN,
                elevation: f64::NAN,
            });
            let (beam, _) = beams.nearest_beam(s.elevation);
            let idx = canonical_azimuth_index((s.azimuth / az_res).round() as i64, n_cells);
            AdvPoint {
                ray: RayId {
                    beam,
                    azimuth_index: idx,
                },
                elevation: s.elevation,
                azimuth: s.azimuth,
                range: s.range,
                r_min: s.range,
                r_max: s.range,
            }
        })
        .collect();
    let set = AdvPointSet { points };
    let report = validate_physical_with_tol(&set, &beams, az_res, window_deg.to_radians(), tol);

    let summary = serde_json::json!({
        "injected_points": set.len(),
        "displaced_scene_points": displaced,
        "angle_tolerance_rad": tol,
        "ray_uniqueness": report.ray_uniqueness,
        "grid_alignment": report.grid_alignment,
        "azimuth_window": report.azimuth_window,
        "passed": report.passed(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

enum SuiteKind {
    Eval,
    Sweep,
}

fn gather_targets(
    dataset: Option<&Path>,
    frames: Option<&str>,
    synthetic: Option<usize>,
    suite_seed: u64,
    az_res: f64,
) -> Result<Vec<EvalTarget>> {
    let beams = BeamTable::hdl64e();
    if let Some(n) = synthetic {
        if n == 0 {
            bail!("--synthetic needs at least one scene");
        }
        return Ok(synthetic_suite(n, suite_seed)
            .iter()
            .enumerate()
            .map(|(i, spec)| EvalTarget {
                cloud: render_scene(spec, &beams, az_res),
                descriptor: TargetDescriptor::new(format!("synthetic-{i:06}"), spec.car),
            })
            .collect());
    }
    let (Some(root), Some(frames)) = (dataset, frames) else {
        bail!("provide either --synthetic N or --dataset with --frames");
    };
    let mut targets = Vec::new();
    for id in frames.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let frame = load_frame(root, id)?;
        for gt in frame.lidar_boxes()? {
            targets.push(EvalTarget {
                cloud: frame.cloud.clone(),
                descriptor: TargetDescriptor::new(frame.frame_id.clone(), gt),
            });
        }
    }
    if targets.is_empty() {
        bail!("no car targets found in the requested frames");
    }
    Ok(targets)
}

fn parse_format(format: Option<&str>, file: &FileConfig) -> Result<ReportFormat> {
    let text = format
        .map(str::to_string)
        .or_else(|| file.get_str("format").map(str::to_string))
        .unwrap_or_else(|| "json".to_string());
    match text.as_str() {
        "json" => Ok(ReportFormat::Json),
        "csv" => Ok(ReportFormat::Csv),
        other => bail!("unknown format {other}; use json or csv"),
    }
}

fn suite(args: SuiteArgs, file: &FileConfig, kind: SuiteKind) -> Result<ExitCode, Failure> {
    let run = resolve_run(&args.flags, file).map_err(usage)?;
    let suite_seed = setting(args.suite_seed, file, "suite-seed", 4242).map_err(usage)?;
    let parallelism = setting(args.parallelism, file, "parallelism", 1).map_err(usage)?;
    let format = parse_format(args.format.as_deref(), file).map_err(usage)?;
    let targets = gather_targets(
        args.dataset.as_deref(),
        args.frames.as_deref(),
        args.synthetic,
        suite_seed,
        run.attack.azimuth_resolution,
    )
    .map_err(|e| {
        if e.downcast_ref::<KittiError>().is_some() {
            runtime(e)
        } else {
            usage(e)
        }
    })?;

    let beams = BeamTable::hdl64e();
    let spec = &run.detector;
    let roi_half = run.roi_half;
    let factory = |d: &TargetDescriptor| -> Box<dyn Detector + Send> {
        spec.build(d, roi_half).expect("detector construction")
    };

    let (report, default_name) = match kind {
        SuiteKind::Eval => {
            let (report, _results) = evaluate_hiding(
                &targets,
                &run.attack,
                &beams,
                &factory,
                &DEFAULT_RECALL_THRESHOLDS,
                parallelism,
            )
            .map_err(|e| runtime(anyhow!(e)))?;
            println!(
                "eval: {} targets, ASR {:.3}",
                report.total_targets, report.asr
            );
            (Report::Eval(report), "eval_report")
        }
        SuiteKind::Sweep => {
            let counts: Vec<usize> = match args.counts.as_deref().or_else(|| file.get_str("counts"))
            {
                Some(text) => text
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| usage(anyhow!("bad --counts: {e}")))?,
                None => DEFAULT_SWEEP_COUNTS.to_vec(),
            };
            let report = sweep_point_counts(
                &targets,
                &counts,
                &run.attack,
                &beams,
                &factory,
                parallelism,
            )
            .map_err(|e| runtime(anyhow!(e)))?;
            for row in &report.rows {
                println!("sweep: {} points -> ASR {:.3}", row.points, row.asr);
            }
            (Report::Sweep(report), "sweep_report")
        }
    };

    let ext = match format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
    };
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{default_name}.{ext}")));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(runtime)?;
        }
    }
    emit_report(&report, format, &path).map_err(|e| runtime(anyhow!(e)))?;
    println!("report written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn calibrate(args: CalibrateArgs, file: &FileConfig) -> Result<ExitCode, Failure> {
    let run = resolve_run(&args.flags, file).map_err(usage)?;
    let suite_seed = setting(args.suite_seed, file, "suite-seed", 4242).map_err(usage)?;
    let base = match run.detector {
        DetectorSpec::Surrogate(params) => params,
        DetectorSpec::External { .. } => {
            return Err(usage(anyhow!(
                "calibrate applies to the surrogate detector only"
            )))
        }
    };

    let synthetic = if args.dataset.is_none() {
        args.synthetic.or(Some(3))
    } else {
        args.synthetic
    };
    let targets = gather_targets(
        args.dataset.as_deref(),
        args.frames.as_deref(),
        synthetic,
        suite_seed,
        run.attack.azimuth_resolution,
    )
    .map_err(usage)?;
    let fixtures: Vec<CalibFixture> = targets
        .iter()
        .map(|t| CalibFixture {
            cloud: t.cloud.clone(),
            cars: vec![t.descriptor.gt],
        })
        .collect();

    let params =
        calibrate_surrogate(&fixtures, &base, run.attack.seed).map_err(|e| runtime(anyhow!(e)))?;
    let text = params_to_kv(&params);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(runtime)?;
            println!(
                "calibrated on {} fixture car(s): bias {}, inside {}, above {}; wrote {}",
                fixtures.len(),
                params.bias,
                params.inside_weight,
                params.above_weight,
                path.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
