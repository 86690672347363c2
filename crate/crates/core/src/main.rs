use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use coopfuse::experiment::{self, Method, SweepConfig};
use coopfuse::fusion::{self, PipelineConfig};
use coopfuse::geometry::relative_transform;
use coopfuse::io::{self, FrameDocument};
use coopfuse::metrics::{self, BandwidthSpec, TransformError};
use coopfuse::rng;
use coopfuse::scenario::{self, Layout, NoiseSpec, ScenarioError, SensorSpec};

const EXIT_USAGE: u8 = 2;
const EXIT_GENERATION: u8 = 3;
const EXIT_MALFORMED: u8 = 4;
const SEED_ENV: &str = "COOPFUSE_SEED";

/// Two-vehicle cooperative 3D detection with pose-error correction.
#[derive(Debug, Parser)]
#[command(name = "coopfuse", version)]
struct Cli {
    /// Print the effective configuration and progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and write it as JSON.
    Generate(GenerateArgs),
    /// Observe a scene from both vehicles, perturb the CAV pose and fuse one frame.
    Fuse(FuseArgs),
    /// Run the pose-noise robustness sweep and write a CSV table.
    Sweep(SweepArgs),
    /// Compute the link rate f_r * n_p * n_d * n_b.
    Bandwidth(BandwidthArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed [default: config file, else $COOPFUSE_SEED, else 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of objects [default: 20].
    #[arg(long)]
    objects: Option<usize>,
    /// Scene layout: lane or uniform [default: lane].
    #[arg(long)]
    layout: Option<Layout>,
    /// Output scene file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input scene file.
    #[arg(long)]
    scene: PathBuf,
    /// Output report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write the observed detections as a frame document.
    #[arg(long)]
    frame_out: Option<PathBuf>,
    /// CAV position noise std, meters [default: 0].
    #[arg(long)]
    sigma_p_m: Option<f64>,
    /// CAV heading noise std, degrees [default: 0].
    #[arg(long)]
    sigma_phi_deg: Option<f64>,
    /// Use a noise-free sensor (no misses, jitter or false positives).
    #[arg(long)]
    ideal_sensor: bool,
    /// Fuse without association and registration.
    #[arg(long)]
    no_correction: bool,
    /// RANSAC inlier threshold, meters [default: 0.25].
    #[arg(long)]
    inlier_threshold_m: Option<f64>,
    /// RANSAC rounds [default: 50].
    #[arg(long)]
    rounds: Option<usize>,
    /// NMS IoU threshold [default: 0.15].
    #[arg(long)]
    nms_iou: Option<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the records (and the effective config) as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Trials per noise cell [default: 50].
    #[arg(long)]
    trials: Option<usize>,
    /// Objects per scene [default: 20].
    #[arg(long)]
    objects: Option<usize>,
    /// Scene layout: lane or uniform [default: lane].
    #[arg(long)]
    layout: Option<Layout>,
    /// Position noise levels, meters [default: 0,0.2,0.4,0.6,0.8,1].
    #[arg(long, value_delimiter = ',')]
    sigma_p_grid_m: Option<Vec<f64>>,
    /// Heading noise levels, degrees [default: 0,0.5,1,1.5,2,2.5].
    #[arg(long, value_delimiter = ',')]
    sigma_phi_grid_deg: Option<Vec<f64>>,
    /// Methods: no-fusion, uncorrected, corrected [default: all].
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Sweep the full position x heading grid.
    #[arg(long)]
    joint: bool,
    /// AP IoU threshold [default: 0.7].
    #[arg(long)]
    iou_min: Option<f64>,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct BandwidthArgs {
    /// Frame rate f_r, Hz.
    #[arg(long, default_value_t = 10.0)]
    frame_rate_hz: f64,
    /// Items (boxes or points) per frame n_p.
    #[arg(long, default_value_t = 20.0)]
    items_per_frame: f64,
    /// Values per item n_d.
    #[arg(long, default_value_t = 8.0)]
    dims_per_item: f64,
    /// Bits per value n_b.
    #[arg(long, default_value_t = 32.0)]
    bits_per_dim: f64,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    objects: Option<usize>,
    layout: Option<Layout>,
    sensor: Option<SensorSpec>,
    pipeline: Option<PipelineConfig>,
    sigma_p_m: Option<f64>,
    sigma_phi_deg: Option<f64>,
    sweep: Option<SweepFileConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepFileConfig {
    sigma_p_grid_m: Option<Vec<f64>>,
    sigma_phi_grid_deg: Option<Vec<f64>>,
    trials: Option<usize>,
    methods: Option<Vec<Method>>,
    joint: Option<bool>,
    iou_min: Option<f64>,
    workers: Option<usize>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
    usage: bool,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.to_string(),
            usage: true,
        }
    }

    fn with_code(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
            usage: false,
        }
    }
}

impl From<io::IoError> for Failure {
    fn from(e: io::IoError) -> Self {
        match e {
            io::IoError::Read { .. } => Failure::usage(e),
            io::IoError::Write { .. } => Failure::with_code(EXIT_USAGE, e),
            _ => Failure::with_code(EXIT_MALFORMED, e),
        }
    }
}

fn scenario_failure(e: ScenarioError) -> Failure {
    match e {
        ScenarioError::PlacementFailure { .. } => Failure::with_code(EXIT_GENERATION, e),
        _ => Failure::usage(e),
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::with_code(EXIT_MALFORMED, format!("{}: malformed config: {e}", path.display())))
}

/// Flag, then config file, then environment, then 0.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, Failure> {
    if let Some(seed) = flag.or(file) {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text
            .trim()
            .parse()
            .map_err(|e| Failure::usage(format!("{SEED_ENV}={text:?}: {e}"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(Failure::usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn echo(verbose: bool, config: &serde_json::Value) {
    if verbose {
        eprintln!("effective config: {config}");
    }
}

fn to_pretty(value: &impl Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text
}

fn cmd_generate(args: GenerateArgs, verbose: bool) -> Result<(), Failure> {
    let file = load_config(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, file.seed)?;
    let objects = args.objects.or(file.objects).unwrap_or(20);
    let layout = args.layout.or(file.layout).unwrap_or(Layout::Lane);
    let effective = json!({ "objects": objects, "layout": layout, "seed": seed });
    echo(verbose, &effective);
    let scene = scenario::generate_scene(objects, layout, seed).map_err(scenario_failure)?;
    io::write_text(&args.out, &io::scene_to_json_with(&scene, Some(effective)))?;
    println!("{} ({} objects)", args.out.display(), scene.objects.len());
    Ok(())
}

fn cmd_fuse(args: FuseArgs, verbose: bool) -> Result<(), Failure> {
    let file = load_config(args.common.config.as_deref())?;
    let scene = io::load_scene(&args.scene)?;
    let seed = resolve_seed(args.common.seed, file.seed)?;
    let sigma_p = args.sigma_p_m.or(file.sigma_p_m).unwrap_or(0.0);
    let sigma_phi_deg = args.sigma_phi_deg.or(file.sigma_phi_deg).unwrap_or(0.0);
    let mut sensor = file.sensor.unwrap_or_default();
    if args.ideal_sensor {
        sensor = SensorSpec::ideal(sensor.range, sensor.fov);
    }
    let mut pipeline = file.pipeline.unwrap_or_default();
    pipeline.registration.seed = rng::derive_seed(seed, "ransac", 0);
    if args.no_correction {
        pipeline.correction_enabled = false;
    }
    if let Some(tau) = args.inlier_threshold_m {
        pipeline.registration.inlier_threshold = tau;
    }
    if let Some(rounds) = args.rounds {
        pipeline.registration.rounds = rounds;
    }
    if let Some(iou) = args.nms_iou {
        pipeline.nms_iou_threshold = iou;
    }
    let noise = NoiseSpec {
        sigma_p,
        sigma_phi: sigma_phi_deg.to_radians(),
        seed,
    };
    noise.validate().map_err(Failure::usage)?;
    sensor.validate().map_err(Failure::usage)?;
    pipeline.validate().map_err(Failure::usage)?;
    let effective = json!({
        "scene": args.scene,
        "seed": seed,
        "sigma_p_m": sigma_p,
        "sigma_phi_deg": sigma_phi_deg,
        "sensor": sensor,
        "pipeline": pipeline,
    });
    echo(verbose, &effective);

    let ego_dets = scenario::observe(
        &scene,
        &scene.ego_pose,
        &sensor,
        &mut rng::stream(seed, "ego-observe", 0),
    );
    let cav_dets = scenario::observe(
        &scene,
        &scene.cav_pose,
        &sensor,
        &mut rng::stream(seed, "cav-observe", 0),
    );
    let reported_cav = scenario::perturb_pose(&scene.cav_pose, &noise, &mut rng::stream(seed, "pose-noise", 0));
    if let Some(path) = &args.frame_out {
        let frame = FrameDocument::new(0, scene.ego_pose, reported_cav, ego_dets.clone(), cav_dets.clone());
        io::save_frame(path, &frame)?;
    }
    let out = fusion::fuse_frame(&scene.ego_pose, &reported_cav, &ego_dets, &cav_dets, &pipeline)
        .map_err(|e| Failure::with_code(EXIT_MALFORMED, e))?;
    let truth = relative_transform(&scene.ego_pose, &scene.cav_pose);
    let corrected = TransformError::between(&truth, &out.applied_transform);
    let uncorrected = TransformError::between(&truth, &out.pose_transform);
    let inlier_ratio = out.registration.as_ref().map(|r| r.inlier_ratio);
    let report = json!({
        "config": effective,
        "mode": out.mode,
        "correction_applied": out.correction_applied,
        "pairs": out.association.pairs.len(),
        "association_converged": out.association_converged,
        "inlier_ratio": inlier_ratio,
        "rre_deg": corrected.rre_deg(),
        "rte_m": corrected.rte,
        "pose_rre_deg": uncorrected.rre_deg(),
        "pose_rte_m": uncorrected.rte,
        "applied_transform": out.applied_transform,
        "ego_detections": ego_dets.len(),
        "cav_detections": cav_dets.len(),
        "fused": out.objects,
    });
    io::write_text(&args.out, &to_pretty(&report))?;
    println!(
        "mode {} | pairs {} | inlier ratio {} | RRE {:.4} deg | RTE {:.4} m (pose only: {:.4} deg, {:.4} m) | {} fused objects -> {}",
        serde_json::to_value(out.mode).expect("mode serializes").as_str().unwrap_or_default(),
        out.association.pairs.len(),
        inlier_ratio.map_or("n/a".to_string(), |r| format!("{r:.3}")),
        corrected.rre_deg(),
        corrected.rte,
        uncorrected.rre_deg(),
        uncorrected.rte,
        out.objects.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs, verbose: bool) -> Result<(), Failure> {
    let file = load_config(args.common.config.as_deref())?;
    let fs = file.sweep.unwrap_or_default();
    let defaults = SweepConfig::default();
    let config = SweepConfig {
        sigma_p_grid: args
            .sigma_p_grid_m
            .or(fs.sigma_p_grid_m)
            .unwrap_or(defaults.sigma_p_grid),
        sigma_phi_grid_deg: args
            .sigma_phi_grid_deg
            .or(fs.sigma_phi_grid_deg)
            .unwrap_or(defaults.sigma_phi_grid_deg),
        trials_per_cell: args.trials.or(fs.trials).unwrap_or(defaults.trials_per_cell),
        n_objects: args.objects.or(file.objects).unwrap_or(defaults.n_objects),
        layout: args.layout.or(file.layout).unwrap_or(defaults.layout),
        sensor: file.sensor.unwrap_or(defaults.sensor),
        pipeline: file.pipeline.unwrap_or(defaults.pipeline),
        methods: args.methods.or(fs.methods).unwrap_or(defaults.methods),
        seed: resolve_seed(args.common.seed, file.seed)?,
        joint: args.joint || fs.joint.unwrap_or(defaults.joint),
        iou_min: args.iou_min.or(fs.iou_min).unwrap_or(defaults.iou_min),
    };
    config.validate().map_err(Failure::usage)?;
    let workers = args.workers.or(fs.workers).unwrap_or(0);
    echo(verbose, &json!({ "sweep": config, "workers": workers }));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(Failure::usage)?;
    let records = pool.install(|| experiment::run_sweep(&config)).map_err(|e| match e {
        experiment::ExperimentError::Scene { source, .. }
            if matches!(source, ScenarioError::PlacementFailure { .. }) =>
        {
            Failure::with_code(EXIT_GENERATION, source)
        }
        other => Failure::usage(other),
    })?;
    let table = experiment::compare_methods(&records).map_err(Failure::usage)?;

    let mut csv = Vec::new();
    experiment::write_csv(&records, &mut csv).map_err(Failure::usage)?;
    io::write_text(&args.out, std::str::from_utf8(&csv).expect("csv is utf-8"))?;
    let config_path = args.out.with_extension("config.json");
    io::write_text(&config_path, &to_pretty(&config))?;
    if let Some(path) = &args.json {
        let mut rows = Vec::new();
        experiment::write_json(&records, &mut rows).map_err(Failure::usage)?;
        let rows: serde_json::Value = serde_json::from_slice(&rows).expect("rows are json");
        io::write_text(path, &to_pretty(&json!({ "config": config, "records": rows })))?;
    }
    print!("{table}");
    println!(
        "{} rows -> {} (config: {})",
        records.len(),
        args.out.display(),
        config_path.display()
    );
    Ok(())
}

fn cmd_bandwidth(args: BandwidthArgs) -> Result<(), Failure> {
    let spec = BandwidthSpec {
        frame_rate: args.frame_rate_hz,
        items_per_frame: args.items_per_frame,
        dims_per_item: args.dims_per_item,
        bits_per_dim: args.bits_per_dim,
    };
    let bps = metrics::bandwidth(&spec).map_err(Failure::usage)?;
    println!("{bps} bps = {} Kbps = {} Mbps", bps / 1e3, bps / 1e6);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args, verbose),
        Command::Fuse(args) => cmd_fuse(args, verbose),
        Command::Sweep(args) => cmd_sweep(args, verbose),
        Command::Bandwidth(args) => cmd_bandwidth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            if failure.usage {
                eprintln!("\nRun `coopfuse --help` or `coopfuse <COMMAND> --help` for usage.");
            }
            ExitCode::from(failure.code)
        }
    }
}
