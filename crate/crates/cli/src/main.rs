//! Command-line front end: run the pipeline, evaluate trajectories, and
//! generate or thin synthetic datasets.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 dataset or I/O,
//! 5 pipeline or evaluation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use semslam::config::{load_config, ConfigError, RunConfig};
use semslam::dataset::{
    read_calibration, read_groundtruth, read_pose_file, write_label_file, write_scan_file, write_trajectory, DatasetError,
    DatasetSource, ScanSource,
};
use semslam::error::SlamError;
use semslam::geometry::Pose;
use semslam::metrics::{evaluate_ate, evaluate_rel};
use semslam::pipeline::{export_maps, run_slam, ThreadMode};
use semslam::relocalization::simulate_dropped_frames;
use semslam::synthetic::{PathShape, SyntheticConfig, SyntheticWorld};

#[derive(Parser)]
#[command(name = "semslam", version, about = "Semantic graph LiDAR SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run SLAM over a scan directory.
    Run(RunArgs),
    /// Compare a trajectory file with ground truth.
    Eval(EvalArgs),
    /// Write a synthetic dataset (scans, labels, poses).
    Synth(SynthArgs),
    /// Remove runs of consecutive scans from a dataset.
    Drop(DropArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory of `.bin` scans.
    #[arg(long)]
    scans: PathBuf,
    /// Directory of `.label` files, one per scan.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Ground-truth pose file, one 3×4 row-major pose per line.
    #[arg(long)]
    groundtruth: Option<PathBuf>,
    /// KITTI `calib.txt`; its `Tr` extrinsic maps camera-frame ground truth
    /// into the sensor frame.
    #[arg(long)]
    calib: Option<PathBuf>,
}

impl DatasetArgs {
    fn open(&self) -> Result<DatasetSource, DatasetError> {
        let source = DatasetSource::open(&self.scans, self.labels.clone(), self.groundtruth.clone())?;
        Ok(match &self.calib {
            Some(path) => source.with_extrinsic(read_calibration(path)?),
            None => source,
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// TOML config file; `--set` overrides apply on top of it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set preprocess.voxel_size=0.4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for trajectory, maps and run log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run front end and back end interleaved on one thread.
    #[arg(long)]
    single_thread: bool,
    /// Disable relocalization (same as `--set relocalization.enabled=false`).
    #[arg(long)]
    no_reloc: bool,
    /// Disable loop closing.
    #[arg(long)]
    no_loops: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory; `nan` lines mark lost scans.
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    groundtruth: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with synthetic-world settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of frames; 0 means one lap of a closed path.
    #[arg(long)]
    frames: Option<usize>,
    /// Straight path of this length instead of the default ellipse.
    #[arg(long)]
    straight: Option<f64>,
    /// Gaussian point noise, meters.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct DropArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Consecutive scans removed per window.
    #[arg(long)]
    run: usize,
    /// Window length in scans.
    #[arg(long, default_value_t = 200)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 3;
        }
        if cause.is::<DatasetError>() || cause.is::<std::io::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<SlamError>() {
            return match e {
                SlamError::Config(_) => 3,
                SlamError::Dataset(_) | SlamError::Io { .. } => 4,
                _ => 5,
            };
        }
    }
    5
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Drop(a) => cmd_drop(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let base = match &a.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&a.overrides)?;
    if a.no_reloc {
        cfg.relocalization.enabled = false;
    }
    if a.no_loops {
        cfg.loop_closing.enabled = false;
    }
    let source = a.dataset.open()?;
    let mode = if a.single_thread { ThreadMode::Single } else { ThreadMode::Dual };
    let output = run_slam(&cfg, &source, mode)?;
    if let Some(dir) = &a.out {
        export_maps(dir, &source, &output, &cfg)?;
        info!("outputs written to {}", dir.display());
    }
    println!("{}", serde_json::to_string_pretty(&output.run_log())?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let estimate = read_pose_file(&a.estimate)?;
    let truth = read_groundtruth(&a.groundtruth, &Pose::identity())?;
    let ate = evaluate_ate(&estimate, &truth).map_err(SlamError::from)?;
    let rel = evaluate_rel(&estimate, &truth).ok();
    let report = serde_json::json!({
        "ate_rmse": ate,
        "relative": rel,
        "valid_poses": estimate.iter().filter(|p| p.is_some()).count(),
        "poses": estimate.len(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn write_dataset(out: &Path, source: &dyn ScanSource, indices: &[usize], truth: Option<&[Pose]>) -> Result<()> {
    let scans = out.join("velodyne");
    let labels = out.join("labels");
    fs::create_dir_all(&scans).with_context(|| format!("creating {}", scans.display()))?;
    fs::create_dir_all(&labels).with_context(|| format!("creating {}", labels.display()))?;
    for (slot, &index) in indices.iter().enumerate() {
        let scan = source.scan(index)?;
        let name = format!("{slot:06}");
        write_scan_file(&scans.join(format!("{name}.bin")), &scan)?;
        write_label_file(&labels.join(format!("{name}.label")), &scan)?;
    }
    if let Some(truth) = truth {
        let poses: Vec<Option<Pose>> = indices.iter().map(|&i| truth.get(i).copied()).collect();
        write_trajectory(&out.join("poses.txt"), &poses)?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(ConfigError::from)?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.frames {
        cfg.frames = f;
    }
    if let Some(len) = a.straight {
        cfg.shape = PathShape::Straight { length: len };
    }
    if let Some(n) = a.noise {
        cfg.point_noise = n;
    }
    let world = SyntheticWorld::generate(&cfg);
    let indices: Vec<usize> = (0..world.len()).collect();
    write_dataset(&a.out, &world, &indices, Some(&world.poses))?;
    let settings = toml::to_string_pretty(&cfg).context("serializing synthetic settings")?;
    fs::write(a.out.join("synthetic.toml"), settings).context("writing synthetic.toml")?;
    info!(
        "wrote {} scans with {} instances to {}",
        world.len(),
        world.instances.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_drop(a: DropArgs) -> Result<()> {
    if a.run >= a.window {
        return Err(ConfigError::Range {
            key: "run",
            value: a.run.to_string(),
            expected: "< window",
        }
        .into());
    }
    let source = a.dataset.open()?;
    let kept = simulate_dropped_frames(source.len(), a.run, a.window, a.seed);
    let truth = source.groundtruth()?;
    write_dataset(&a.out, &source, &kept, truth.as_deref())?;
    let list: String = kept.iter().map(|i| format!("{i}\n")).collect();
    fs::write(a.out.join("kept.txt"), list).context("writing kept.txt")?;
    info!("kept {} of {} scans", kept.len(), source.len());
    Ok(())
}
