use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rigmap_core::align::pose_alignment;
use rigmap_core::eval::{
    ate, cloud_metrics, read_trajectory, replay_pipeline, run_pipeline, scale_drift_windows, write_trajectory, Alignment,
    PipelineError, RunConfig, ABLATIONS,
};
use rigmap_core::mapping::read_point_cloud;
use rigmap_core::simulator::World;
use rigmap_core::submap::{CameraRole, SyncMode};
use rigmap_core::{Pose, Vec3};

#[derive(Parser)]
#[command(name = "rigmap", version, about = "Simulate, reconstruct and score a two-camera rig without calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and save it with its ground-truth trajectory.
    Simulate(Common),
    /// Run the full pipeline and write all artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Replay a saved world instead of simulating one.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Score an estimated trajectory (and optionally a map) against ground truth.
    Eval(EvalArgs),
    /// Run the full pipeline and each ablation variant, one sub-directory per variant.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `world.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "rigmap-out")]
    out: PathBuf,
    /// Disable a module; repeatable. One of the `wo-*` variant names.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ABLATIONS))]
    ablate: Vec<String>,
    /// Assistant frames share the primary timestamps.
    #[arg(long, conflicts_with = "async_mode")]
    sync: bool,
    /// Assistant frames are offset in time and interpolated.
    #[arg(long = "async")]
    async_mode: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    None,
    Se3,
    Sim3,
}

impl From<AlignArg> for Alignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::None => Alignment::None,
            AlignArg::Se3 => Alignment::Se3,
            AlignArg::Sim3 => Alignment::Sim3,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "sim3")]
    alignment: AlignArg,
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    stride: usize,
    /// Estimated point cloud.
    #[arg(long, requires = "truth_map")]
    map: Option<PathBuf>,
    /// Ground-truth point cloud.
    #[arg(long, requires = "map")]
    truth_map: Option<PathBuf>,
    /// Write the metric table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure reported with the stage it happened in.
struct Failure {
    stage: String,
    message: String,
}

impl Failure {
    fn new(stage: &str, message: impl ToString) -> Self {
        Failure {
            stage: stage.to_string(),
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            stage: e.stage.to_string(),
            message: match &e.world {
                Some(w) => format!("{} (replay with --world {})", e.message, w.display()),
                None => e.message,
            },
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::new("config", e))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.world.seed = seed;
    }
    if c.sync {
        cfg.pipeline.mode = SyncMode::Sync;
    }
    if c.async_mode {
        cfg.pipeline.mode = SyncMode::Async;
    }
    for name in &c.ablate {
        cfg.ablation.disable(name).map_err(|e| Failure::new("config", e))?;
    }
    cfg.validate().map_err(|e| Failure::new("config", e))?;
    Ok(cfg)
}

fn simulate(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let mut world_cfg = cfg.world.clone();
    if cfg.pipeline.mode == SyncMode::Async {
        world_cfg.assistant_offset = cfg.pipeline.async_offset;
    }
    let world = World::generate(&world_cfg).map_err(|e| Failure::new("simulate", e))?;
    let io = |e: std::io::Error| Failure::new("simulate", e);
    fs::create_dir_all(&c.out).map_err(io)?;
    world.save(&c.out.join("world.json")).map_err(|e| Failure::new("simulate", e))?;
    let truth: Vec<Pose> = (0..world.frames())
        .map(|f| world.primary_pose(f).with_timestamp(world.timestamp(CameraRole::Primary, f)))
        .collect();
    let file = fs::File::create(c.out.join("trajectory_truth.tum")).map_err(io)?;
    write_trajectory(&truth, std::io::BufWriter::new(file)).map_err(io)?;
    fs::write(c.out.join("config.toml"), cfg.to_toml()).map_err(io)?;
    println!("simulated {} frames into {}", world.frames(), c.out.display());
    Ok(())
}

fn run(c: &Common, world: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let output = match world {
        Some(path) => {
            let w = World::load(path).map_err(|e| Failure::new("simulate", e))?;
            let out = replay_pipeline(&cfg, w, Some(path.to_path_buf()))?;
            out.export(&c.out)?;
            out
        }
        None => run_pipeline(&cfg, Some(&c.out))?,
    };
    print!("{}", output.report.to_csv());
    Ok(())
}

fn ablate(c: &Common) -> Result<(), Failure> {
    let mut base = load_config(c)?;
    base.ablation = Default::default();
    let mut variants: Vec<(&str, RunConfig)> = vec![("full", base.clone())];
    for name in ABLATIONS {
        if c.ablate.is_empty() || c.ablate.iter().any(|a| a == name) {
            let mut cfg = base.clone();
            cfg.ablation.disable(name).map_err(|e| Failure::new("config", e))?;
            variants.push((name, cfg));
        }
    }
    let mut table = String::from("variant,ate,ate_ratio,scale_std,chamfer\n");
    for (name, cfg) in variants {
        let out = run_pipeline(&cfg, Some(&c.out.join(name)))?;
        let r = &out.report;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let row = format!(
            "{name},{},{},{},{}\n",
            r.ate,
            r.ate_ratio,
            opt(r.scale.as_ref().map(|s| s.std)),
            opt(r.cloud.map(|m| m.chamfer))
        );
        print!("{row}");
        table.push_str(&row);
    }
    fs::write(c.out.join("ablation.csv"), table).map_err(|e| Failure::new("export", e))?;
    Ok(())
}

fn read_tum(path: &Path) -> Result<Vec<Pose>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new("eval", format!("{}: {e}", path.display())))?;
    read_trajectory(&text).map_err(|e| Failure::new("eval", format!("{}: {e}", path.display())))
}

fn read_cloud(path: &Path) -> Result<Vec<Vec3>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new("eval", format!("{}: {e}", path.display())))?;
    let pts = read_point_cloud(&text).map_err(|e| Failure::new("eval", format!("{}: {e}", path.display())))?;
    Ok(pts.into_iter().map(|(p, _)| p).collect())
}

/// Pairs poses with equal timestamps (to 1 µs).
fn associate(est: &[Pose], truth: &[Pose]) -> (Vec<Pose>, Vec<Pose>) {
    let key = |p: &Pose| (p.timestamp.unwrap_or(f64::NAN) * 1e6).round() as i64;
    let index: std::collections::HashMap<i64, &Pose> = truth.iter().map(|p| (key(p), p)).collect();
    est.iter().filter_map(|e| index.get(&key(e)).map(|g| (*e, **g))).unzip()
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let (est, gt) = associate(&read_tum(&a.estimate)?, &read_tum(&a.truth)?);
    let alignment: Alignment = a.alignment.into();
    let ep: Vec<Vec3> = est.iter().map(|p| p.translation).collect();
    let gp: Vec<Vec3> = gt.iter().map(|p| p.translation).collect();
    let result = ate(&ep, &gp, alignment).map_err(|e| Failure::new("eval", e))?;
    let mut s = String::from("metric,value\n");
    s.push_str(&format!("alignment,{}\nposes,{}\nate,{}\n", alignment.name(), ep.len(), result.rmse));
    if let Ok(d) = scale_drift_windows(&ep, &gp, a.window, a.stride) {
        s.push_str(&format!("scale_mean,{}\nscale_std,{}\n", d.mean, d.std));
    }
    if let (Some(map), Some(truth_map)) = (&a.map, &a.truth_map) {
        let align = match alignment {
            Alignment::None => None,
            other => Some(pose_alignment(&est, &gt, other == Alignment::Sim3).map_err(|e| Failure::new("eval", e))?),
        };
        let cloud: Vec<Vec3> = read_cloud(map)?
            .iter()
            .map(|p| align.map_or(*p, |t| t.apply(p)))
            .collect();
        let m = cloud_metrics(&cloud, &read_cloud(truth_map)?).map_err(|e| Failure::new("eval", e))?;
        s.push_str(&format!("accuracy,{}\ncompleteness,{}\nchamfer,{}\n", m.accuracy, m.completeness, m.chamfer));
    }
    match &a.out {
        Some(p) => fs::write(p, &s).map_err(|e| Failure::new("eval", e))?,
        None => print!("{s}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Run { common, world } => run(common, world.as_deref()),
        Command::Eval(a) => eval(a),
        Command::Ablate(c) => ablate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rigmap: stage '{}' failed: {}", f.stage, f.message);
            ExitCode::from(2)
        }
    }
}
