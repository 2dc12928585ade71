use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocusurf::camera::Pose6DoF;
use ocusurf::cli::{
    cmd_eval, cmd_fit_sphere, cmd_mosaic, cmd_register, cmd_synth, parse_region, read_poses,
    CliError, Overrides, PairPaths, RunConfig,
};

/// Ocular surface registration from monocular slit-lamp frames.
///
/// Exit codes: 0 success, 1 other failure, 2 missing input or bad usage,
/// 3 degenerate geometry, 4 unwritable output.
#[derive(Parser, Debug)]
#[command(name = "ocusurf", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed for trajectories, textures and multi-start perturbations [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Loss weights profile: "paper" (0.85 SRL, 0.15 recon, 0.15 SSIM,
    /// 0.04 DS, 10000 SFL, presence threshold 0.5) or "synthetic" [default: paper].
    #[arg(long, global = true)]
    weights_profile: Option<String>,
    /// Directory for all outputs [default: out].
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Frame interval between paired frames [default: 10].
    #[arg(long, global = true)]
    frame_step: Option<usize>,
    /// Minimum fraction of the frame a region must cover to enter the
    /// sphere-fitting term [default: profile value, 0.5 for paper].
    #[arg(long, global = true)]
    sfl_threshold: Option<f64>,
    /// Pairs whose SRL percentage is not below this are filtered out [default: 5].
    #[arg(long, global = true)]
    srl_filter_percent: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic sequence with depth, labels, poses and annotations.
    Synth,
    /// Fit a sphere to one region of a depth map.
    FitSphere {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        /// cornea or sclera.
        #[arg(long, default_value = "cornea")]
        region: String,
    },
    /// Estimate the target-to-source pose of a frame pair.
    Register(PairArgs),
    /// Score tracked annotations over frame pairs of a scene.
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        /// Camera-from-world pose per annotated frame, 6 numbers per line.
        #[arg(long)]
        poses: PathBuf,
        /// Directory holding depth_<frame>.dpth files.
        #[arg(long)]
        depth_dir: PathBuf,
    },
    /// Register a pair and stitch it when its SRL passes the filter.
    Mosaic {
        #[command(flatten)]
        pair: PairArgs,
        /// Use this pose file (first line) instead of registering.
        #[arg(long)]
        pose: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    target_frame: PathBuf,
    #[arg(long)]
    target_seg: PathBuf,
    #[arg(long)]
    target_depth: PathBuf,
    #[arg(long)]
    source_frame: PathBuf,
    #[arg(long)]
    source_seg: PathBuf,
}

impl From<PairArgs> for PairPaths {
    fn from(a: PairArgs) -> Self {
        PairPaths {
            target_frame: a.target_frame,
            target_seg: a.target_seg,
            target_depth: a.target_depth,
            source_frame: a.source_frame,
            source_seg: a.source_seg,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ov = Overrides {
        seed: cli.seed,
        weights_profile: cli.weights_profile,
        output_dir: cli.output_dir,
        frame_step: cli.frame_step,
        sfl_threshold: cli.sfl_threshold,
        srl_filter_percent: cli.srl_filter_percent,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::Synth => {
            let out = cmd_synth(&cfg)?;
            println!("frames = {}", out.frames);
            println!("poses = {}", out.poses_path.display());
            println!("annotations = {}", out.annotations_path.display());
        }
        Command::FitSphere { depth, seg, region } => {
            let s = cmd_fit_sphere(&cfg, &depth, &seg, parse_region(&region)?)?;
            print!("{}", s.to_kv_string());
        }
        Command::Register(pair) => {
            let out = cmd_register(&cfg, &pair.into())?;
            let r = &out.result;
            let a = r.pose.to_array();
            println!("pose = {} {} {} {} {} {}", a[0], a[1], a[2], a[3], a[4], a[5]);
            println!("converged = {}", r.converged);
            println!("diverged = {}", r.diverged);
            println!("outputs = {}", cfg.output_dir.display());
        }
        Command::Eval {
            annotations,
            poses,
            depth_dir,
        } => {
            let report = cmd_eval(&cfg, &annotations, &poses, &depth_dir)?;
            println!("{}", report.summary());
        }
        Command::Mosaic { pair, pose } => {
            let pose: Option<Pose6DoF> = match pose {
                Some(p) => Some(
                    *read_poses(&p)?
                        .first()
                        .ok_or_else(|| CliError::Usage(format!("{} holds no pose", p.display())))?,
                ),
                None => None,
            };
            let out = cmd_mosaic(&cfg, &pair.into(), pose)?;
            println!("srl_percent = {}", out.srl_percent);
            println!("kept = {}", out.kept);
            if let Some(p) = out.mosaic_path {
                println!("mosaic = {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
