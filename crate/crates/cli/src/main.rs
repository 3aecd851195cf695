use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geoprior_core::geometry::DepthMode;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "geoprior",
    version,
    about = "Multi-view feature consistency, leaderboard aggregation and fusion checks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// RNG seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Voxel edge length in meters.
    #[arg(long, global = true, default_value_t = 0.1)]
    voxel_size: f64,
    /// Frames sampled uniformly per scene.
    #[arg(long, global = true, default_value_t = 32)]
    frames: usize,
    /// Token grid as ROWSxCOLS.
    #[arg(long, global = true, default_value = "14x14", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, global = true, value_enum, default_value_t = DepthModeArg::IncludeZero)]
    depth_mode: DepthModeArg,
    /// Directory for written reports and artifacts.
    #[arg(long, global = true, env = "GEOPRIOR_OUTPUT_DIR")]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum DepthModeArg {
    IncludeZero,
    Masked,
}

impl From<DepthModeArg> for DepthMode {
    fn from(m: DepthModeArg) -> Self {
        match m {
            DepthModeArg::IncludeZero => DepthMode::IncludeZero,
            DepthModeArg::Masked => DepthMode::Masked,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SynthMode {
    Tokens,
    Room,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score scenes for multi-view feature consistency.
    CorrScore {
        /// Manifest paths; read one per line from stdin when omitted.
        manifests: Vec<PathBuf>,
        /// Feature branch to score (default: the token cloud, else the first branch).
        #[arg(long)]
        branch: Option<String>,
        /// Parallel scoring threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Group-wise normalized overall score from a metric table.
    Nos {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        groups: PathBuf,
    },
    /// Average fractional rank over each method's available metrics.
    Rank {
        #[arg(long)]
        table: PathBuf,
        /// Optional sidecar listing lower-is-better metrics.
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Pearson correlation between two numeric CSV columns.
    Correlate {
        input: PathBuf,
        /// X column (default: first numeric column).
        #[arg(long)]
        x: Option<String>,
        /// Y column (default: second numeric column).
        #[arg(long)]
        y: Option<String>,
    },
    /// Finite-difference check of the gated-fusion gradients.
    FuseCheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 4)]
        max_t: usize,
        #[arg(long, default_value_t = 8)]
        max_n: usize,
        #[arg(long, default_value_t = 16)]
        max_d: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Noise a latent tensor along the flow-matching path.
    Noise {
        input: PathBuf,
        #[arg(long, default_value_t = 300)]
        timestep: u32,
        #[arg(long, default_value_t = 1000)]
        total_steps: u32,
    },
    /// Generate synthetic scenes with known consistency.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthMode::Tokens)]
        mode: SynthMode,
        /// Feature corruption level.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long, default_value_t = 8)]
        views: usize,
        /// Tokens per view (tokens mode).
        #[arg(long, default_value_t = 196)]
        tokens: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Replace voxel features with i.i.d. noise (tokens mode).
        #[arg(long)]
        iid: bool,
    },
    /// Render the top three principal components of a branch as PPM images.
    PcaVis {
        manifest: PathBuf,
        #[arg(long)]
        branch: Option<String>,
        /// Nearest-neighbour upscaling factor.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Adaptive-average-pool a feature tensor to --grid and resample to --frames.
    Pool { input: PathBuf },
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    match (parse(h)?, parse(w)?) {
        (0, _) | (_, 0) => Err("grid sides must be positive".into()),
        dims => Ok(dims),
    }
}

/// 2 for filesystem failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|cause| {
        cause.is::<std::io::Error>()
            || cause
                .downcast_ref::<geoprior_core::Error>()
                .is_some_and(geoprior_core::Error::is_io)
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
