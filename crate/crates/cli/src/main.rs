use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Environment variable that overrides the worker thread count.
pub const THREADS_ENV: &str = "EMBSPLAT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "embsplat", version, about = "Multimodal Gaussian splatting with learned per-point embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    Rgb,
    Semantic,
    Lidar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckLevel {
    Quick,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multimodal dataset from a scene recipe.
    GenSynthetic {
        /// Recipe JSON file, or `toy` for the built-in sphere-and-boxes scene.
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint and training log.
    Train {
        /// Dataset directory (containing manifest.json) or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out names; defaults to split.txt next to the manifest when present.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Training log path; defaults to the checkpoint path with `.log.tsv` appended.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render one camera or LiDAR view of a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// A frame or scan name from `--data`, or a sensor JSON file with
        /// `pose` and either `intrinsics` or `lidar`.
        #[arg(long)]
        pose: String,
        #[arg(long, value_enum)]
        mode: RenderMode,
        /// Output raster; `.png` writes an 8-bit image (rgb only), anything
        /// else the float raster format.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Simulate LiDAR range, intensity and raydrop along a trajectory.
    SimulateLidar {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON with `lidar` (sensor spec) and `poses` (list of poses).
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rays with rendered raydrop at or above this are dropped from the point clouds.
        #[arg(long, default_value_t = 0.5)]
        drop_threshold: f64,
    },
    /// Score a checkpoint on held-out frames and scans.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// JSON report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-point storage of a checkpoint against the explicit layout.
    ReportStorage {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 9)]
        explicit_h: usize,
        #[arg(long, default_value_t = 16)]
        explicit_d: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a randomly initialized checkpoint with the given Gaussian count.
    InitCheckpoint {
        #[arg(long)]
        gaussians: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the oracle-equivalence and gradient-check suites.
    Check {
        #[arg(long, value_enum, default_value_t = CheckLevel::Quick)]
        level: CheckLevel,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("{THREADS_ENV} must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::GenSynthetic { recipe, out, seed } => commands::gen_synthetic(&recipe, &out, seed),
        Command::Train {
            data,
            config,
            out,
            split,
            log,
            iterations,
            seed,
        } => commands::train(&data, config.as_deref(), &out, split.as_deref(), log.as_deref(), iterations, seed),
        Command::Render {
            ckpt,
            pose,
            mode,
            out,
            data,
        } => commands::render(&ckpt, &pose, mode, &out, data.as_deref()),
        Command::SimulateLidar {
            ckpt,
            trajectory,
            out,
            drop_threshold,
        } => commands::simulate_lidar(&ckpt, &trajectory, &out, drop_threshold),
        Command::Eval { ckpt, data, split, out } => commands::eval(&ckpt, &data, &split, out.as_deref()),
        Command::ReportStorage {
            ckpt,
            explicit_h,
            explicit_d,
            out,
        } => commands::report_storage(&ckpt, explicit_h, explicit_d, out.as_deref()),
        Command::InitCheckpoint { gaussians, out, seed } => commands::init_checkpoint(gaussians, &out, seed),
        Command::Check { level, seed } => commands::check(level, seed),
    }
    .map(|()| true)
    .or_else(|e| match e.downcast::<commands::ChecksFailed>() {
        Ok(_) => Ok(false),
        Err(e) => Err(e),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
