//! `ratekd` — train, distill, evaluate, and profile spiking networks.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ratekd_core::commands::{
    cmd_analyze, cmd_distill, cmd_eval, cmd_profile, cmd_train_ann, cmd_train_snn,
};
use ratekd_core::config::{resolve_seed, BetaScheme, RunConfig, SEED_ENV};
use ratekd_core::error::{Error, Result};
use ratekd_core::metrics::{SnnMode, OVERHEAD_CSV_HEADER};

#[derive(Parser)]
#[command(
    name = "ratekd",
    version,
    about = "Spiking-network training with rate-based backpropagation and \
             teacher-guided block-wise distillation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Sectioned key=value run configuration (defaults baked in when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (beats RATEKD_SEED, which beats the config value).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoints, metrics, and reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the conventional reference network and save it as a teacher.
    TrainAnn {
        #[command(flatten)]
        common: Common,
    },
    /// Train the spiking network directly, without a teacher.
    TrainSnn {
        #[command(flatten)]
        common: Common,
        /// Gradient mode: rate | bptt.
        #[arg(long)]
        mode: Option<SnnMode>,
    },
    /// Distill a frozen teacher into a spiking student with block losses.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Backbone mixing weight in [0,1] (overrides the config).
        #[arg(long)]
        alpha: Option<f64>,
        /// Block-loss weighting scheme: uniform | decay | zero.
        #[arg(long)]
        beta: Option<String>,
        /// Teacher checkpoint path (overrides the config).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a checkpoint on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        checkpoint: PathBuf,
        /// Route a spiking front end through connector K into the frozen tail.
        #[arg(long, value_name = "K")]
        hybrid: Option<usize>,
        /// Simulation steps override.
        #[arg(long, value_name = "T")]
        timesteps: Option<usize>,
    },
    /// Measure per-batch training time and peak memory across modes and T.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Comma-separated timestep counts.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        timesteps: Vec<usize>,
        /// Comma-separated gradient modes.
        #[arg(long, value_delimiter = ',', default_value = "rate,bptt")]
        modes: Vec<SnnMode>,
        /// Untimed warm-up batches per cell.
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Timed batches per cell.
        #[arg(long, default_value_t = 3)]
        measured: usize,
    },
    /// Summarize a finished run directory (accuracy, similarity, conversion).
    Analyze {
        /// Run directory containing metrics.jsonl.
        run_dir: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.seed = resolve_seed(cfg.seed, env.as_deref(), common.seed)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainAnn { common } => {
            let cfg = load_config(&common)?;
            let s = cmd_train_ann(&cfg)?;
            println!(
                "teacher trained: val accuracy {:.4} after {} epoch(s) -> {}",
                s.final_val_accuracy,
                s.epochs,
                s.checkpoint.display()
            );
            println!("{}", json(&s)?);
        }
        Cmd::TrainSnn { common, mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let s = cmd_train_snn(&cfg)?;
            println!(
                "snn trained ({} mode, T={}): val accuracy {:.4} -> {}",
                cfg.mode,
                cfg.timesteps,
                s.final_val_accuracy,
                s.checkpoint.display()
            );
            println!("{}", json(&s)?);
        }
        Cmd::Distill { common, alpha, beta, teacher } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(b) = &beta {
                cfg.beta = BetaScheme::parse(b)?;
            }
            if let Some(t) = &teacher {
                cfg.teacher = t.to_string_lossy().into_owned();
            }
            let s = cmd_distill(&cfg)?;
            println!(
                "distilled: val accuracy {:.4} after {} epoch(s) -> {}",
                s.final_val_accuracy,
                s.epochs,
                s.checkpoint.display()
            );
            println!("{}", json(&s)?);
        }
        Cmd::Eval { common, checkpoint, hybrid, timesteps } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = timesteps {
                cfg.timesteps = t;
            }
            let s = cmd_eval(&cfg, &checkpoint, hybrid)?;
            match hybrid {
                Some(k) => println!("hybrid (tap {k}) accuracy: {:.4}", s.accuracy),
                None => println!("accuracy: {:.4}", s.accuracy),
            }
            println!("{}", json(&s)?);
        }
        Cmd::Profile { common, timesteps, modes, warmup, measured } => {
            let cfg = load_config(&common)?;
            let cells = cmd_profile(&cfg, &timesteps, &modes, warmup, measured)?;
            println!("{OVERHEAD_CSV_HEADER}");
            for c in &cells {
                println!("{}", c.csv_row());
            }
        }
        Cmd::Analyze { run_dir } => {
            let s = cmd_analyze(&run_dir)?;
            print!("{}", s.to_table());
            println!("wrote {}", run_dir.join("analysis.csv").display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("ratekd: {e}");
        std::process::exit(e.exit_code());
    }
}
