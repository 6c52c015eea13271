use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use densefusion::harness::{cmd_bench, cmd_eval, cmd_generate, cmd_train, RunConfig, Variant};

#[derive(Parser)]
#[command(name = "densefusion", version, about = "Dense RGB-D fusion pose estimation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train, val and test splits.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the main network, then the refiner once the gate opens.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a variant on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Variant::PerPixel)]
        variant: Variant,
        /// Defaults to `<checkpoints>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth poses, to check the evaluation pipeline.
        #[arg(long)]
        oracle: bool,
    },
    /// Time each pipeline stage per frame.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.paths.checkpoints.join("model.ckpt"))
}

fn print_dir(what: &str, dir: &Path) {
    println!("{what}: {}", dir.display());
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { common } => {
            let cfg = load(&common)?;
            let dir = cmd_generate(&cfg)?;
            print_dir("dataset", &dir);
        }
        Command::Train { common, checkpoint } => {
            let cfg = load(&common)?;
            let out = cmd_train(&cfg, checkpoint.as_deref())?;
            if let Some(last) = out.log.last() {
                println!("final {} epoch {}: train {:.6} val {:.6}", last.stage.name(), last.epoch, last.train_loss, last.val_loss);
            }
            print_dir("checkpoint", &out.checkpoint);
            print_dir("report", &out.report_dir);
        }
        Command::Eval {
            common,
            variant,
            checkpoint,
            oracle,
        } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint_path(&cfg, checkpoint);
            if !oracle && !ckpt.is_file() {
                bail!("checkpoint not found: {}", ckpt.display());
            }
            let out = cmd_eval(&cfg, &ckpt, variant, oracle)?;
            print!("{}", out.report.to_table(&format!("eval {variant}")));
            print_dir("report", &out.report_dir);
        }
        Command::Bench { common, checkpoint } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint_path(&cfg, checkpoint);
            let (report, dir) = cmd_bench(&cfg, &ckpt)?;
            print!("{}", report.to_table());
            print_dir("report", &dir);
        }
    }
    Ok(())
}
