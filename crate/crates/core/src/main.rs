use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hybrid_tta::harness::{
    evaluate_checkpoint, run_experiment, train_from_config, write_eval, write_stream_manifest,
    RunConfig,
};
use hybrid_tta::model::adapter_fraction;
use hybrid_tta::source_trainer::load_checkpoint;

#[derive(Parser)]
#[command(
    name = "hybrid-tta",
    version,
    about = "Continual test-time adaptation on synthetic scene streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and write source.ckpt and train_log.csv.
    TrainSource(Common),
    /// Write the target stream manifest.
    GenStream(Common),
    /// Adapt on the target stream in the configured mode.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a frozen checkpoint on held-out clean and corrupted scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out scenes per domain.
        #[arg(long, default_value_t = 100)]
        scenes: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn checkpoint_for(cfg: &RunConfig, path: &Path) -> Result<hybrid_tta::source_trainer::Checkpoint> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.config != cfg.model {
        bail!(
            "checkpoint model config differs from the run config:\n{}",
            ck.config.to_kv_string()
        );
    }
    Ok(ck)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainSource(common) => {
            let cfg = load_config(&common)?;
            cfg.echo(&cfg.out_dir)?;
            let run = train_from_config(&cfg)?;
            run.persist(&cfg.out_dir)?;
            let last = run.log.epochs.last();
            println!(
                "source model: {} parameters ({:.1}% adapter), final loss {}",
                run.checkpoint.params.total_count(),
                100.0 * adapter_fraction(&run.checkpoint.params),
                last.map_or("n/a".into(), |e| format!("{:.4}", e.losses.total)),
            );
            println!("wrote {}", cfg.out_dir.join("source.ckpt").display());
        }
        Command::GenStream(common) => {
            let cfg = load_config(&common)?;
            cfg.echo(&cfg.out_dir)?;
            write_stream_manifest(&cfg, &cfg.out_dir)?;
            println!(
                "{} instances -> {}",
                cfg.stream_spec().len(),
                cfg.out_dir.join("manifest.csv").display()
            );
        }
        Command::Adapt { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ck = checkpoint_for(&cfg, &checkpoint)?;
            for out in run_experiment(&cfg, &ck)? {
                println!("{}", out.summary_line());
            }
        }
        Command::Eval {
            common,
            checkpoint,
            scenes,
        } => {
            let cfg = load_config(&common)?;
            let ck = checkpoint_for(&cfg, &checkpoint)?;
            cfg.echo(&cfg.out_dir)?;
            let rows = evaluate_checkpoint(&cfg, &ck, scenes)?;
            let path = cfg.out_dir.join("eval.csv");
            write_eval(&rows, cfg.model.task, &path)?;
            for r in &rows {
                println!("{:>6}: {:.4}", r.domain.to_string(), r.metric);
            }
        }
    }
    Ok(())
}
