use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use layerfed::experiment::{self, config::OUTPUT_DIR_ENV, EvalMode, ExperimentConfig, CONFIG_FILE};
use layerfed::federation::TrainingMode;

#[derive(Parser)]
#[command(name = "layerfed", version, about = "Federated layer-wise self-supervised training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder and write checkpoints plus a metrics file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's training mode.
        #[arg(long)]
        mode: Option<TrainingMode>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
        /// Client-loop threads, 0 for one per core.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Top-1 test accuracy of a checkpoint's representation at one layer.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value = "linear")]
        mode: EvalMode,
        /// Defaults to the config.toml stored next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the IID client partition of `n` examples.
    Partition {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 125)]
        clients: usize,
    },
    /// Summarize metrics files: per-phase resource fractions and losses.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Also write the per-phase fractions as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn eval_config(checkpoint: &Path, config: Option<PathBuf>) -> Result<ExperimentConfig> {
    let path = match config {
        Some(p) => p,
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, mode, seed, resume, output_dir, workers } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            if let Some(seed) = seed {
                cfg.fed.seed = seed;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = Some(dir);
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let out = experiment::cmd_pretrain(&cfg, resume.as_deref())?;
            println!(
                "wrote {} and {} checkpoints to {}",
                experiment::METRICS_FILE,
                out.checkpoints.len(),
                out.output_dir.display()
            );
            if let Some(last) = out.logs.last() {
                println!("final round {} loss {:.4}", last.round, last.loss_mean);
            }
            if !cfg.eval.layers.is_empty() {
                let ckpt = out.output_dir.join(experiment::FINAL_CHECKPOINT);
                for &layer in &cfg.eval.layers {
                    let acc = experiment::cmd_eval(&cfg, &ckpt, layer, cfg.eval.mode)?;
                    println!("layer {layer} {:?} accuracy {:.4}", cfg.eval.mode, acc);
                }
            }
        }
        Command::Eval { checkpoint, layer, mode, config } => {
            if !checkpoint.is_file() {
                anyhow::bail!("checkpoint {} does not exist", checkpoint.display());
            }
            let cfg = eval_config(&checkpoint, config)?;
            let acc = experiment::cmd_eval(&cfg, &checkpoint, layer, mode)?;
            println!("{acc:.4}");
        }
        Command::Partition { n, seed, clients } => {
            let p = experiment::cmd_partition(n, clients, seed)?;
            println!("client,size,indices");
            for (i, shard) in p.client_shards.iter().enumerate() {
                let idx: Vec<String> = shard.iter().map(usize::to_string).collect();
                println!("{i},{},{}", shard.len(), idx.join(";"));
            }
        }
        Command::Report { metrics, out } => {
            let report = experiment::cmd_report(&metrics)?;
            print!("{}", report.text);
            if let Some(path) = out {
                std::fs::write(&path, &report.fractions_csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
