//! Commands behind the CLI: pretraining with checkpoints and metrics,
//! downstream evaluation, and reporting.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod report;

use std::path::{Path, PathBuf};

use crate::data::{partition_iid, Partition};
use crate::encoder::LayeredEncoder;
use crate::error::{Error, Result};
use crate::federation::{schedule_phase, RoundLog, Simulation};
use crate::rng::{derive_seed, Stream};

pub use checkpoint::{Checkpoint, Cursor};
pub use config::{DataSource, EvalConfig, EvalMode, ExperimentConfig};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use report::RunSummary;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn phase_checkpoint_name(phase: usize) -> String {
    format!("phase-{phase}.ckpt")
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub encoder: LayeredEncoder,
    pub logs: Vec<RoundLog>,
    pub output_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

impl PretrainOutcome {
    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join(METRICS_FILE)
    }
}

pub fn initial_encoder(cfg: &ExperimentConfig) -> Result<LayeredEncoder> {
    LayeredEncoder::init(cfg.encoder.clone(), derive_seed(cfg.fed.seed, Stream::Init, &[]))
}

/// Runs the configured schedule, writing `metrics.csv`, one checkpoint per
/// phase boundary and `final.ckpt` into the output directory. With
/// `resume`, training continues from that checkpoint's cursor and metrics
/// rows from the cursor on are rewritten.
pub fn cmd_pretrain(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Error::io(&config_path, e))?;

    let data = cfg.load_train()?;
    let partition = partition_iid(data.len(), cfg.fed.num_clients, cfg.fed.seed)?;
    let num_blocks = cfg.encoder.num_blocks;
    let metrics_path = out.join(METRICS_FILE);
    let (mut encoder, start, mut metrics) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.encoder.config() != &cfg.encoder {
                return Err(Error::config("encoder", "checkpoint was trained with a different encoder"));
            }
            let start = ck.cursor.next_round;
            (ck.encoder, start as usize, MetricsWriter::resume(&metrics_path, start)?)
        }
        None => (initial_encoder(cfg)?, 0, MetricsWriter::create(&metrics_path)?),
    };

    let sim = Simulation::new(&cfg.fed, &cfg.aug, cfg.mode, &data, &partition, num_blocks, cfg.workers)?;
    let total = cfg.fed.total_rounds(num_blocks);
    let per_phase = cfg.fed.rounds_per_layer;
    let mut checkpoints = Vec::new();
    let logs = sim.run(&mut encoder, start..total, |log, enc| {
        metrics.append(&MetricsRow::from(log))?;
        let next = log.round + 1;
        if next % per_phase == 0 {
            let path = out.join(phase_checkpoint_name(next / per_phase - 1));
            let cursor =
                Cursor { next_round: next as u64, phase: schedule_phase(log.round, per_phase, num_blocks) as u64 };
            Checkpoint { encoder: enc.clone(), cursor }.save(&path)?;
            log::info!("round {}: wrote {}", log.round, path.display());
            checkpoints.push(path);
        }
        Ok(())
    })?;
    drop(metrics);
    let final_path = out.join(FINAL_CHECKPOINT);
    let cursor = Cursor { next_round: total as u64, phase: num_blocks as u64 };
    Checkpoint { encoder: encoder.clone(), cursor }.save(&final_path)?;
    checkpoints.push(final_path);
    Ok(PretrainOutcome { encoder, logs, output_dir: out, checkpoints })
}

/// Top-1 test accuracy of `checkpoint` at `layer`. The checkpoint is only
/// read.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, layer: usize, mode: EvalMode) -> Result<f64> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.encoder.config() != &cfg.encoder {
        return Err(Error::config("encoder", "checkpoint and config disagree on the encoder"));
    }
    if layer > cfg.encoder.num_blocks {
        return Err(Error::config("layer", format!("{layer} exceeds depth {}", cfg.encoder.num_blocks)));
    }
    let (train, test) = (cfg.load_train()?, cfg.load_test()?);
    eval::evaluate(&ck.encoder, layer, mode, &train, &test, &cfg.eval, cfg.fed.seed)
}

pub fn cmd_partition(n: usize, clients: usize, seed: u64) -> Result<Partition> {
    partition_iid(n, clients, seed)
}

#[derive(Clone, Debug)]
pub struct Report {
    pub text: String,
    pub fractions_csv: String,
    pub runs: Vec<RunSummary>,
}

pub fn cmd_report(paths: &[PathBuf]) -> Result<Report> {
    if paths.is_empty() {
        return Err(Error::Usage("report needs at least one metrics file".into()));
    }
    let runs = paths
        .iter()
        .map(|p| Ok(RunSummary::new(p.display().to_string(), &read_metrics(p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { text: report::render_text(&runs), fractions_csv: report::fractions_csv(&runs), runs })
}
