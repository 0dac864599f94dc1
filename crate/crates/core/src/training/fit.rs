//! Full training runs with periodic checkpoints and a per-step metric log.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::batch::{sample_batch, Batch};
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::TrainingConfig;
use super::step::{train_step, StepMetrics, TrainState};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{domain, stream};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";

pub fn numbered_checkpoint(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.safetensors"))
}

/// One metric-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub l_d_i: f64,
    pub l_d_is: f64,
    pub l_d_isg: f64,
    pub l_g: f64,
    pub masked_l1: f64,
    pub wall_clock_s: f64,
}

impl MetricRow {
    pub fn losses(&self) -> StepMetrics {
        StepMetrics {
            step: self.step,
            l_d_i: self.l_d_i,
            l_d_is: self.l_d_is,
            l_d_isg: self.l_d_isg,
            l_g: self.l_g,
            masked_l1: self.masked_l1,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))).collect()
}

/// The batch consumed by step `step` (0-based).
pub fn batch_for_step(corpus: &Corpus, cfg: &TrainingConfig, noise_dim: usize, step: u64) -> Result<Batch> {
    let mut rng = stream(cfg.seed, domain::BATCH, step);
    let idx = sample_batch(corpus, cfg.batch_size, noise_dim, &mut rng)?;
    Batch::materialize(corpus, &idx)
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Steps run in this call.
    pub steps_run: u64,
    pub last: Option<StepMetrics>,
}

/// Where a run starts.
pub enum Start<'a> {
    Fresh(ModelConfig),
    Resume(&'a Path),
}

fn check_compatible(corpus: &Corpus, model: &ModelConfig) -> Result<()> {
    if corpus.gene_dim() != model.gene_dim {
        return Err(Error::Dimension { expected: model.gene_dim, got: corpus.gene_dim() });
    }
    if corpus.image_size() != model.image_size {
        return Err(Error::Config(format!(
            "corpus patches are {0}x{0} but the model expects {1}x{1}",
            corpus.image_size(),
            model.image_size
        )));
    }
    Ok(())
}

/// Trains until `cfg.steps` generator updates have been made in total.
pub fn fit(cfg: &TrainingConfig, corpus: &Corpus, start: Start, out_dir: &Path, corpus_path: Option<&Path>) -> Result<FitReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match start {
        Start::Fresh(model) => TrainState::new(model, cfg)?,
        Start::Resume(path) => {
            let (mut state, info) = load_checkpoint(path)?;
            if info.training.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, config says {}",
                    info.training.seed, cfg.seed
                )));
            }
            state.set_learning_rates(cfg);
            state
        }
    };
    let model = state.generator.config.clone();
    check_compatible(corpus, &model)?;

    let metrics = out_dir.join(METRICS_FILE);
    // keep rows up to the starting step so a resumed log has no gaps or repeats
    let kept: Vec<MetricRow> = if state.step > 0 && metrics.exists() {
        read_metrics(&metrics)?.into_iter().filter(|r| r.step <= state.step).collect()
    } else {
        Vec::new()
    };
    let file = OpenOptions::new().create(true).write(true).truncate(true).open(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", metrics.display()));
    log.write_record(["step", "l_d_i", "l_d_is", "l_d_isg", "l_g", "masked_l1", "wall_clock_s"]).map_err(csv_err)?;
    for r in &kept {
        log.serialize(r).map_err(csv_err)?;
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;

    let clock = Instant::now();
    let first = state.step;
    let mut last = None;
    while state.step < cfg.steps {
        let batch = batch_for_step(corpus, cfg, model.noise_dim, state.step)?;
        let m = train_step(&mut state, cfg, &batch)?;
        let row = MetricRow {
            step: m.step,
            l_d_i: m.l_d_i,
            l_d_is: m.l_d_is,
            l_d_isg: m.l_d_isg,
            l_g: m.l_g,
            masked_l1: m.masked_l1,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        };
        log.serialize(row).map_err(csv_err)?;
        log.flush().map_err(|e| Error::io(&metrics, e))?;
        if m.step % 50 == 0 || m.step == cfg.steps {
            log::info!(
                "step {}/{}: L_DI {:.4} L_DIS {:.4} L_DISG {:.4} L_G {:.4} L1 {:.4} ({:.0}s)",
                m.step,
                cfg.steps,
                m.l_d_i,
                m.l_d_is,
                m.l_d_isg,
                m.l_g,
                m.masked_l1,
                row.wall_clock_s
            );
        }
        if m.step % cfg.checkpoint_every == 0 {
            save_checkpoint(&numbered_checkpoint(out_dir, m.step), &state, cfg, corpus_path)?;
        }
        last = Some(m);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &state, cfg, corpus_path)?;
    Ok(FitReport { final_checkpoint, metrics, steps_run: state.step - first, last })
}
