use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::checkpoint::{save_checkpoint, TrainState};
use super::{Adam, PlateauScheduler, RunConfig};
use crate::data::{prefetch_batches, BatchSource};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::loss::tversky_loss;
use crate::metrics::{aggregate, confusion_per_image, metrics, MetricSet, DEFAULT_THRESHOLD};
use crate::model::SpeedNet;

pub const LOG_HEADER: &str = "epoch,train_loss,lr,dice,jaccard,precision,recall";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub eval: MetricSet,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let m = &self.eval;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.lr, m.dice, m.jaccard, m.precision, m.recall
        )
    }
}

pub struct TrainOutcome {
    pub model: SpeedNet<f32>,
    pub state: TrainState<f32>,
    pub log: Vec<EpochRecord>,
}

/// Where the best-loss checkpoint goes: `run.ckpt` becomes `run.best.ckpt`.
pub fn best_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.best.{ext}"),
        None => format!("{stem}.best"),
    };
    path.with_file_name(name)
}

/// Per-image metrics of infer-mode predictions, labelled by class.
pub fn evaluate(model: &SpeedNet<f32>, source: &dyn BatchSource, batch_size: usize) -> Result<Vec<(String, MetricSet)>> {
    let mut out = Vec::with_capacity(source.len());
    prefetch_batches(source, batch_size, |i, x, y| {
        let pred = model.predict(&x)?;
        for (j, counts) in confusion_per_image(&pred, &y, DEFAULT_THRESHOLD)?.iter().enumerate() {
            out.push((source.class_of(i * batch_size + j).to_string(), metrics(counts)));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Runs one epoch over `source`; returns the sample-weighted mean loss.
fn train_epoch(
    model: &mut SpeedNet<f32>,
    adam: &mut Adam<f32>,
    cfg: &RunConfig,
    lr: f64,
    epoch: usize,
    source: &dyn BatchSource,
) -> Result<f64> {
    let mut total = 0.0f64;
    prefetch_batches(source, cfg.batch_size, |b, x, y| {
        let n = x.shape().n;
        model.zero_grad();
        let (pred, cache) = model.forward_train(&x)?;
        let (loss, grad) = tversky_loss(&pred, &y, &cfg.tversky)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
        }
        model.backward(&cache, &grad)?;
        adam.step(model, lr)
            .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
        total += loss as f64 * n as f64;
        Ok(())
    })?;
    Ok(total / source.len() as f64)
}

fn log_text(cfg: &RunConfig, log: &[EpochRecord]) -> String {
    let mut s = String::new();
    for line in cfg.to_text().lines() {
        let _ = writeln!(s, "# {line}");
    }
    let _ = writeln!(s, "{LOG_HEADER}");
    for r in log {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Trains for `cfg.epochs` total epochs (continuing a resumed state if given),
/// evaluating on `eval` after every epoch, and writes the log, the final
/// checkpoint and the best-loss checkpoint to the paths in `cfg`.
pub fn train(
    cfg: &RunConfig,
    train_set: &dyn BatchSource,
    eval: Option<&dyn BatchSource>,
    resume: Option<(SpeedNet<f32>, TrainState<f32>)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let eval = match eval {
        Some(e) if !e.is_empty() => e,
        _ => train_set,
    };
    let (mut model, mut state) = match resume {
        Some(r) => r,
        None => (
            SpeedNet::new(cfg.model.clone())?,
            TrainState {
                epoch: 0,
                best_loss: f64::INFINITY,
                adam: Adam::default(),
                scheduler: PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.lr_patience),
            },
        ),
    };
    let config_text = cfg.to_text();
    let best_path = best_checkpoint_path(&cfg.checkpoint_out);
    let mut log = Vec::new();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let lr = state.scheduler.lr;
        let loss = train_epoch(&mut model, &mut state.adam, cfg, lr, epoch, train_set)?;
        let per_image = evaluate(&model, eval, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss,
            lr,
            eval: aggregate(&per_image)?.overall,
        };
        info!(
            "epoch {epoch}: loss {loss:.6} lr {lr:e} dice {:.4} jaccard {:.4}",
            record.eval.dice, record.eval.jaccard
        );
        log.push(record);
        state.scheduler.step(loss);
        state.epoch = epoch;
        if loss < state.best_loss {
            state.best_loss = loss;
            save_checkpoint(&best_path, &config_text, &model, Some(&state))?;
        }
        fs::write(&cfg.log_out, log_text(cfg, &log)).map_err(|e| Error::io(&cfg.log_out, e))?;
    }
    fs::write(&cfg.log_out, log_text(cfg, &log)).map_err(|e| Error::io(&cfg.log_out, e))?;
    save_checkpoint(&cfg.checkpoint_out, &config_text, &model, Some(&state))?;
    Ok(TrainOutcome { model, state, log })
}
