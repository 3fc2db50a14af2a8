//! Optimization loop, validation and best-model selection.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, SupervisionConfig};
use crate::metrics::{binarize, compute_metrics, tally, ConfusionCounts};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::{apply_stat_updates, Ctx, Mode};
use crate::sample::{Batch, SamplePair};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BEST_FILE: &str = "best.safetensors";
pub const LAST_FILE: &str = "last.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Total loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Owns the model and optimizer state for a run.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub cfg: SupervisionConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    steps: usize,
}

/// Deterministic train/validation split: the last `val_fraction` of the
/// samples are held out. With no hold-out both views are the full set.
pub fn split(samples: &[SamplePair], val_fraction: f64) -> (&[SamplePair], &[SamplePair]) {
    let n = samples.len();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if val_fraction > 0.0 && n > 1 { n_val.clamp(1, n - 1) } else { 0 };
    if n_val == 0 {
        (samples, samples)
    } else {
        samples.split_at(n - n_val)
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: SupervisionConfig) -> Result<Self> {
        cfg.validate()?;
        if model.is_folded() {
            return Err(Error::invalid("train", "cannot train a folded model"));
        }
        Ok(Trainer {
            adam: Adam::new(cfg.learning_rate),
            model,
            cfg,
            epoch: 0,
            best_f1: None,
            best_epoch: None,
            steps: 0,
        })
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(ckpt: Checkpoint<T>, cfg: SupervisionConfig) -> Result<Self> {
        let mut t = Trainer::new(ckpt.model, cfg)?;
        if let Some(mut adam) = ckpt.adam {
            adam.lr = t.cfg.learning_rate;
            t.adam = adam;
        }
        t.epoch = ckpt.meta.epoch;
        t.best_f1 = ckpt.meta.best_f1;
        t.best_epoch = ckpt.meta.best_epoch;
        Ok(t)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            supervision: Some(self.cfg.clone()),
            epoch: self.epoch,
            best_f1: self.best_f1,
            best_epoch: self.best_epoch,
            adam_step: self.adam.step,
            ..CheckpointMeta::fresh(self.model.config().clone())
        }
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<LossBreakdown> {
        crate::scalar::flush_denormals();
        let (grads, updates, parts) = {
            let graph = Graph::new();
            let ctx = Ctx::new(&graph, &self.model.store, Mode::Train);
            let outs = self.model.net.forward_full(&ctx, &batch.image_a, &batch.image_b)?;
            let (total, parts) = total_loss(&outs, &batch.gt, &self.cfg)?;
            let term = parts
                .first_non_finite()
                .or_else(|| (!total.value().all_finite()).then_some("total"));
            if let Some(term) = term {
                return Err(Error::NonFinite { epoch: self.epoch + 1, step: self.steps + 1, term: term.into() });
            }
            let mut g = graph.backward(&total);
            (ctx.param_grads(&mut g), ctx.take_stat_updates(), parts)
        };
        apply_stat_updates(&mut self.model.store, updates, self.cfg.bn_momentum);
        self.adam.update(&mut self.model.store, grads);
        self.steps += 1;
        Ok(parts)
    }

    /// Batches of one epoch in seeded order. The order depends only on the
    /// seed and the epoch number so resumed runs see the same sequence.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx
    }

    /// Runs the next epoch and returns the mean step loss.
    pub fn run_epoch(&mut self, train: &[SamplePair], step_losses: &mut Vec<f64>) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::invalid("train", "empty training set"));
        }
        let order = self.epoch_order(train.len(), self.epoch + 1);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<&SamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            let parts = self.step(&Batch::from_samples(&samples)?)?;
            let l = parts.total(self.cfg.theta, self.cfg.phi);
            step_losses.push(l);
            sum += l;
            n += 1;
        }
        self.epoch += 1;
        Ok(sum / n as f64)
    }

    /// Pooled confusion counts of the current model in eval mode.
    pub fn evaluate(&self, samples: &[SamplePair]) -> Result<ConfusionCounts> {
        evaluate(&self.model, samples, self.cfg.threshold, self.cfg.batch_size)
    }

    /// Full run: `cfg.epochs` epochs counted from the current epoch. Writes
    /// the best and last checkpoints and the epoch log under `out_dir` when
    /// one is given.
    pub fn train(&mut self, samples: &[SamplePair], out_dir: Option<&Path>) -> Result<TrainReport> {
        self.train_with(samples, out_dir, |_| {})
    }

    /// [`Trainer::train`] with a callback after every epoch.
    pub fn train_with(
        &mut self,
        samples: &[SamplePair],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let (train, val) = split(samples, self.cfg.val_fraction);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut report = TrainReport::default();
        let start = Instant::now();
        let end = self.epoch + self.cfg.epochs;
        while self.epoch < end {
            let train_loss = self.run_epoch(train, &mut report.step_losses)?;
            let m = compute_metrics(&self.evaluate(val)?)?;
            let record = EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_f1: m.f1,
                val_iou: m.iou,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            let improved = self.best_f1.is_none_or(|b| m.f1 > b);
            if improved {
                self.best_f1 = Some(m.f1);
                self.best_epoch = Some(self.epoch);
            }
            if let Some(dir) = out_dir {
                if improved {
                    checkpoint::save(&dir.join(BEST_FILE), &self.model, &self.meta(), None)?;
                }
                checkpoint::save(&dir.join(LAST_FILE), &self.model, &self.meta(), Some(&self.adam))?;
                append_log(&dir.join(LOG_FILE), &record)?;
            }
            on_epoch(&record);
            report.epochs.push(record);
        }
        report.best_f1 = self.best_f1;
        report.best_epoch = self.best_epoch;
        Ok(report)
    }
}

fn append_log(path: &PathBuf, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::invalid("train log", e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid("train log", e.to_string())))
        .collect()
}

/// Final logits of every sample, in order, computed in batches.
pub fn predict_logits<T: Scalar>(model: &Model<T>, samples: &[SamplePair], batch_size: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let b = Batch::<T>::from_samples(&refs)?;
        let logits = model.infer(&b.image_a, &b.image_b)?.final_logits;
        out.extend((0..chunk.len()).map(|i| logits.narrow_batch(i, 1)));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[SamplePair], threshold: f64, batch_size: usize) -> Result<ConfusionCounts> {
    let logits = predict_logits(model, samples, batch_size)?;
    logits
        .iter()
        .zip(samples)
        .map(|(l, s)| tally(&binarize(l, threshold), &s.gt.cast()))
        .sum()
}
