//! Supervised training of the source model.

use serde::{Deserialize, Serialize};

use super::network::{Network, StatsSource, TrainingMeta};
use crate::adapt::optim::{AdamConfig, AdamState, Schedule};
use crate::data::{BatchPlan, Dataset};
use crate::diffcore::kernel::{argmax_rows, NormStats};
use crate::diffcore::{Scalar, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the newest batch in the moving normalization statistics.
    pub momentum: f64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 3e-3,
            batch_size: 64,
            seed: 0,
            momentum: 0.1,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Accuracy on the training batches of the last epoch.
    pub train_accuracy: f64,
    /// Accuracy on `val` with stored statistics, when given.
    pub val_accuracy: Option<f64>,
}

/// Fraction of `data` classified correctly with stored statistics.
pub fn accuracy<T: Scalar>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let labels = data.require_labels()?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for b in data.batches(BatchPlan::sequential(batch_size))? {
        let logits = net.forward(&b.images.cast(), StatsSource::Stored, None)?;
        correct += argmax_rows(&logits).iter().zip(&b.indices).filter(|(p, &i)| **p == labels[i]).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn blend<T: Scalar>(running: &mut NormStats<T>, batch: &NormStats<T>, m: f64) {
    let mix = |r: &mut T, b: &T| *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b.as_f64());
    running.mean.iter_mut().zip(&batch.mean).for_each(|(r, b)| mix(r, b));
    running.var.iter_mut().zip(&batch.var).for_each(|(r, b)| mix(r, b));
}

/// Cross-entropy training with Adam and batch-statistics normalization.
/// Moving statistics are stored for inference. Zero epochs leave `net`
/// untouched.
pub fn train_supervised<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let labels = train.require_labels()?;
    if train.classes() != net.classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, network {}",
            train.classes(),
            net.classes()
        )));
    }
    if !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidArgument(format!("bad training config {cfg:?}")));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        report.val_accuracy = val.map(|v| accuracy(net, v, 256)).transpose()?;
        return Ok(report);
    }
    if train.is_empty() {
        return Err(Error::EmptyBatch { op: "train_supervised" });
    }
    net.set_input_norm(train.norm().clone())?;
    let names: Vec<String> = net.params().keys().cloned().collect();
    let mut adam = AdamState::new(AdamConfig::default());
    let per_epoch = BatchPlan::shuffled(cfg.batch_size, 0).count(train.len());
    let total = per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut running = net.norm_stats().to_vec();
    for epoch in 0..cfg.epochs {
        let plan = BatchPlan::shuffled(cfg.batch_size, cfg.seed.wrapping_add(epoch as u64));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for b in train.batches(plan)? {
            let y: Vec<usize> = b.indices.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new(names.iter().cloned());
            let (logits, stats) = net.forward_taped(&mut tape, b.images.cast(), StatsSource::Batch, None)?;
            correct += argmax_rows(tape.value(logits)).iter().zip(&y).filter(|(p, t)| p == t).count();
            seen += y.len();
            let (loss, _) = match tape.cross_entropy(logits, &y, None) {
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
                r => r?,
            };
            let loss_value = tape.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step, loss: loss_value });
            }
            let grads = tape.backward(loss)?;
            adam.step(net.params_mut(), &grads, cfg.schedule.lr(cfg.lr, step, total))?;
            for (r, s) in running.iter_mut().zip(stats) {
                blend(r, &s.expect("batch mode records statistics"), cfg.momentum);
            }
            loss_sum += loss_value * y.len() as f64;
            step += 1;
        }
        report.epoch_loss.push(loss_sum / seen as f64);
        report.train_accuracy = correct as f64 / seen as f64;
    }
    net.set_norm_stats(running)?;
    report.val_accuracy = val.map(|v| accuracy(net, v, 256)).transpose()?;
    net.set_meta(TrainingMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_train_accuracy: report.train_accuracy,
    });
    Ok(report)
}
