//! Entropy minimization and the fully test-time baselines.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::EvalReport;
use super::modulation::ModulationSet;
use super::optim::{AdamConfig, AdamState, Schedule};
use super::stats::estimate_population_stats;
use crate::data::{BatchPlan, Dataset};
use crate::diffcore::kernel::{argmax_rows, row_entropies, softmax_probs, NormStats};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::netmodels::{Network, StatsSource};

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    #[serde(rename = "bn")]
    BatchNorm,
    Entropy,
    #[serde(rename = "pseudo")]
    PseudoLabel,
    Oracle,
    #[serde(rename = "entropy_full_theta")]
    EntropyFullTheta,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SourceOnly,
        Method::BatchNorm,
        Method::Entropy,
        Method::PseudoLabel,
        Method::Oracle,
        Method::EntropyFullTheta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::BatchNorm => "bn",
            Method::Entropy => "entropy",
            Method::PseudoLabel => "pseudo",
            Method::Oracle => "oracle",
            Method::EntropyFullTheta => "entropy_full_theta",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// How normalization statistics are handled while adapting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// Population statistics from one full pass before any step.
    #[default]
    OneShot,
    /// Each batch is normalized by its own statistics, including the final pass.
    Streaming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub stats_mode: StatsMode,
    /// Pseudo-label confidence threshold; a prediction is a target only if
    /// its top probability is strictly greater.
    pub threshold: f64,
    /// Per-slot enable mask for modulation; all slots when absent.
    pub slot_mask: Option<Vec<bool>>,
    /// Record error and entropy after every epoch (extra diagnostic passes).
    pub track_epochs: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            epochs: 1,
            schedule: Schedule::Cosine,
            adam: AdamConfig::default(),
            seed: 0,
            stats_mode: StatsMode::OneShot,
            threshold: DEFAULT_THRESHOLD,
            slot_mask: None,
            track_epochs: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("threshold must be in (0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Work done by an adaptation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    /// Examples pushed through untaped inference (statistics pass and
    /// final prediction pass).
    pub inference_examples: usize,
    /// Examples pushed through taped forward passes.
    pub taped_examples: usize,
    pub backward_passes: usize,
    /// Examples evaluated only for per-epoch diagnostics.
    pub diagnostic_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean prediction entropy of the batch before the update.
    pub batch_entropy: f64,
    pub loss: f64,
    /// Examples contributing to the loss.
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub mean_entropy: f64,
    pub error_pct: Option<f64>,
}

/// Statistics used by an adapted model.
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptedStats {
    Stored,
    Replaced(Vec<NormStats<f32>>),
    Batch,
}

/// Result of an adaptation run: the network (borrowed unless θ was
/// trained), modulation, statistics, final predictions, and logs.
#[derive(Clone, Debug)]
pub struct AdaptedModel<'a> {
    pub method: Method,
    pub network: Cow<'a, Network<f32>>,
    pub modulation: ModulationSet<f32>,
    pub stats: AdaptedStats,
    /// Class probabilities from the final inference pass, in dataset order.
    pub probs: Tensor<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub counts: OpCounts,
    /// Number of trainable scalars.
    pub trainable: usize,
}

impl AdaptedModel<'_> {
    pub fn stats_source(&self) -> StatsSource<'_, f32> {
        match &self.stats {
            AdaptedStats::Stored => StatsSource::Stored,
            AdaptedStats::Replaced(s) => StatsSource::Replaced(s),
            AdaptedStats::Batch => StatsSource::Batch,
        }
    }

    /// Argmax of the final predictions.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }

    /// Class probabilities for another dataset under the adapted state.
    pub fn predict(&self, data: &Dataset, batch_size: usize) -> Result<Tensor<f32>> {
        predict(&self.network, data, batch_size, self.stats_source(), &self.modulation)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        EvalReport::from_probs(&self.probs, data.require_labels()?)
    }
}

fn predict(
    net: &Network<f32>,
    data: &Dataset,
    batch_size: usize,
    stats: StatsSource<'_, f32>,
    modulation: &ModulationSet<f32>,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for b in data.batches(BatchPlan::sequential(batch_size))? {
        let logits = net.forward(&b.images, stats, Some(modulation))?;
        parts.push(softmax_probs(&logits)?);
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(vec![0, net.classes()]));
    }
    Tensor::concat_batch(&parts)
}

/// Identity modulation for every slot of `net`.
pub fn init_modulation(net: &Network<f32>) -> ModulationSet<f32> {
    ModulationSet::identity(net.slot_channels())
}

#[derive(Clone, Copy)]
enum Objective {
    Entropy,
    Pseudo(f64),
    Oracle,
}

fn check_data(net: &Network<f32>, data: &Dataset) -> Result<()> {
    if data.image_shape() != net.input_shape() {
        return Err(Error::shape(
            "adapt",
            format!("data {:?} for network input {:?}", data.image_shape(), net.input_shape()),
        ));
    }
    if data.classes() != net.classes() {
        return Err(Error::shape("adapt", format!("{} data classes, {} network classes", data.classes(), net.classes())));
    }
    Ok(())
}

fn prepare_stats(net: &Network<f32>, data: &Dataset, cfg: &AdaptationConfig, counts: &mut OpCounts) -> Result<AdaptedStats> {
    match cfg.stats_mode {
        StatsMode::OneShot => {
            let s = estimate_population_stats(net, data, cfg.batch_size)?;
            counts.inference_examples += data.len();
            Ok(AdaptedStats::Replaced(s))
        }
        StatsMode::Streaming => Ok(AdaptedStats::Batch),
    }
}

fn source(stats: &AdaptedStats) -> StatsSource<'_, f32> {
    match stats {
        AdaptedStats::Stored => StatsSource::Stored,
        AdaptedStats::Replaced(s) => StatsSource::Replaced(s),
        AdaptedStats::Batch => StatsSource::Batch,
    }
}

fn epoch_log(epoch: usize, probs: &Tensor<f32>, data: &Dataset) -> EpochLog {
    let ents = row_entropies(probs);
    EpochLog {
        epoch,
        mean_entropy: ents.iter().sum::<f64>() / ents.len().max(1) as f64,
        error_pct: data.labels().map(|l| {
            let wrong = argmax_rows(probs).iter().zip(l).filter(|(p, y)| p != y).count();
            100.0 * wrong as f64 / l.len().max(1) as f64
        }),
    }
}

/// The frozen model with its stored statistics.
pub fn adapt_source_only<'a>(net: &'a Network<f32>, data: &Dataset, cfg: &AdaptationConfig) -> Result<AdaptedModel<'a>> {
    cfg.validate()?;
    check_data(net, data)?;
    let modulation = init_modulation(net);
    let probs = predict(net, data, cfg.batch_size, StatsSource::Stored, &modulation)?;
    Ok(AdaptedModel {
        method: Method::SourceOnly,
        network: Cow::Borrowed(net),
        modulation,
        stats: AdaptedStats::Stored,
        probs,
        steps: Vec::new(),
        epochs: Vec::new(),
        counts: OpCounts {
            inference_examples: data.len(),
            ..OpCounts::default()
        },
        trainable: 0,
    })
}

/// Normalization statistics replaced by test-set estimates; no gradient steps.
pub fn adapt_batchnorm_only<'a>(net: &'a Network<f32>, data: &Dataset, cfg: &AdaptationConfig) -> Result<AdaptedModel<'a>> {
    let cfg = AdaptationConfig {
        epochs: 0,
        ..cfg.clone()
    };
    let mut m = run(Cow::Borrowed(net), data, &cfg, Objective::Entropy, false)?;
    m.method = Method::BatchNorm;
    Ok(m)
}

/// Entropy minimization over the modulation parameters.
pub fn adapt_entropy<'a>(net: &'a Network<f32>, data: &Dataset, cfg: &AdaptationConfig) -> Result<AdaptedModel<'a>> {
    run(Cow::Borrowed(net), data, cfg, Objective::Entropy, false)
}

/// Cross-entropy on confident hard predictions. `cfg.threshold` sets the
/// confidence cut.
pub fn adapt_pseudo_label<'a>(net: &'a Network<f32>, data: &Dataset, cfg: &AdaptationConfig) -> Result<AdaptedModel<'a>> {
    let mut m = run(Cow::Borrowed(net), data, cfg, Objective::Pseudo(cfg.threshold), false)?;
    m.method = Method::PseudoLabel;
    Ok(m)
}

/// Cross-entropy against the true labels.
pub fn adapt_oracle<'a>(net: &'a Network<f32>, data: &Dataset, cfg: &AdaptationConfig) -> Result<AdaptedModel<'a>> {
    data.require_labels()?;
    let mut m = run(Cow::Borrowed(net), data, cfg, Objective::Oracle, false)?;
    m.method = Method::Oracle;
    Ok(m)
}

/// Entropy minimization over every parameter of a private copy of θ.
pub fn adapt_entropy_full_params(net: &Network<f32>, data: &Dataset, cfg: &AdaptationConfig) -> Result<AdaptedModel<'static>> {
    let mut m = run(Cow::Owned(net.clone()), data, cfg, Objective::Entropy, true)?;
    m.method = Method::EntropyFullTheta;
    Ok(m)
}

/// Dispatches on `method`.
pub fn adapt_with<'a>(method: Method, net: &'a Network<f32>, data: &Dataset, cfg: &AdaptationConfig) -> Result<AdaptedModel<'a>> {
    match method {
        Method::SourceOnly => adapt_source_only(net, data, cfg),
        Method::BatchNorm => adapt_batchnorm_only(net, data, cfg),
        Method::Entropy => adapt_entropy(net, data, cfg),
        Method::PseudoLabel => adapt_pseudo_label(net, data, cfg),
        Method::Oracle => adapt_oracle(net, data, cfg),
        Method::EntropyFullTheta => adapt_entropy_full_params(net, data, cfg),
    }
}

fn run<'a>(
    mut net: Cow<'a, Network<f32>>,
    data: &Dataset,
    cfg: &AdaptationConfig,
    objective: Objective,
    full_theta: bool,
) -> Result<AdaptedModel<'a>> {
    cfg.validate()?;
    check_data(&net, data)?;
    if data.is_empty() {
        return Err(Error::EmptyBatch { op: "adapt" });
    }
    let mut counts = OpCounts::default();
    let mut modulation = init_modulation(&net);
    if let Some(mask) = &cfg.slot_mask {
        if mask.len() != modulation.len() {
            return Err(Error::ModulationMismatch(format!(
                "mask of {} for {} slots",
                mask.len(),
                modulation.len()
            )));
        }
    }
    let stats = prepare_stats(&net, data, cfg, &mut counts)?;
    let trainable: Vec<String> = if full_theta {
        net.params().keys().cloned().collect()
    } else {
        modulation.param_names(cfg.slot_mask.as_deref())
    };
    let trainable_count = if full_theta {
        net.param_count()
    } else {
        trainable.iter().map(|n| modulation.get(n).map_or(0, Tensor::len)).sum()
    };
    let labels = data.labels();
    let mut adam = AdamState::new(cfg.adam);
    let per_epoch = BatchPlan::sequential(cfg.batch_size).count(data.len());
    let total = per_epoch * cfg.epochs;
    let mut steps = Vec::with_capacity(total);
    let mut epochs = Vec::new();
    if cfg.track_epochs {
        let p = predict(&net, data, cfg.batch_size, source(&stats), &modulation)?;
        counts.diagnostic_examples += data.len();
        epochs.push(epoch_log(0, &p, data));
    }

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let plan = BatchPlan::shuffled(cfg.batch_size, cfg.seed.wrapping_add(epoch as u64));
        for b in data.batches(plan)? {
            let lr = cfg.schedule.lr(cfg.lr, step, total);
            let mut tape = Tape::new(trainable.iter().cloned());
            let n = b.indices.len();
            let (logits, _) = net.forward_taped(&mut tape, b.images, source(&stats), Some(&modulation))?;
            counts.taped_examples += n;
            let probs = softmax_probs(tape.value(logits))?;
            let ents = row_entropies(&probs);
            let batch_entropy = ents.iter().sum::<f64>() / n as f64;
            let (loss, selected) = match objective {
                Objective::Entropy => (tape.entropy_loss(logits), n),
                Objective::Oracle => {
                    let all = labels.ok_or(Error::MissingLabels)?;
                    let y: Vec<usize> = b.indices.iter().map(|&i| all[i]).collect();
                    let (l, c) = tape.cross_entropy(logits, &y, None)?;
                    (Ok(l), c)
                }
                Objective::Pseudo(threshold) => {
                    let c = probs.shape()[1];
                    let y = argmax_rows(&probs);
                    let mask: Vec<bool> = probs
                        .data()
                        .chunks(c)
                        .zip(&y)
                        .map(|(row, &k)| row[k] as f64 > threshold)
                        .collect();
                    let (l, count) = tape.cross_entropy(logits, &y, Some(&mask))?;
                    (Ok(l), count)
                }
            };
            let loss = match loss {
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
                r => r?,
            };
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step, loss: loss_value });
            }
            if selected > 0 {
                let grads = tape.backward(loss)?;
                counts.backward_passes += 1;
                if full_theta {
                    adam.step(net.to_mut().params_mut(), &grads, lr)?;
                } else {
                    adam.step(&mut modulation, &grads, lr)?;
                }
            }
            steps.push(StepLog {
                step,
                epoch,
                lr,
                batch_entropy,
                loss: loss_value,
                selected,
            });
            step += 1;
        }
        if cfg.track_epochs && epoch + 1 < cfg.epochs {
            let p = predict(&net, data, cfg.batch_size, source(&stats), &modulation)?;
            counts.diagnostic_examples += data.len();
            epochs.push(epoch_log(epoch + 1, &p, data));
        }
    }

    let probs = predict(&net, data, cfg.batch_size, source(&stats), &modulation)?;
    counts.inference_examples += data.len();
    if cfg.track_epochs && cfg.epochs > 0 {
        epochs.push(epoch_log(cfg.epochs, &probs, data));
    }
    Ok(AdaptedModel {
        method: Method::Entropy,
        network: net,
        modulation,
        stats,
        probs,
        steps,
        epochs,
        counts,
        trainable: trainable_count,
    })
}
