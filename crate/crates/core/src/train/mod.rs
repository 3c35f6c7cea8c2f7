//! SGD fine-tuning and the two compression schedules.
//!
//! [`iterative_compress`] decomposes one layer at a time and fine-tunes the
//! whole network after each; [`oneshot_compress`] decomposes everything
//! first and fine-tunes once with the same total epoch budget. No parameter
//! is ever frozen.

pub mod data;
pub mod grad;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{separable_blobs, synthetic_patterns, Dataset, Split};
pub use grad::{backward, sgd_step, BatchGrad, Gradients, LayerGrads, Loss, SoftmaxCrossEntropy, SquaredError};

use crate::error::{invalid, Error, Result};
use crate::network::{decompose_layer, random_network, LayerPlan, NetworkSpec};
use crate::rank::RankMap;

/// Learning rates drop by this factor every `lr_step` epochs.
pub const LR_DECAY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-layer learning rates, keyed by layer name.
    pub lr_overrides: BTreeMap<String, f64>,
    pub batch_size: usize,
    /// Fine-tuning epochs after each decomposition. Zero skips fine-tuning.
    pub epochs_per_stage: usize,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            lr_overrides: BTreeMap::new(),
            batch_size: 16,
            epochs_per_stage: 10,
            lr_step: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = std::iter::once(self.learning_rate).chain(self.lr_overrides.values().copied());
        for lr in rates {
            if !(lr.is_finite() && lr > 0.0) {
                return invalid(format!("learning rate must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 || self.lr_step == 0 {
            return invalid("batch_size and lr_step must be positive");
        }
        Ok(())
    }

    pub fn lr_for(&self, layer: &str) -> f64 {
        self.lr_overrides.get(layer).copied().unwrap_or(self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Training-set loss and accuracy accumulated while an epoch ran.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate_scale: f64,
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Mean cross-entropy and classification accuracy of `net` on `data`.
pub fn evaluate(net: &NetworkSpec, data: &Dataset) -> Result<Metrics> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for (x, &label) in data.inputs().iter().zip(data.labels()) {
        let out = net.forward(x)?;
        if !out.is_finite() {
            return Err(Error::Diverged("non-finite network output".into()));
        }
        loss += SoftmaxCrossEntropy.value_and_grad(out.data(), &label)?.0;
        correct += usize::from(argmax(out.data()) == label);
    }
    let n = data.len() as f64;
    Ok(Metrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// SGD over shuffled mini-batches. The shuffle order depends only on
/// `cfg.seed` and `stream`.
fn train_epochs(
    net: &NetworkSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    lr_step: usize,
    stream: u64,
) -> Result<(NetworkSpec, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cur = net.clone();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let scale = LR_DECAY.powi((epoch / lr_step) as i32);
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<_> = batch.iter().map(|&i| &data.inputs()[i]).collect();
            let targets: Vec<_> = batch.iter().map(|&i| &data.labels()[i]).collect();
            let g = backward(&cur, &inputs, &targets, &SoftmaxCrossEntropy)?;
            loss += g.loss * batch.len() as f64;
            correct += g.outputs.iter().zip(&targets).filter(|(o, &&t)| argmax(o) == t).count();
            cur = sgd_step(&cur, &g.grads, |name| scale * cfg.lr_for(name))?;
        }
        history.push(EpochMetrics {
            epoch,
            learning_rate_scale: scale,
            loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((cur, history))
}

/// Fine-tunes every parameter of `net` for `cfg.epochs_per_stage` epochs.
pub fn finetune(net: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(NetworkSpec, Vec<EpochMetrics>)> {
    train_epochs(net, data, cfg, cfg.epochs_per_stage, cfg.lr_step, 0)
}

/// Epochs used to train the uncompressed reference network on the built-in task.
pub const BASELINE_EPOCHS: usize = 20;
/// Decay interval for baseline training: one drop, late in the run.
pub const BASELINE_LR_STEP: usize = 15;

/// Trains the uncompressed network for [`BASELINE_EPOCHS`] with `cfg`'s
/// learning rate, batch size and seed.
pub fn train_baseline(net: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(NetworkSpec, Vec<EpochMetrics>)> {
    let cfg = TrainConfig {
        lr_step: BASELINE_LR_STEP,
        ..cfg.clone()
    };
    train(net, data, &cfg, BASELINE_EPOCHS)
}

/// Trains `net` from its current weights for `epochs` epochs.
pub fn train(net: &NetworkSpec, data: &Dataset, cfg: &TrainConfig, epochs: usize) -> Result<(NetworkSpec, Vec<EpochMetrics>)> {
    train_epochs(net, data, cfg, epochs, cfg.lr_step, u64::MAX)
}

/// One line of a [`StageLog`]. Pre/post metrics are measured on the
/// held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Decomposed layer, or `*` for a fine-tune-only stage.
    pub layer: String,
    pub rank: Option<usize>,
    pub pre: Metrics,
    pub post: Metrics,
    pub epochs: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageLog {
    pub records: Vec<StageRecord>,
}

impl StageLog {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("stage records serialize") + "\n")
            .collect()
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                    offset,
                    message: e.to_string(),
                })?);
            }
            offset += line.len();
        }
        Ok(Self { records })
    }

    pub fn last(&self) -> Option<&StageRecord> {
        self.records.last()
    }
}

/// A schedule that stopped early. `net` is the last network that finished
/// a stage; `log` holds the stages completed before the failure.
#[derive(Debug)]
pub struct Aborted {
    pub net: NetworkSpec,
    pub log: StageLog,
    pub error: Error,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "aborted after {} stage(s)", self.log.records.len())
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type ScheduleResult = std::result::Result<(NetworkSpec, StageLog), Box<Aborted>>;

/// Decomposable layers of `net` paired with their ranks, in network order.
fn stage_plan(net: &NetworkSpec, ranks: &RankMap) -> Result<Vec<(String, usize)>> {
    let layers = net.decomposable_layers();
    if let Some(extra) = ranks.keys().find(|k| !layers.contains(k)) {
        return invalid(format!("rank given for `{extra}`, which is not a decomposable layer"));
    }
    layers
        .into_iter()
        .map(|name| match ranks.get(&name) {
            Some(&r) => Ok((name, r)),
            None => invalid(format!("no rank given for `{name}`")),
        })
        .collect()
}

fn abort(net: &NetworkSpec, log: &StageLog, error: Error) -> Box<Aborted> {
    Box::new(Aborted {
        net: net.clone(),
        log: log.clone(),
        error,
    })
}

/// Decomposes one layer at a time in network order, fine-tuning the whole
/// network after each.
pub fn iterative_compress(net: &NetworkSpec, data: &Split, ranks: &RankMap, cfg: &TrainConfig) -> ScheduleResult {
    let mut log = StageLog::default();
    let plan = stage_plan(net, ranks).and_then(|p| cfg.validate().map(|_| p)).map_err(|e| abort(net, &log, e))?;
    let mut cur = net.clone();
    for (stage, (layer, rank)) in plan.into_iter().enumerate() {
        let step = || -> Result<(NetworkSpec, StageRecord)> {
            let decomposed = decompose_layer(&cur, &layer, rank, cfg.seed.wrapping_add(stage as u64))?;
            let pre = evaluate(&decomposed, &data.test)?;
            let (tuned, _) = train_epochs(&decomposed, &data.train, cfg, cfg.epochs_per_stage, cfg.lr_step, stage as u64)?;
            let post = evaluate(&tuned, &data.test)?;
            Ok((
                tuned,
                StageRecord {
                    stage,
                    layer: layer.clone(),
                    rank: Some(rank),
                    pre,
                    post,
                    epochs: cfg.epochs_per_stage,
                },
            ))
        };
        let (next, record) = step().map_err(|e| abort(&cur, &log, e))?;
        log.records.push(record);
        cur = next;
    }
    Ok((cur, log))
}

/// Decompose every layer, then fine-tune once for as many epochs as the
/// iterative schedule would spend in total. The decay interval stretches
/// by the same factor so both schedules follow the same learning-rate shape.
pub fn oneshot_compress(net: &NetworkSpec, data: &Split, ranks: &RankMap, cfg: &TrainConfig) -> ScheduleResult {
    let mut log = StageLog::default();
    let plan = stage_plan(net, ranks).and_then(|p| cfg.validate().map(|_| p)).map_err(|e| abort(net, &log, e))?;
    let mut cur = net.clone();
    for (stage, (layer, rank)) in plan.iter().enumerate() {
        let step = || -> Result<(NetworkSpec, StageRecord)> {
            let decomposed = decompose_layer(&cur, layer, *rank, cfg.seed.wrapping_add(stage as u64))?;
            let m = evaluate(&decomposed, &data.test)?;
            Ok((
                decomposed,
                StageRecord {
                    stage,
                    layer: layer.clone(),
                    rank: Some(*rank),
                    pre: m,
                    post: m,
                    epochs: 0,
                },
            ))
        };
        let (next, record) = step().map_err(|e| abort(&cur, &log, e))?;
        log.records.push(record);
        cur = next;
    }
    let stages = plan.len().max(1);
    let epochs = stages * cfg.epochs_per_stage;
    let tune = || -> Result<(NetworkSpec, StageRecord)> {
        let pre = evaluate(&cur, &data.test)?;
        let (tuned, _) = train_epochs(&cur, &data.train, cfg, epochs, cfg.lr_step * stages, 0)?;
        let post = evaluate(&tuned, &data.test)?;
        Ok((
            tuned,
            StageRecord {
                stage: plan.len(),
                layer: "*".into(),
                rank: None,
                pre,
                post,
                epochs,
            },
        ))
    };
    let (tuned, record) = tune().map_err(|e| abort(&cur, &log, e))?;
    log.records.push(record);
    Ok((tuned, log))
}

/// The reference network for the built-in task: two conv blocks and two fc
/// layers, `3×16×16` in, 10 logits out.
pub fn toy_network(seed: u64) -> Result<NetworkSpec> {
    random_network(
        &data::PATTERN_SHAPE,
        &[
            LayerPlan::Conv { out_channels: 6, kernel_size: 3, stride: 1, padding: 1 },
            LayerPlan::Relu,
            LayerPlan::MaxPool { window: 2, stride: 2 },
            LayerPlan::Conv { out_channels: 12, kernel_size: 3, stride: 1, padding: 1 },
            LayerPlan::Relu,
            LayerPlan::MaxPool { window: 2, stride: 2 },
            LayerPlan::Flatten,
            LayerPlan::Fc { outputs: 32 },
            LayerPlan::Relu,
            LayerPlan::Fc { outputs: data::PATTERN_CLASSES },
        ],
        seed,
    )
}
