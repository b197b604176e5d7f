//! Per-orientation training: SGD with momentum, a step learning-rate
//! schedule, and best-validation model selection.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::predict_cropped;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::{self, Orientation, CROP_SIZE};
use crate::loss::{batch_loss, LossKind};
use crate::nn::{Checkpoint, NetworkConfig, NetworkParams, Tensor};
use crate::sampler::{make_minibatch, to_tensors, SamplerConfig, VolumeSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub momentum: f32,
    pub lr0: f32,
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f32,
    pub batch_size: usize,
    pub loss: LossKind,
    pub smooth: f32,
    /// Upper bound on minibatches per epoch.
    pub max_steps_per_epoch: usize,
    /// In-plane crop used for validation slices.
    pub val_crop_size: usize,
    /// Slices per validation forward pass.
    pub val_batch_size: usize,
    /// Threads used to build each minibatch.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            momentum: 0.9,
            lr0: 0.001,
            epochs: 500,
            decay_epoch: 200,
            decay_factor: 0.1,
            batch_size: 200,
            loss: LossKind::DiceSmooth,
            smooth: 1.0,
            max_steps_per_epoch: 1000,
            val_crop_size: CROP_SIZE,
            val_batch_size: 8,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "decay_epoch {} must be below epochs {}",
                self.decay_epoch, self.epochs
            )));
        }
        if !(self.lr0 > 0.0) || !(self.smooth >= 0.0) {
            return Err(Error::Config("lr0 must be positive and smooth non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and decay_factor be positive".into()));
        }
        if self.batch_size == 0 || self.max_steps_per_epoch == 0 || self.val_batch_size == 0 {
            return Err(Error::Config("batch sizes and max_steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        if epoch < self.decay_epoch {
            self.lr0
        } else {
            self.lr0 * self.decay_factor
        }
    }

    /// Minibatches per epoch given the total number of border pixels.
    pub fn steps_per_epoch(&self, border_pixels: usize) -> usize {
        border_pixels.div_ceil(self.batch_size).clamp(1, self.max_steps_per_epoch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub val_dice: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// Parameters from the best validation epoch.
    pub params: NetworkParams,
    pub orientation: Orientation,
    pub best_epoch: usize,
    pub best_val_dice: f32,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            orientation: Some(self.orientation),
            epoch: self.best_epoch,
            best_val_dice: self.best_val_dice,
        }
    }
}

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &NetworkParams, momentum: f32) -> Self {
        let velocity = params
            .named_tensors()
            .into_iter()
            .map(|t| Tensor::zeros(t.tensor.shape.clone()))
            .collect();
        Sgd { momentum, velocity }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f32) {
        let grads = grads.named_tensors();
        for ((slot, grad), vel) in params.named_tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            if !slot.trainable {
                continue;
            }
            for ((p, &g), v) in slot.tensor.data.iter_mut().zip(&grad.tensor.data).zip(&mut vel.data) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Dice of two binary slices; 1.0 when both are empty.
fn slice_dice(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> f64 {
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (p, t) in pred.zip(truth) {
        inter += usize::from(p && t);
        np += usize::from(p);
        nt += usize::from(t);
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

/// Mean per-slice Dice at 0.5 over center-cropped slices of `val_set`.
pub fn validate(params: &NetworkParams, val_set: &[Sample], orient: Orientation, crop_size: usize, batch_size: usize) -> Result<f32> {
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for sample in val_set {
        let preds = predict_cropped(params, &sample.volume.grid, orient, crop_size, batch_size)?;
        for (k, (pred, window)) in preds.iter().enumerate() {
            let truth = geometry::crop(&geometry::slice(&sample.mask.grid, orient, k), window);
            total += slice_dice(
                pred.as_slice().iter().map(|&p| p > 0.5),
                truth.as_slice().iter().map(|&t| t != 0),
            );
            count += 1;
        }
    }
    Ok((total / count as f64) as f32)
}

/// Seeds network initialization for `orient`.
fn init_rng(seed: u64, orient: Orientation) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(orient.axis() as u64);
    rng
}

/// Trains a freshly initialized network.
pub fn train_orientation(
    train_set: &[Sample],
    val_set: &[Sample],
    orient: Orientation,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainingConfig,
    sampler_cfg: &SamplerConfig,
) -> Result<TrainedModel> {
    let params = NetworkParams::build(net_cfg, &mut init_rng(train_cfg.seed, orient))?;
    train_from(params, train_set, val_set, orient, train_cfg, sampler_cfg, |_| {})
}

/// Trains starting from `params`; `on_epoch` sees each record as it is produced.
pub fn train_from(
    mut params: NetworkParams,
    train_set: &[Sample],
    val_set: &[Sample],
    orient: Orientation,
    train_cfg: &TrainingConfig,
    sampler_cfg: &SamplerConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    train_cfg.validate()?;
    sampler_cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if sampler_cfg.channels() != params.config.in_channels {
        return Err(Error::Config(format!(
            "sampler produces {} channels but the network expects {}",
            sampler_cfg.channels(),
            params.config.in_channels
        )));
    }
    let sources = train_set
        .iter()
        .map(|s| VolumeSampler::new(&s.volume, &s.mask, orient))
        .collect::<Result<Vec<_>>>()?;
    let steps = train_cfg.steps_per_epoch(sources.iter().map(VolumeSampler::border_count).sum());
    let mut rng = ChaCha8Rng::seed_from_u64(sampler_cfg.seed);
    rng.set_stream(orient.axis() as u64);
    let mut opt = Sgd::new(&params, train_cfg.momentum);

    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f32, NetworkParams)> = None;
    for epoch in 0..train_cfg.epochs {
        let lr = train_cfg.lr_at(epoch);
        let mut loss_sum = 0.0f64;
        for _ in 0..steps {
            let patches = make_minibatch(train_cfg.batch_size, &sources, sampler_cfg, train_cfg.workers, &mut rng)?;
            let (input, targets) = to_tensors(&patches)?;
            let (probs, cache) = params.forward_train(&input)?;
            let (loss, d_probs) = batch_loss(train_cfg.loss, &probs, &targets, train_cfg.smooth)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss as f64;
            let grads = params.backward(&cache, &d_probs);
            opt.step(&mut params, &grads, lr);
            params.update_running_stats(&cache);
        }
        let train_loss = (loss_sum / steps as f64) as f32;
        let val_dice = validate(&params, val_set, orient, train_cfg.val_crop_size, train_cfg.val_batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_dice,
        };
        log::info!(
            "{orient} epoch {epoch}: lr {lr:.2e} loss {train_loss:.5} val dice {val_dice:.4}"
        );
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| val_dice > *b) {
            best = Some((epoch, val_dice, params.clone()));
        }
    }
    let (best_epoch, best_val_dice, params) = best.ok_or_else(|| Error::Config("epochs must be positive".into()))?;
    Ok(TrainedModel {
        params,
        orientation: orient,
        best_epoch,
        best_val_dice,
        history,
    })
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_dice";

pub fn metrics_line(r: &EpochRecord) -> String {
    format!("{},{:e},{},{}", r.epoch, r.lr, r.train_loss, r.val_dice)
}

/// CSV metrics log, one row per epoch.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{}", metrics_line(r));
    }
    out
}

pub fn write_metrics_log(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(history)).map_err(|e| Error::io(path, e))
}
