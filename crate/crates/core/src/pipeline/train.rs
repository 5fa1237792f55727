//! Minibatch Adam training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, LossParts, Model, TrainOptions};
use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::channel::Snr;
use crate::config::KeyValues;
use crate::dataset::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Channel SNR simulated during training.
    pub snr: Snr,
    pub seed: u64,
    /// Halve the learning rate after each third of the epochs.
    pub lr_decay: bool,
    /// Fit the mask maps to the trained latents once training ends. The loss
    /// never passes through the masks, so this is the only way they learn.
    pub fit_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 4,
            adam: AdamConfig::default(),
            snr: Snr::Db(10.0),
            seed: 0,
            lr_decay: true,
            fit_masks: true,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: kv.get_or("lr", d.adam.lr)?,
                ..d.adam
            },
            snr: kv.get_or("train_snr_db", d.snr)?,
            seed: kv.get_or("train_seed", d.seed)?,
            lr_decay: kv.get_or("lr_decay", d.lr_decay)?,
            fit_masks: kv.get_or("fit_masks", d.fit_masks)?,
        };
        if cfg.batch_size == 0 || !(cfg.adam.lr > 0.0) {
            return Err(Error::BadConfig(
                "batch_size and lr must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    /// Learning rate used during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.lr_decay {
            return self.adam.lr;
        }
        let period = self.epochs.div_ceil(3).max(1);
        self.adam.lr * 0.5f64.powi((epoch / period) as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean loss parts over each epoch's steps.
    pub epoch_parts: Vec<LossParts>,
}

/// Shuffles with a generator seeded from `cfg.seed`, which also draws all
/// training noise, so a rerun reproduces the loss curve exactly.
pub fn train(model: &mut Model, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::BadConfig("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.store);
    let opts = TrainOptions {
        snr: cfg.snr,
        ..TrainOptions::default()
    };
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let adam = AdamConfig {
            lr: cfg.lr_at(epoch),
            ..cfg.adam
        };
        order.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut mean = LossParts::default();
        for chunk in &chunks {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = Batch::from_samples(&picked, &model.cfg.transform)?;
            let pass = model.forward_train(&batch, &opts, &mut rng)?;
            let grads = pass.tape.backward(pass.loss)?;
            report
                .step_losses
                .push(pass.tape.value(pass.loss).data()[0]);
            mean.accumulate(&pass.parts, 1.0 / chunks.len() as f64);
            adam_step(&mut model.store, &grads, &mut state, &adam)?;
        }
        report.epoch_parts.push(mean);
    }
    if cfg.fit_masks {
        model.fit_mask_maps(samples)?;
    }
    Ok(report)
}

/// Mean loss parts over the whole set in fixed batches, with noise drawn
/// from a generator seeded with `seed`.
pub fn dataset_loss(
    model: &Model,
    samples: &[Sample],
    opts: &TrainOptions,
    batch_size: usize,
    seed: u64,
) -> Result<LossParts> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = LossParts::default();
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size.max(1)).collect();
    for chunk in &chunks {
        let picked: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::from_samples(&picked, &model.cfg.transform)?;
        let pass = model.forward_train(&batch, opts, &mut rng)?;
        mean.accumulate(&pass.parts, 1.0 / chunks.len() as f64);
    }
    Ok(mean)
}
