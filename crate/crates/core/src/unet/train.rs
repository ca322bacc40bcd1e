use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape};
use crate::error::{Error, Result};
use crate::imageops::{normalize_minmax, ImageGray};
use crate::optim::{AdamConfig, AdamState};

use super::{gray_batch, hybrid_loss_var, Unet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.01,
            batch_size: 8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Image-weighted mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_ssim: f64,
    pub l_rms: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub images: usize,
    pub steps: u64,
    pub history: Vec<EpochLoss>,
}

/// Trains `model` in place with Adam on the hybrid loss.
pub fn train(model: &mut Unet, dataset: &[ImageGray], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training dataset is empty".into()));
    }
    let size = model.config().input_size;
    if let Some(bad) = dataset.iter().find(|img| img.h != size || img.w != size) {
        return Err(Error::dim("train", (bad.h, bad.w), (size, size)));
    }
    let images: Vec<ImageGray> = dataset.iter().map(normalize_minmax).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_store(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut s_ssim, mut s_rms) = (0f64, 0f64);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ImageGray> = chunk.iter().map(|&i| images[i].clone()).collect();
            let x = gray_batch(&batch)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let heads = model.forward_tape(&mut tape, xv, Mode::Train, &mut rng)?;
            let loss = hybrid_loss_var(&mut tape, heads.y_ssim, heads.y_rms, xv)?;
            let grads = tape.backward(loss.total)?;
            model.params_mut().zero_grad();
            tape.accumulate(&grads, model.params_mut())?;
            adam.step_store(model.params_mut())?;
            let b = loss.breakdown(&tape);
            s_ssim += b.l_ssim as f64 * chunk.len() as f64;
            s_rms += b.l_rms as f64 * chunk.len() as f64;
        }
        let n = images.len() as f64;
        let (l_ssim, l_rms) = (s_ssim / n, s_rms / n);
        let record = EpochLoss {
            epoch,
            l_ssim,
            l_rms,
            total: l_ssim + l_rms,
        };
        log::info!(
            "epoch {epoch}/{}: l_ssim={l_ssim:.5} l_rms={l_rms:.5} total={:.5}",
            cfg.epochs,
            record.total
        );
        history.push(record);
    }
    model.params_mut().zero_grad();
    let flipped = model.orient_heads(&images)?;
    log::debug!("head orientation flips [ssim, rms]: {flipped:?}");
    Ok(TrainReport {
        config: *cfg,
        images: images.len(),
        steps: adam.t,
        history,
    })
}
