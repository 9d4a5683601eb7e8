//! Deterministic SGD training loop: fixed shuffle order, single-threaded
//! reduction, optional flip/crop augmentation.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, logit_gradient, Network, OptimizerState, SgdParams};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Random horizontal flip plus zero-pad-2-and-crop.
    FlipCrop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// `(epoch, multiplier)` pairs; the multiplier applies from that epoch on.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        let mut last_epoch = None;
        for &(epoch, mult) in &self.lr_schedule {
            if mult <= 0.0 {
                return Err(Error::Config("lr multipliers must be positive".into()));
            }
            if let Some(prev) = last_epoch {
                if epoch <= prev {
                    return Err(Error::Config(
                        "lr_schedule epochs must be strictly increasing".into(),
                    ));
                }
            }
            last_epoch = Some(epoch);
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let mut mult = 1.0;
        for &(e, m) in &self.lr_schedule {
            if epoch >= e {
                mult = m;
            }
        }
        self.base_lr * mult
    }
}

/// Train a copy of `net` on `dataset` with SGD; the input network is left
/// untouched. Identical (net, dataset, cfg) produce bit-identical parameters.
pub fn train(net: &Network, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut model = net.clone();
    if cfg.epochs == 0 {
        return Ok(model);
    }
    let mut state = OptimizerState::sgd(
        &model,
        SgdParams {
            lr: cfg.base_lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let classes = model.num_classes();

    for epoch in 0..cfg.epochs {
        state.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut batch, labels) = dataset.gather_batch(chunk)?;
            if cfg.augmentation == Augmentation::FlipCrop {
                augment_batch(&mut batch, &mut rng);
            }
            let (logits, trace) = model.forward_trace(&batch)?;
            let lg = logit_gradient(&logits, &labels, classes)?;
            let (grads, _) = model.backward_from_logits(&trace, &lg)?;
            super::optim::step(&mut model, &grads, &mut state)?;
        }
    }
    Ok(model)
}

/// Mean training loss of a model over a dataset (no updates).
pub fn dataset_loss(net: &Network, dataset: &LabeledDataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = dataset.gather_batch(chunk)?;
        let logits = net.forward(&batch)?;
        total += cross_entropy(&logits, &labels, net.num_classes())? * labels.len() as f64;
        count += labels.len();
    }
    Ok(total / count as f64)
}

/// Horizontal flip with probability 1/2, then a random crop of the
/// zero-padded (+2 each side) image, per sample.
pub(crate) fn augment_batch(batch: &mut Tensor, rng: &mut ChaCha8Rng) {
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let data = batch.data_mut();
    for s in 0..n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..5) as isize - 2;
        let dx = rng.gen_range(0..5) as isize - 2;
        let base = s * c * plane;
        let original: Vec<f32> = data[base..base + c * plane].to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        original[ch * plane + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    data[base + ch * plane + y * w + x] = v;
                }
            }
        }
    }
}
