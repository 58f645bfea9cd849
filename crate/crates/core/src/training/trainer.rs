use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, sample_rng, AugmentConfig};
use super::data::Dataset;
use super::metrics::{EvalReport, PredictionRecord};
use crate::autodiff::{Adam, AdamConfig, Tensor};
use crate::capsnet::{argmax, loss_on_tape, GradMode, Masking, PaXNetModel, Sample};
use crate::error::{Error, Result};
use crate::imgproc::GrayImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub schedule: LrSchedule,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 850,
            batch_size: 32,
            lr: 1e-4,
            test_fraction: 0.2,
            seed: 0,
            checkpoint_every: 0,
            schedule: LrSchedule::Constant,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} must lie in (0, 1)", self.test_fraction)));
        }
        self.augment.validate()
    }
}

/// Per-epoch learning rate relative to `TrainConfig::lr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` at the first epoch towards zero.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

impl History {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// One optimisation step: forward with teacher masking, loss, backward and
/// an Adam update of the trainable tensors. Returns the batch loss and the
/// number of correct predictions.
pub(crate) fn train_step(
    model: &mut PaXNetModel,
    adam: &mut Adam,
    samples: &[Sample],
    labels: &[usize],
    lr: f64,
    at: (usize, usize),
) -> Result<(f64, usize)> {
    let mut g = model.graph(samples, GradMode::Train, Masking::Teacher(labels))?;
    let loss = loss_on_tape(&mut g.tape, g.norms, g.recon, g.input, labels, &model.config.loss)?;
    let value = g.tape.value(loss).item()?;
    let numeric = |reason: String| Error::Numeric {
        epoch: at.0,
        batch: at.1,
        lr,
        reason,
    };
    if !value.is_finite() {
        return Err(numeric(format!("loss is {value}")));
    }
    let n = model.config.caps.n;
    let correct = g
        .tape
        .value(g.probs)
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    g.tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in &g.params {
        if let Some(grad) = g.tape.grad(*var) {
            if grad.data().iter().any(|v| !v.is_finite()) {
                return Err(numeric(format!("gradient of {name} is not finite")));
            }
            grads.insert(name.clone(), grad);
        }
    }
    adam.step(&mut model.params, &grads, lr)?;
    Ok((value, correct))
}

/// Augmented copies of `order`'s samples for one epoch. `order[k]` is a
/// position in `indices`; the position seeds the sample's generator so that
/// resampled duplicates are augmented independently.
fn augmented_epoch(
    data: &Dataset,
    indices: &[usize],
    order: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
) -> Vec<GrayImage> {
    order
        .par_iter()
        .map(|&pos| {
            let mut rng = sample_rng(seed, pos as u64, epoch as u64);
            augment(&data.images[indices[pos]], cfg, &mut rng)
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    order.shuffle(&mut rng);
    order
}

/// Trains the trainable tensors of `model` on `data[indices]` (indices may
/// repeat after resampling). Frozen tensors are never updated.
pub fn train(
    model: &mut PaXNetModel,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<History> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Data(format!("sample index {bad} outside dataset of {}", data.len())));
    }
    if cfg.checkpoint_every > 0 {
        match checkpoint_dir {
            Some(d) => std::fs::create_dir_all(d)?,
            None => return Err(Error::Config("checkpoint_every needs a checkpoint directory".into())),
        }
    }
    let mut adam = Adam::new(cfg.adam);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let order = epoch_order(indices.len(), cfg.seed, epoch);
        let images = augmented_epoch(data, indices, &order, &cfg.augment, cfg.seed, epoch);
        let (mut total, mut correct) = (0.0, 0usize);
        for (b, (pos, imgs)) in order
            .chunks(cfg.batch_size)
            .zip(images.chunks(cfg.batch_size))
            .enumerate()
        {
            let samples: Vec<Sample> = pos
                .iter()
                .zip(imgs)
                .map(|(&p, img)| Sample::new(img, &data.entries[indices[p]].id))
                .collect();
            let labels: Vec<usize> = pos.iter().map(|&p| data.entries[indices[p]].label.class()).collect();
            let (loss, hits) = train_step(model, &mut adam, &samples, &labels, lr, (epoch, b))?;
            total += loss * pos.len() as f64;
            correct += hits;
        }
        let stats = EpochStats {
            epoch,
            loss: total / indices.len() as f64,
            acc: correct as f64 / indices.len() as f64,
        };
        log::info!("epoch {epoch}: loss {:.5} acc {:.4}", stats.loss, stats.acc);
        history.epochs.push(stats);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let path = checkpoint_dir
                .expect("checked above")
                .join(format!("epoch_{:04}.pxn", epoch + 1));
            model.save(&path)?;
            history.checkpoints.push(path);
        }
    }
    Ok(history)
}

/// Per-sample predictions and losses over `data[indices]`, without
/// augmentation. The loss uses teacher masking like training does.
pub fn predict(model: &PaXNetModel, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<Vec<PredictionRecord>> {
    let batch_size = batch_size.max(1);
    let n = model.config.caps.n;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size) {
        for &i in chunk {
            if i >= data.len() {
                return Err(Error::Data(format!("sample index {i} outside dataset of {}", data.len())));
            }
        }
        let samples: Vec<Sample> = chunk
            .iter()
            .map(|&i| Sample::new(&data.images[i], &data.entries[i].id))
            .collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.entries[i].label.class()).collect();
        let g = model.graph(&samples, GradMode::None, Masking::Teacher(&labels))?;
        let probs = g.tape.value(g.probs).data();
        let v = g.tape.value(g.v);
        let recon = g.tape.value(g.recon);
        let input = g.tape.value(g.input);
        let d2 = model.config.caps.d2;
        let px = input.len() / chunk.len();
        for (k, &i) in chunk.iter().enumerate() {
            let vk = Tensor::new(&[n, d2], v.data()[k * n * d2..(k + 1) * n * d2].to_vec())?;
            let rk = Tensor::new(&[px], recon.data()[k * px..(k + 1) * px].to_vec())?;
            let xk = Tensor::new(&[px], input.data()[k * px..(k + 1) * px].to_vec())?;
            out.push(PredictionRecord {
                label: data.entries[i].label,
                region: data.entries[i].region,
                predicted: argmax(&probs[k * n..(k + 1) * n]),
                loss: crate::capsnet::paxnet_loss(&vk, &rk, &xk, labels[k], &model.config.loss)?,
            });
        }
    }
    Ok(out)
}

/// Metrics over `data[indices]`; an empty selection is a data error.
pub fn evaluate(model: &PaXNetModel, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Data("evaluation needs at least one sample".into()));
    }
    EvalReport::from_records(&predict(model, data, indices, 32)?)
}
