use serde::{Deserialize, Serialize};

use super::augment::{augment, sample_rng};
use super::data::Dataset;
use super::trainer::{train_step, TrainConfig};
use crate::autodiff::Adam;
use crate::capsnet::{PaXNetModel, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrRangeConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub epochs: usize,
    /// Exponential moving average factor for the loss.
    pub smoothing: f64,
    /// Stop once the smoothed loss exceeds this multiple of its minimum.
    pub divergence_factor: f64,
}

impl Default for LrRangeConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-7,
            lr_max: 1.0,
            epochs: 2,
            smoothing: 0.9,
            divergence_factor: 4.0,
        }
    }
}

impl LrRangeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min.is_finite() && self.lr_max.is_finite()) {
            return Err(Error::param("learning-rate bounds must be positive and finite"));
        }
        if self.lr_min >= self.lr_max {
            return Err(Error::param(format!(
                "lr_min {} must be below lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::param("smoothing must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::param("range test needs at least one epoch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub lr: f64,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrCurve {
    pub points: Vec<LrPoint>,
    /// True when the sweep stopped early on a non-finite or exploding loss.
    pub truncated: bool,
    pub suggested_lr: f64,
    /// Index of the smoothed-loss minimum.
    pub min_index: usize,
}

impl LrCurve {
    /// The minimum lies strictly inside the curve and the loss rises after it.
    pub fn has_interior_minimum(&self) -> bool {
        let n = self.points.len();
        n >= 3 && self.min_index > 0 && self.min_index < n - 1 && {
            let m = self.points[self.min_index].smoothed;
            self.points[0].smoothed > m && self.points[n - 1].smoothed > m
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Runs `step(lr)` for `steps` learning rates growing geometrically from
/// `lr_min` to `lr_max`. The loss is smoothed with a bias-corrected moving
/// average; a non-finite loss or one beyond `divergence_factor` times the
/// best smoothed value ends the sweep. The suggestion is the learning rate
/// at the smoothed minimum divided by ten, kept within the bounds.
pub fn lr_sweep(cfg: &LrRangeConfig, steps: usize, mut step: impl FnMut(f64) -> Result<f64>) -> Result<LrCurve> {
    cfg.validate()?;
    if steps < 2 {
        return Err(Error::param("range test needs at least two steps"));
    }
    let ratio = cfg.lr_max / cfg.lr_min;
    let mut points = Vec::with_capacity(steps);
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut min_index = 0;
    let mut truncated = false;
    for i in 0..steps {
        let lr = cfg.lr_min * ratio.powf(i as f64 / (steps - 1) as f64);
        let loss = match step(lr) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::Numeric { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        avg = cfg.smoothing * avg + (1.0 - cfg.smoothing) * loss;
        let smoothed = avg / (1.0 - cfg.smoothing.powi(i as i32 + 1));
        points.push(LrPoint { lr, loss, smoothed });
        if smoothed < best {
            best = smoothed;
            min_index = points.len() - 1;
        }
        if smoothed > cfg.divergence_factor * best {
            truncated = true;
            break;
        }
    }
    if points.is_empty() {
        return Err(Error::Numeric {
            epoch: 0,
            batch: 0,
            lr: cfg.lr_min,
            reason: "loss diverged at the first step of the range test".into(),
        });
    }
    let suggested_lr = (points[min_index].lr / 10.0).clamp(cfg.lr_min, cfg.lr_max);
    Ok(LrCurve {
        points,
        truncated,
        suggested_lr,
        min_index,
    })
}

/// Learning-rate range test on a copy of `model`: one Adam step per batch
/// of augmented `data[indices]`, over `cfg.epochs` epochs.
pub fn lr_range_test(
    model: &PaXNetModel,
    data: &Dataset,
    indices: &[usize],
    train_cfg: &TrainConfig,
    cfg: &LrRangeConfig,
) -> Result<LrCurve> {
    train_cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::Data("range test needs training samples".into()));
    }
    let bs = train_cfg.batch_size;
    let per_epoch = indices.len().div_ceil(bs);
    let steps = per_epoch * cfg.epochs;
    let mut model = model.clone();
    let mut adam = Adam::new(train_cfg.adam);
    let mut k = 0usize;
    lr_sweep(cfg, steps, |lr| {
        let (epoch, b) = (k / per_epoch, k % per_epoch);
        k += 1;
        let order = &indices[b * bs..((b + 1) * bs).min(indices.len())];
        let images: Vec<_> = order
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut rng = sample_rng(train_cfg.seed, (b * bs + j) as u64, epoch as u64);
                augment(&data.images[i], &train_cfg.augment, &mut rng)
            })
            .collect();
        let samples: Vec<Sample> = order
            .iter()
            .zip(&images)
            .map(|(&i, img)| Sample::new(img, &data.entries[i].id))
            .collect();
        let labels: Vec<usize> = order.iter().map(|&i| data.entries[i].label.class()).collect();
        train_step(&mut model, &mut adam, &samples, &labels, lr, (epoch, b)).map(|(l, _)| l)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Gradient descent on f(x) = x^2 / 2 from x = 1 for a fixed budget: the
    // remaining loss shrinks with lr up to 1 and explodes past 2.
    fn quadratic(lr: f64) -> f64 {
        let mut x: f64 = 1.0;
        for _ in 0..5 {
            x -= lr * x;
        }
        0.5 * x * x
    }

    #[test]
    fn convex_toy_curve() {
        let cfg = LrRangeConfig {
            lr_min: 1e-3,
            lr_max: 10.0,
            smoothing: 0.0,
            divergence_factor: 1e9,
            ..Default::default()
        };
        let c = lr_sweep(&cfg, 60, |lr| Ok(quadratic(lr))).unwrap();
        assert!(c.has_interior_minimum());
        let lr_at_min = c.points[c.min_index].lr;
        assert!((0.5..2.0).contains(&lr_at_min), "{lr_at_min}");
        assert!(c.suggested_lr.is_finite() && (cfg.lr_min..=cfg.lr_max).contains(&c.suggested_lr));
        assert!((c.suggested_lr - lr_at_min / 10.0).abs() < 1e-15);
    }

    #[test]
    fn equal_bounds_rejected() {
        let cfg = LrRangeConfig {
            lr_min: 1e-3,
            lr_max: 1e-3,
            ..Default::default()
        };
        assert!(matches!(lr_sweep(&cfg, 10, |_| Ok(1.0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn nan_truncates() {
        let cfg = LrRangeConfig {
            lr_min: 1e-3,
            lr_max: 1.0,
            ..Default::default()
        };
        let c = lr_sweep(&cfg, 20, |lr| Ok(if lr > 0.1 { f64::NAN } else { 1.0 - lr })).unwrap();
        assert!(c.truncated);
        assert!(c.points.iter().all(|p| p.lr <= 0.1));
    }
}
