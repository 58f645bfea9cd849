use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{Error, Result};

/// `Horizontal` averages each row (one value per row), `Vertical` each column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionProfile {
    pub axis: Axis,
    pub values: Vec<f64>,
}

impl ProjectionProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        Self {
            axis: self.axis,
            values,
        }
    }

    /// Index of the smallest value, first occurrence on ties.
    pub fn argmin(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn integral_projection(img: &GrayImage, axis: Axis) -> Result<ProjectionProfile> {
    img.ensure_non_empty()?;
    let (w, h) = (img.width(), img.height());
    let values = match axis {
        Axis::Horizontal => (0..h)
            .map(|y| img.row(y).iter().sum::<f64>() / w as f64)
            .collect(),
        Axis::Vertical => {
            let mut sums = vec![0.0; w];
            for y in 0..h {
                for (s, v) in sums.iter_mut().zip(img.row(y)) {
                    *s += v;
                }
            }
            sums.into_iter().map(|s| s / h as f64).collect()
        }
    };
    Ok(ProjectionProfile { axis, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlopeDirection {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlopeConfig {
    /// Moving-average span on each side of the candidate index.
    pub smoothing: usize,
    /// Fraction of the profile's dynamic range the slope must exceed.
    pub threshold: f64,
}

impl Default for SlopeConfig {
    fn default() -> Self {
        Self {
            smoothing: 5,
            threshold: 0.2,
        }
    }
}

/// Finds the first significant slope of `profile` in `direction`.
///
/// The slope at `i` is `mean(p[i..i+w]) - mean(p[i-w..i])` with windows
/// clamped to the profile. The first run of indices whose signed slope exceeds
/// `threshold * (max - min)` is located and the index of its steepest point is
/// returned.
pub fn significant_slope(
    profile: &ProjectionProfile,
    direction: SlopeDirection,
    cfg: &SlopeConfig,
) -> Result<usize> {
    let n = profile.len();
    let w = cfg.smoothing;
    if w == 0 {
        return Err(Error::param("smoothing window must be >= 1"));
    }
    if n <= w {
        return Err(Error::param(format!(
            "profile of length {n} is not longer than smoothing window {w}"
        )));
    }
    let p = &profile.values;
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let limit = cfg.threshold * (max - min);
    let sign = match direction {
        SlopeDirection::Positive => 1.0,
        SlopeDirection::Negative => -1.0,
    };

    let mut prefix = vec![0.0; n + 1];
    for (i, v) in p.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let mean = |a: usize, b: usize| (prefix[b] - prefix[a]) / (b - a) as f64;
    let slope = |i: usize| sign * (mean(i, (i + w).min(n)) - mean(i.saturating_sub(w), i));

    let mut run: Option<(usize, f64)> = None;
    for i in 1..n {
        let s = slope(i);
        if s > limit && max > min {
            match run {
                Some((_, best)) if s <= best => {}
                _ => run = Some((i, s)),
            }
        } else if run.is_some() {
            break;
        }
    }
    run.map(|(i, _)| i).ok_or_else(|| {
        Error::NotFound(format!(
            "no {} slope above {:.0}% of dynamic range",
            match direction {
                SlopeDirection::Positive => "positive",
                SlopeDirection::Negative => "negative",
            },
            cfg.threshold * 100.0
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn profile(values: Vec<f64>) -> ProjectionProfile {
        ProjectionProfile {
            axis: Axis::Horizontal,
            values,
        }
    }

    #[test]
    fn uniform_projection() {
        let img = GrayImage::filled(7, 5, 0.5);
        let p = integral_projection(&img, Axis::Horizontal).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.values.iter().all(|&v| v == 0.5));
        assert_eq!(integral_projection(&img, Axis::Vertical).unwrap().len(), 7);
        assert!(integral_projection(&GrayImage::new(0, 0), Axis::Vertical).is_err());
    }

    #[test]
    fn dark_row_is_unique_minimum() {
        let img = GrayImage::from_fn(9, 12, |_, y| if y == 4 { 0.0 } else { 1.0 });
        let p = integral_projection(&img, Axis::Horizontal).unwrap();
        assert_eq!(p.argmin(), Some(4));
        assert_eq!(p.values[4], 0.0);
        assert_eq!(p.values.iter().filter(|&&v| v == 0.0).count(), 1);
    }

    #[test]
    fn projection_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = GrayImage::from_fn(16, 16, |_, _| rng.random::<f64>());
        let p = integral_projection(&img, Axis::Horizontal).unwrap();
        for y in 0..16 {
            let mut s = 0.0;
            for x in 0..16 {
                s += img.get(x, y);
            }
            assert_eq!(p.values[y], s / 16.0);
        }
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = GrayImage::from_fn(13, 8, |_, _| rng.random::<f64>());
        let a = integral_projection(&img, Axis::Vertical).unwrap();
        let b = integral_projection(&img.transpose(), Axis::Horizontal).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn slope_on_step() {
        let p = profile(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let cfg = SlopeConfig {
            smoothing: 1,
            threshold: 0.5,
        };
        assert_eq!(significant_slope(&p, SlopeDirection::Positive, &cfg).unwrap(), 3);
        assert!(matches!(
            significant_slope(&p, SlopeDirection::Negative, &cfg),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn flat_profile_has_no_slope() {
        let p = profile(vec![0.3; 20]);
        assert!(matches!(
            significant_slope(&p, SlopeDirection::Positive, &SlopeConfig::default()),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn short_profile_rejected() {
        let p = profile(vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            significant_slope(&p, SlopeDirection::Positive, &SlopeConfig::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn ramp_located_within_window() {
        // Smooth rise centred at 40 over a noisy baseline with a later bump.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..120)
            .map(|i| {
                let x = i as f64;
                0.2 + 0.6 / (1.0 + (-(x - 40.0) / 1.5).exp())
                    + 0.1 * (-(x - 90.0).powi(2) / 20.0).exp()
                    + 0.01 * rng.random::<f64>()
            })
            .collect();
        let cfg = SlopeConfig::default();
        let i = significant_slope(&profile(values), SlopeDirection::Positive, &cfg).unwrap();
        assert!((i as isize - 40).unsigned_abs() <= cfg.smoothing, "found {i}");
    }
}
