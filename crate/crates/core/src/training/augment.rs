use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::sample::bilinear_zero;
use crate::imgproc::GrayImage;

/// Random transform ranges. Each pair is a closed `[lo, hi]` interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Degrees, counter-clockwise as displayed.
    pub rotation: [f64; 2],
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub brightness: [f64; 2],
    /// Values above 1 zoom out.
    pub zoom: [f64; 2],
    /// Fractions of the image width / height.
    pub width_shift: [f64; 2],
    pub height_shift: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: [0.0, 90.0],
            horizontal_flip: true,
            vertical_flip: true,
            brightness: [0.7, 1.3],
            zoom: [0.9, 1.5],
            width_shift: [-0.2, 0.2],
            height_shift: [-0.2, 0.2],
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            rotation: [0.0, 0.0],
            horizontal_flip: false,
            vertical_flip: false,
            brightness: [1.0, 1.0],
            zoom: [1.0, 1.0],
            width_shift: [0.0, 0.0],
            height_shift: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation", self.rotation),
            ("brightness", self.brightness),
            ("zoom", self.zoom),
            ("width_shift", self.width_shift),
            ("height_shift", self.height_shift),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("augment {name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.brightness[0] < 0.0 || self.zoom[0] <= 0.0 {
            return Err(Error::Config("brightness must be >= 0 and zoom > 0".into()));
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub brightness: f64,
    pub zoom: f64,
    pub width_shift: f64,
    pub height_shift: f64,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation: 0.0,
        horizontal_flip: false,
        vertical_flip: false,
        brightness: 1.0,
        zoom: 1.0,
        width_shift: 0.0,
        height_shift: 0.0,
    };

    /// Always consumes seven draws so the stream position never depends on
    /// which transforms are enabled.
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let rotation = uniform(rng, cfg.rotation);
        let hf = rng.random::<f64>() < 0.5;
        let vf = rng.random::<f64>() < 0.5;
        Self {
            rotation,
            horizontal_flip: hf && cfg.horizontal_flip,
            vertical_flip: vf && cfg.vertical_flip,
            brightness: uniform(rng, cfg.brightness),
            zoom: uniform(rng, cfg.zoom),
            width_shift: uniform(rng, cfg.width_shift),
            height_shift: uniform(rng, cfg.height_shift),
        }
    }

    /// Rotation, flips, brightness, zoom and shift composed into one inverse
    /// map, sampled once with bilinear interpolation and zero fill.
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let (w, h) = (img.width(), img.height());
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (tx, ty) = (self.width_shift * w as f64, self.height_shift * h as f64);
        let (sin, cos) = self.rotation.to_radians().sin_cos();
        GrayImage::from_fn(w, h, |x, y| {
            let mut dx = (x as f64 - tx - cx) * self.zoom;
            let mut dy = (y as f64 - ty - cy) * self.zoom;
            if self.horizontal_flip {
                dx = -dx;
            }
            if self.vertical_flip {
                dy = -dy;
            }
            let sx = cx + dx * cos - dy * sin;
            let sy = cy + dx * sin + dy * cos;
            (bilinear_zero(img, sx, sy) * self.brightness).clamp(0.0, 1.0)
        })
    }
}

pub fn augment(img: &GrayImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> GrayImage {
    AugmentParams::sample(cfg, rng).apply(img)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one `(seed, index, epoch)` triple, independent of how
/// samples are scheduled across threads.
pub fn sample_rng(seed: u64, index: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ index) ^ epoch.rotate_left(32)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_quarter_turn_is_a_permutation() {
        // a b        b d
        // c d   ->   a c   (counter-clockwise)
        let img = GrayImage::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = AugmentParams {
            rotation: 90.0,
            ..AugmentParams::IDENTITY
        };
        let out = p.apply(&img);
        for (a, b) in out.data().iter().zip([0.2, 0.4, 0.1, 0.3]) {
            assert!((a - b).abs() < 1e-12, "{:?}", out.data());
        }
    }

    #[test]
    fn identity_config_is_identity() {
        let img = GrayImage::from_fn(7, 5, |x, y| (x * 5 + y) as f64 / 40.0);
        let mut rng = sample_rng(3, 1, 0);
        assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
    }

    #[test]
    fn brightness_clamps() {
        let img = GrayImage::filled(3, 3, 0.9);
        let p = AugmentParams {
            brightness: 1.3,
            ..AugmentParams::IDENTITY
        };
        assert!(p.apply(&img).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn flips_and_shift() {
        let img = GrayImage::from_fn(4, 3, |x, y| (y * 4 + x) as f64 / 12.0);
        let h = AugmentParams {
            horizontal_flip: true,
            ..AugmentParams::IDENTITY
        }
        .apply(&img);
        assert_eq!(h.get(0, 1), img.get(3, 1));
        let v = AugmentParams {
            vertical_flip: true,
            ..AugmentParams::IDENTITY
        }
        .apply(&img);
        assert_eq!(v.get(2, 0), img.get(2, 2));
        let s = AugmentParams {
            width_shift: 0.25,
            ..AugmentParams::IDENTITY
        }
        .apply(&img);
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(2, 1), img.get(1, 1));
    }

    #[test]
    fn zoom_out_shrinks_content() {
        let img = GrayImage::filled(9, 9, 0.5);
        let p = AugmentParams {
            zoom: 1.5,
            ..AugmentParams::IDENTITY
        };
        let out = p.apply(&img);
        assert_eq!(out.get(4, 4), 0.5);
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn per_sample_streams_differ() {
        let a: u64 = sample_rng(1, 2, 3).random();
        let b: u64 = sample_rng(1, 3, 2).random();
        let c: u64 = sample_rng(1, 2, 3).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
