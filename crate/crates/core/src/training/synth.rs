//! Synthetic stand-ins for dental radiographs: single teeth with optional
//! carious lesions, rows of teeth, and two-jaw panoramic images.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::ga_isolate::{JawType, LineGenome};
use crate::imgproc::{BinaryImage, GrayImage};
use crate::jawsep::Roi;

/// Lesion area, as a fraction of tooth area, from which a lesion is severe.
pub const SEVERE_AREA_FRACTION: f64 = 0.04;

/// Smallest lesion blob, in pixels, so that mild lesions stay visible on
/// small crops.
pub const MIN_BLOB_PIXELS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side of the square tooth images.
    pub size: usize,
    /// Standard deviation of the additive texture noise.
    pub noise: f64,
    /// Probability that a carious tooth is drawn with a large lesion.
    pub severe_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            noise: 0.03,
            severe_share: 0.6,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn add_noise(img: &mut GrayImage, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = img.get(x, y) + n.sample(rng);
            img.set(x, y, v.clamp(0.0, 1.0));
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTooth {
    pub image: GrayImage,
    pub tooth: BinaryImage,
    pub lesion: Option<BinaryImage>,
    pub label: Label,
}

/// Outline of one tooth in unit coordinates: a crown with rounded top
/// corners over a root tapering to the apex.
struct Outline {
    cx: f64,
    top: f64,
    neck: f64,
    bottom: f64,
    crown: f64,
    apex: f64,
    corner: f64,
}

impl Outline {
    fn half_width(&self, v: f64) -> Option<f64> {
        if v < self.top || v > self.bottom {
            return None;
        }
        Some(if v <= self.neck {
            let d = v - self.top;
            if d < self.corner {
                let r = self.corner;
                self.crown - r + (r * r - (r - d) * (r - d)).sqrt()
            } else {
                self.crown
            }
        } else {
            let t = (v - self.neck) / (self.bottom - self.neck);
            self.crown * (1.0 - t) + self.apex * t
        })
    }

    /// Signed distance to the outline in pixels, positive inside.
    fn inside(&self, u: f64, v: f64, s: f64) -> f64 {
        match self.half_width(v) {
            None => -1.0,
            Some(hw) => ((hw - (u - self.cx).abs()) * s)
                .min((v - self.top) * s)
                .min((self.bottom - v) * s),
        }
    }
}

/// Draws one tooth. Carious teeth get one to three dark elliptical lesions on
/// the crown's top or side edges; the severity follows the lesion area.
pub fn synth_tooth(cfg: &SynthConfig, caries: bool, rng: &mut impl Rng) -> SynthTooth {
    let size = cfg.size;
    let s = size as f64;
    let o = Outline {
        cx: 0.5 + uniform(rng, -0.04, 0.04),
        top: uniform(rng, 0.08, 0.14),
        neck: uniform(rng, 0.45, 0.52),
        bottom: uniform(rng, 0.88, 0.95),
        crown: uniform(rng, 0.26, 0.32),
        apex: uniform(rng, 0.08, 0.13),
        corner: 0.09,
    };
    let crown_val = uniform(rng, 0.75, 0.9);
    let root_val = crown_val - uniform(rng, 0.08, 0.15);
    let bg = uniform(rng, 0.04, 0.12);
    let shadow = rng.random::<f64>() < 0.5;

    let at = |x: usize, y: usize| ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
    let mut tooth = BinaryImage::new(size, size);
    let mut image = GrayImage::from_fn(size, size, |x, y| {
        let (u, v) = at(x, y);
        let d = o.inside(u, v, s);
        let alpha = (d + 0.5).clamp(0.0, 1.0);
        let t = ((v - o.neck + 0.03) / 0.06).clamp(0.0, 1.0);
        let mut val = crown_val * (1.0 - t) + root_val * t;
        if shadow && v > o.neck - 0.05 && (u - o.cx).abs() < 0.035 {
            val -= 0.25;
        }
        bg + alpha * (val - bg)
    });
    for y in 0..size {
        for x in 0..size {
            let (u, v) = at(x, y);
            tooth.set(x, y, o.inside(u, v, s) > 0.0);
        }
    }

    let mut lesion = None;
    let mut label = Label::Healthy;
    if caries {
        let area = tooth.count() as f64;
        let severe = rng.random::<f64>() < cfg.severe_share;
        let frac = if severe {
            uniform(rng, 0.06, 0.12)
        } else {
            uniform(rng, 0.012, 0.028)
        };
        let max_blobs = ((frac * area / MIN_BLOB_PIXELS) as usize).clamp(1, 3);
        let blobs = rng.random_range(1..=3usize).min(max_blobs);
        let mut mask = BinaryImage::new(size, size);
        for _ in 0..blobs {
            let blob_area = (frac * area / blobs as f64).max(MIN_BLOB_PIXELS);
            let aspect = uniform(rng, 0.7, 1.4);
            let ry = (1.6 * blob_area / (PI * aspect)).sqrt().max(0.8);
            let rx = aspect * ry;
            let (u0, v0) = match rng.random_range(0..4u8) {
                0 | 1 => (
                    o.cx + uniform(rng, -0.6, 0.6) * (o.crown - o.corner),
                    o.top + 0.3 * ry / s,
                ),
                side => {
                    let v0 = uniform(rng, o.top + o.corner, o.neck - 0.05);
                    let hw = o.half_width(v0).unwrap_or(o.crown);
                    let sign = if side == 2 { -1.0 } else { 1.0 };
                    (o.cx + sign * (hw - 0.3 * rx / s), v0)
                }
            };
            let (px, py) = (u0 * s, v0 * s);
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - px) / rx;
                    let dy = (y as f64 + 0.5 - py) / ry;
                    if dx * dx + dy * dy <= 1.0 && tooth.get(x, y) {
                        mask.set(x, y, true);
                    }
                }
            }
        }
        if mask.count() == 0 {
            // Degenerate draw: mark the crown's top-centre pixel.
            let x = ((o.cx * s) as usize).min(size - 1);
            let y = (0..size).find(|&y| tooth.get(x, y)).unwrap_or(size / 4);
            mask.set(x, y, true);
        }
        let darken = uniform(rng, 0.2, 0.35);
        for y in 0..size {
            for x in 0..size {
                if mask.get(x, y) {
                    image.set(x, y, image.get(x, y) * darken);
                }
            }
        }
        label = if mask.count() as f64 >= SEVERE_AREA_FRACTION * area {
            Label::Severe
        } else {
            Label::Mild
        };
        lesion = Some(mask);
    }
    add_noise(&mut image, cfg.noise, rng);
    SynthTooth {
        image,
        tooth,
        lesion,
        label,
    }
}

/// `n` teeth of which exactly `round(n * caries_fraction)` are carious, in
/// shuffled order, with random jaw and region tags. Entry paths point to
/// where [`Dataset::write`] puts the files.
pub fn synth_dataset(n: usize, caries_fraction: f64, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::param(format!("synthetic corpus needs n >= 10, got {n}")));
    }
    if !(0.0..=1.0).contains(&caries_fraction) {
        return Err(Error::param(format!("caries fraction {caries_fraction} outside [0, 1]")));
    }
    if cfg.size < 8 {
        return Err(Error::param("synthetic tooth images must be at least 8 pixels"));
    }
    let n_caries = (n as f64 * caries_fraction).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < n_caries).collect();
    flags.shuffle(rng);
    let mut entries = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (i, &caries) in flags.iter().enumerate() {
        let t = synth_tooth(cfg, caries, rng);
        let jaw = if rng.random::<bool>() {
            JawType::Maxilla
        } else {
            JawType::Mandible
        };
        let base = if jaw == JawType::Maxilla { 1 } else { 4 };
        let id = format!("tooth_{i:04}");
        entries.push(ManifestEntry {
            image: PathBuf::from("images").join(format!("{id}.png")),
            mask: t.lesion.as_ref().map(|_| PathBuf::from("masks").join(format!("{id}.png"))),
            id,
            label: t.label,
            jaw,
            region: base + rng.random_range(0..3u8),
        });
        images.push(t.image);
        masks.push(t.lesion);
    }
    Dataset::new(entries, images, masks)
}

/// Layout and shading of a row of teeth separated by dark, slightly tilted gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToothRowConfig {
    pub width: usize,
    pub height: usize,
    pub teeth: usize,
    pub margin: [f64; 2],
    pub gap_width: [f64; 2],
    /// Maximum gap tilt in degrees.
    pub max_tilt: f64,
    pub tooth_value: [f64; 2],
    pub gap_value: f64,
    pub background: f64,
    pub noise: f64,
}

impl Default for ToothRowConfig {
    fn default() -> Self {
        Self {
            width: 268,
            height: 60,
            teeth: 8,
            margin: [6.0, 10.0],
            gap_width: [3.5, 4.5],
            max_tilt: 4.0,
            tooth_value: [0.6, 0.85],
            gap_value: 0.06,
            background: 0.05,
            noise: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthToothRow {
    pub image: GrayImage,
    /// Centre line of every gap, in the row image's coordinates.
    pub gaps: Vec<LineGenome>,
}

struct RowLayout {
    left: f64,
    right: f64,
    gaps: Vec<(LineGenome, f64)>,
    values: Vec<f64>,
}

impl RowLayout {
    fn new(cfg: &ToothRowConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.teeth < 2 {
            return Err(Error::param("a tooth row needs at least two teeth"));
        }
        let left = uniform(rng, cfg.margin[0], cfg.margin[1]);
        let right = cfg.width as f64 - uniform(rng, cfg.margin[0], cfg.margin[1]);
        let gw: Vec<f64> = (1..cfg.teeth).map(|_| uniform(rng, cfg.gap_width[0], cfg.gap_width[1])).collect();
        let weights: Vec<f64> = (0..cfg.teeth).map(|_| uniform(rng, 0.88, 1.12)).collect();
        let room = right - left - gw.iter().sum::<f64>();
        if room < 4.0 * cfg.teeth as f64 {
            return Err(Error::param(format!("{} columns are too few for {} teeth", cfg.width, cfg.teeth)));
        }
        let wsum: f64 = weights.iter().sum();
        let mut x = left;
        let mut gaps = Vec::with_capacity(cfg.teeth - 1);
        for k in 0..cfg.teeth - 1 {
            x += room * weights[k] / wsum;
            let tilt = uniform(rng, -cfg.max_tilt, cfg.max_tilt);
            gaps.push((LineGenome::new(x + gw[k] / 2.0 - 0.5, tilt), gw[k]));
            x += gw[k];
        }
        let values = (0..cfg.teeth)
            .map(|_| uniform(rng, cfg.tooth_value[0], cfg.tooth_value[1]))
            .collect();
        Ok(Self {
            left,
            right,
            gaps,
            values,
        })
    }

    /// Intensity at `(x, y)` where `y` is measured in a band `height` rows tall.
    fn value(&self, cfg: &ToothRowConfig, x: usize, y: f64, height: usize) -> f64 {
        let xf = x as f64;
        if xf < self.left || xf >= self.right {
            return cfg.background;
        }
        let mut tooth = 0;
        for (g, w) in &self.gaps {
            let c = g.x_at(y, height);
            if (xf - c).abs() < w / 2.0 {
                return cfg.gap_value;
            }
            if xf > c {
                tooth += 1;
            }
        }
        self.values[tooth]
    }
}

/// One jaw's row of teeth, e.g. for isolation tests.
pub fn synth_tooth_row(cfg: &ToothRowConfig, rng: &mut impl Rng) -> Result<SynthToothRow> {
    let layout = RowLayout::new(cfg, rng)?;
    let h = cfg.height;
    let mut image = GrayImage::from_fn(cfg.width, h, |x, y| {
        let shade = 1.0 - 0.1 * y as f64 / h as f64;
        let v = layout.value(cfg, x, y as f64, h);
        if v == cfg.gap_value || v == cfg.background {
            v
        } else {
            v * shade
        }
    });
    add_noise(&mut image, cfg.noise, rng);
    Ok(SynthToothRow {
        image,
        gaps: layout.gaps.iter().map(|(g, _)| *g).collect(),
    })
}

/// Two rows of teeth meeting at a curved dark band (the gap between the
/// jaws).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JawPairConfig {
    pub width: usize,
    /// Mean height of each tooth row.
    pub row_height: usize,
    pub teeth: usize,
    pub band_thickness: f64,
    pub band_value: f64,
    pub gap_value: f64,
    /// Amplitude range of the band's sinusoidal wave, in pixels.
    pub amplitude: [f64; 2],
    pub period: [f64; 2],
    /// Range of the band's parabolic bow, in pixels.
    pub bow: [f64; 2],
    pub noise: f64,
}

impl Default for JawPairConfig {
    fn default() -> Self {
        Self {
            width: 256,
            row_height: 56,
            teeth: 7,
            band_thickness: 9.0,
            band_value: 0.1,
            gap_value: 0.18,
            amplitude: [5.0, 10.0],
            period: [110.0, 200.0],
            bow: [-8.0, 8.0],
            noise: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthJawPair {
    pub image: GrayImage,
    /// Row of the band's centre line at every column.
    pub band_center: Vec<f64>,
    /// Gap centre lines of the upper row, in a frame of its first
    /// `row_height` rows.
    pub upper_gaps: Vec<LineGenome>,
    /// Same for the lower row, in a frame of the last `row_height` rows.
    pub lower_gaps: Vec<LineGenome>,
}

impl JawPairConfig {
    fn height(&self) -> usize {
        2 * self.row_height + self.band_thickness.ceil() as usize
    }
}

fn draw_jaw_pair(cfg: &JawPairConfig, rng: &mut impl Rng) -> Result<(SynthJawPair, impl Fn(usize, usize) -> f64)> {
    let (w, h) = (cfg.width, cfg.height());
    let amp = uniform(rng, cfg.amplitude[0], cfg.amplitude[1]);
    let period = uniform(rng, cfg.period[0], cfg.period[1]);
    let phase = uniform(rng, 0.0, 2.0 * PI);
    let bow = uniform(rng, cfg.bow[0], cfg.bow[1]);
    let mid = h as f64 / 2.0;
    let center: Vec<f64> = (0..w)
        .map(|x| {
            let t = (x as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
            mid + amp * (2.0 * PI * x as f64 / period + phase).sin() + bow * (t * t - 1.0 / 3.0)
        })
        .collect();
    let row_cfg = ToothRowConfig {
        width: w,
        height: cfg.row_height,
        teeth: cfg.teeth,
        margin: [0.0, 0.0],
        gap_value: cfg.gap_value,
        ..Default::default()
    };
    let upper = RowLayout::new(&row_cfg, rng)?;
    let lower = RowLayout::new(&row_cfg, rng)?;
    let pair = SynthJawPair {
        image: GrayImage::new(0, 0),
        band_center: center.clone(),
        upper_gaps: upper.gaps.iter().map(|(g, _)| *g).collect(),
        lower_gaps: lower.gaps.iter().map(|(g, _)| *g).collect(),
    };
    let half = cfg.band_thickness / 2.0;
    let (band_value, rh) = (cfg.band_value, cfg.row_height);
    let shade = move |x: usize, y: usize| {
        let yf = y as f64;
        let c = center[x];
        if (yf - c).abs() < half {
            band_value
        } else if yf < c {
            upper.value(&row_cfg, x, yf, rh)
        } else {
            lower.value(&row_cfg, x, yf - (h - rh) as f64, rh)
        }
    };
    Ok((pair, shade))
}

/// Two tooth rows separated by a wavy dark band, `width x (2 row_height +
/// band)` pixels.
pub fn synth_jaw_pair(cfg: &JawPairConfig, rng: &mut impl Rng) -> Result<SynthJawPair> {
    let (mut pair, shade) = draw_jaw_pair(cfg, rng)?;
    let mut image = GrayImage::from_fn(cfg.width, cfg.height(), shade);
    add_noise(&mut image, cfg.noise, rng);
    pair.image = image;
    Ok(pair)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanoramicConfig {
    pub jaws: JawPairConfig,
    /// Dark columns either side of the jaws.
    pub side_margin: usize,
    /// Bright bone above the maxilla and below the mandible.
    pub bone_rows: usize,
    /// Soft tissue between bone and teeth.
    pub tissue_rows: usize,
    pub bone_value: f64,
    pub tissue_value: f64,
    pub background: f64,
}

impl Default for PanoramicConfig {
    fn default() -> Self {
        Self {
            jaws: JawPairConfig {
                width: 360,
                row_height: 64,
                teeth: 8,
                amplitude: [2.0, 5.0],
                period: [200.0, 320.0],
                ..Default::default()
            },
            side_margin: 30,
            bone_rows: 30,
            tissue_rows: 8,
            bone_value: 0.85,
            tissue_value: 0.25,
            background: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthPanoramic {
    pub image: GrayImage,
    /// Bounds of the tooth-bearing area.
    pub roi: Roi,
    pub jaws: SynthJawPair,
}

/// Jaw pair framed by bone, soft tissue and dark side margins.
pub fn synth_panoramic(cfg: &PanoramicConfig, rng: &mut impl Rng) -> Result<SynthPanoramic> {
    let jc = &cfg.jaws;
    let (mut pair, shade) = draw_jaw_pair(jc, rng)?;
    let top = cfg.bone_rows + cfg.tissue_rows;
    let jh = jc.height();
    let (w, h) = (jc.width + 2 * cfg.side_margin, jh + 2 * top);
    let mut image = GrayImage::from_fn(w, h, |x, y| {
        if x < cfg.side_margin || x >= cfg.side_margin + jc.width {
            cfg.background
        } else if y < cfg.bone_rows || y >= h - cfg.bone_rows {
            cfg.bone_value
        } else if y < top || y >= top + jh {
            cfg.tissue_value
        } else {
            shade(x - cfg.side_margin, y - top)
        }
    });
    add_noise(&mut image, jc.noise, rng);
    pair.image = image.crop(cfg.side_margin, top, cfg.side_margin + jc.width, top + jh)?;
    Ok(SynthPanoramic {
        image,
        roi: Roi {
            left: cfg.side_margin,
            top: cfg.bone_rows,
            right: cfg.side_margin + jc.width,
            bottom: h - cfg.bone_rows,
        },
        jaws: pair,
    })
}
