//! Panoramic image to single-tooth crops: preprocessing, ROI, jaw separation
//! with the snake, and GA isolation of each jaw.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ga_isolate::{isolate_teeth, line_cost_in, Isolation, IsolationConfig, JawType, LineGenome};
use crate::imgproc::{bilateral_filter, gaussian_blur, io, vertical_edge_filter, GrayImage, SlopeConfig};
use crate::jawsep::{extract_roi_with, snake_separator, split_jaws, JawSplit, Roi, SeparationPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub blur_sigma: f64,
    pub bilateral_sigma_space: f64,
    pub bilateral_sigma_range: f64,
    pub slope: SlopeConfig,
    pub snake_step: usize,
    pub maxilla: IsolationConfig,
    pub mandible: IsolationConfig,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            bilateral_sigma_space: 2.0,
            bilateral_sigma_range: 0.2,
            slope: SlopeConfig::default(),
            snake_step: 8,
            maxilla: IsolationConfig::for_jaw(JawType::Maxilla),
            mandible: IsolationConfig::for_jaw(JawType::Mandible),
        }
    }
}

impl ExtractConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.maxilla.ga.rng_seed = seed;
        self.mandible.ga.rng_seed = seed.wrapping_add(1);
        self
    }

    fn isolation(&self, jaw: JawType) -> &IsolationConfig {
        match jaw {
            JawType::Maxilla => &self.maxilla,
            JawType::Mandible => &self.mandible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineReport {
    pub base_x: f64,
    pub angle: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToothReport {
    pub file: Option<PathBuf>,
    pub jaw: JawType,
    pub region: u8,
    /// Corners in the coordinates of the jaw image.
    pub bounds: [(f64, f64); 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JawReport {
    pub jaw: JawType,
    pub width: usize,
    pub height: usize,
    pub generations: usize,
    pub lines: Vec<LineReport>,
    pub teeth: Vec<ToothReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub roi: Option<Roi>,
    pub separation_cost: Option<f64>,
    pub jaws: Vec<JawReport>,
}

pub struct JawResult {
    pub jaw: JawType,
    pub image: GrayImage,
    pub isolation: Isolation,
}

pub struct Extraction {
    pub roi: Option<Roi>,
    pub path: Option<SeparationPath>,
    pub split: Option<JawSplit>,
    pub jaws: Vec<JawResult>,
}

fn jaw_report(r: &JawResult, cfg: &IsolationConfig) -> Result<JawReport> {
    let lines = r
        .isolation
        .lines
        .iter()
        .map(|g| {
            Ok(LineReport {
                base_x: g.base_x,
                angle: g.angle,
                cost: line_cost_in(&r.image, g, cfg.removal.cost_band)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(JawReport {
        jaw: r.jaw,
        width: r.image.width(),
        height: r.image.height(),
        generations: r.isolation.evolution.history.len(),
        lines,
        teeth: r
            .isolation
            .crops
            .iter()
            .map(|c| ToothReport {
                file: None,
                jaw: c.jaw,
                region: c.region.id(),
                bounds: c.source_bounds,
            })
            .collect(),
    })
}

impl Extraction {
    pub fn report(&self, cfg: &ExtractConfig) -> Result<ExtractReport> {
        let jaws = self
            .jaws
            .iter()
            .map(|j| jaw_report(j, cfg.isolation(j.jaw)))
            .collect::<Result<_>>()?;
        let separation_cost = match (&self.path, &self.roi) {
            (Some(p), Some(_)) => self.split.as_ref().map(|s| p.cost(&s.reassemble())),
            _ => None,
        };
        Ok(ExtractReport {
            roi: self.roi,
            separation_cost,
            jaws,
        })
    }

    /// Writes `tooth_XX.png` per crop and `report.json`; returns the report.
    pub fn write(&self, cfg: &ExtractConfig, dir: impl AsRef<Path>) -> Result<ExtractReport> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut report = self.report(cfg)?;
        let mut k = 0;
        for (jr, j) in report.jaws.iter_mut().zip(&self.jaws) {
            for (t, crop) in jr.teeth.iter_mut().zip(&j.isolation.crops) {
                let name = PathBuf::from(format!("tooth_{k:02}_{}{}.png", jaw_tag(j.jaw), crop.region.id()));
                io::save(&crop.image, dir.join(&name))?;
                t.file = Some(name);
                k += 1;
            }
        }
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(dir.join("report.json"), text)?;
        Ok(report)
    }

    /// Stage images: ROI box on the input, separation path on the ROI and the
    /// surviving lines on each jaw.
    pub fn write_overlays(&self, input: &GrayImage, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        if let Some(roi) = self.roi {
            let mut rgb = gray_rgb(input);
            let w = input.width();
            for x in roi.left..roi.right {
                rgb[roi.top * w + x] = RED;
                rgb[(roi.bottom - 1) * w + x] = RED;
            }
            for y in roi.top..roi.bottom {
                rgb[y * w + roi.left] = RED;
                rgb[y * w + roi.right - 1] = RED;
            }
            let p = dir.join("stage1_roi.png");
            io::save_rgb_png(w, input.height(), &rgb, &p)?;
            out.push(p);
        }
        if let (Some(path), Some(split)) = (&self.path, &self.split) {
            let img = split.reassemble();
            let mut rgb = gray_rgb(&img);
            for (x, y) in path.points() {
                rgb[y * img.width() + x] = RED;
            }
            let p = dir.join("stage2_separation.png");
            io::save_rgb_png(img.width(), img.height(), &rgb, &p)?;
            out.push(p);
        }
        for j in &self.jaws {
            let (w, h) = (j.image.width(), j.image.height());
            let mut rgb = gray_rgb(&j.image);
            for g in &j.isolation.lines {
                draw_line(&mut rgb, w, h, g);
            }
            let p = dir.join(format!("stage3_{}_lines.png", jaw_tag(j.jaw)));
            io::save_rgb_png(w, h, &rgb, &p)?;
            out.push(p);
        }
        Ok(out)
    }
}

const RED: [f64; 3] = [1.0, 0.1, 0.1];

fn jaw_tag(jaw: JawType) -> &'static str {
    match jaw {
        JawType::Maxilla => "maxilla",
        JawType::Mandible => "mandible",
    }
}

fn gray_rgb(img: &GrayImage) -> Vec<[f64; 3]> {
    img.data().iter().map(|&v| [v, v, v]).collect()
}

fn draw_line(rgb: &mut [[f64; 3]], w: usize, h: usize, g: &LineGenome) {
    for (x, y) in g.rasterize(w, h, 0..h) {
        rgb[y * w + x] = RED;
    }
}

/// Blurred intensity and bilateral-smoothed vertical edges.
pub fn preprocess(img: &GrayImage, cfg: &ExtractConfig) -> Result<(GrayImage, GrayImage)> {
    let blurred = gaussian_blur(img, cfg.blur_sigma)?;
    let edges = vertical_edge_filter(img)?;
    let edges = bilateral_filter(&edges, cfg.bilateral_sigma_space, cfg.bilateral_sigma_range)?;
    Ok((blurred, edges))
}

/// Full extraction from a panoramic image.
pub fn extract_teeth(img: &GrayImage, cfg: &ExtractConfig) -> Result<Extraction> {
    let (blurred, edges) = preprocess(img, cfg)?;
    let roi = extract_roi_with(&edges, &blurred, &cfg.slope)?;
    let path = snake_separator(&roi.crop(&blurred)?, cfg.snake_step)?;
    let split = split_jaws(&roi.crop(img)?, &path)?;
    let mut jaws = Vec::with_capacity(2);
    for (jaw, image) in [
        (JawType::Maxilla, split.maxilla.clone()),
        (JawType::Mandible, split.mandible.clone()),
    ] {
        let isolation = isolate_teeth(&image, jaw, cfg.isolation(jaw))?;
        jaws.push(JawResult { jaw, image, isolation });
    }
    Ok(Extraction {
        roi: Some(roi),
        path: Some(path),
        split: Some(split),
        jaws,
    })
}

/// Isolation only, for an image that already holds a single jaw.
pub fn extract_single_jaw(img: &GrayImage, jaw: JawType, cfg: &ExtractConfig) -> Result<Extraction> {
    let isolation = isolate_teeth(img, jaw, cfg.isolation(jaw))?;
    Ok(Extraction {
        roi: None,
        path: None,
        split: None,
        jaws: vec![JawResult {
            jaw,
            image: img.clone(),
            isolation,
        }],
    })
}
