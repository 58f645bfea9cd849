//! Grad-CAM heatmaps over named layers of a [`PaXNetModel`], overlays, and a
//! robustness sweep over rotations, scales and brightness changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::capsnet::{GradMode, Masking, PaXNetModel, Sample};
use crate::error::{Error, Result};
use crate::imgproc::sample::{resize_bilinear, resize_grid};
use crate::imgproc::{io, BinaryImage, GrayImage};
use crate::training::AugmentParams;

/// Guard for normalising a map by its maximum.
pub const NORM_EPS: f64 = 1e-12;

/// Threshold on the normalised map that selects its hottest pixels.
pub const TOP_DECILE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Values in `[0, 1]` at the model's input resolution.
    pub values: GrayImage,
    pub source_layer: String,
}

impl Heatmap {
    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }

    /// Pixels at or above `threshold`; empty for an all-zero map.
    pub fn hot_mask(&self, threshold: f64) -> BinaryImage {
        let bits = self
            .values
            .data()
            .iter()
            .map(|&v| v > 0.0 && v >= threshold)
            .collect();
        BinaryImage::from_vec(self.values.width(), self.values.height(), bits).expect("same size")
    }

    pub fn top_decile(&self) -> BinaryImage {
        self.hot_mask(TOP_DECILE)
    }
}

/// Class-activation map from one sample's activation `[1, C, h, w]` (or
/// `[C, h, w]`) and the gradient of the class score with respect to it:
/// channel weights are the spatial means of the gradient, the map is
/// `ReLU(sum_c w_c A_c)`, bilinearly resized to `size x size` and divided by
/// its maximum.
pub fn cam_from(activation: &Tensor, gradient: &Tensor, size: usize) -> Result<GrayImage> {
    if activation.shape() != gradient.shape() {
        return Err(Error::shape(format!(
            "activation {:?} vs gradient {:?}",
            activation.shape(),
            gradient.shape()
        )));
    }
    let (c, h, w) = match activation.shape() {
        [1, c, h, w] | [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("expected one sample's feature map, got {s:?}"))),
    };
    let hw = h * w;
    let a = activation.data();
    let g = gradient.data();
    let mut map = vec![0.0; hw];
    for ch in 0..c {
        let gc = &g[ch * hw..(ch + 1) * hw];
        let weight = gc.iter().sum::<f64>() / hw as f64;
        for (m, v) in map.iter_mut().zip(&a[ch * hw..(ch + 1) * hw]) {
            *m += weight * v;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    let up = if (h, w) == (size, size) {
        map
    } else {
        resize_grid(&map, w, h, size, size)
    };
    let max = up.iter().cloned().fold(0.0, f64::max);
    let data = if max < NORM_EPS {
        vec![0.0; up.len()]
    } else {
        up.iter().map(|v| (v / max).clamp(0.0, 1.0)).collect()
    };
    GrayImage::from_vec(size, size, data)
}

/// Names of the layers Grad-CAM can target: provider last layers and
/// `"fusion"`.
pub fn layer_names(model: &PaXNetModel) -> Vec<String> {
    let mut v: Vec<String> = model.providers.iter().map(|p| p.last_layer()).collect();
    v.push("fusion".into());
    v
}

/// Heatmaps for several layers from a single backward pass of the
/// pre-softmax capsule norm of `target_class`.
pub fn grad_cams(model: &PaXNetModel, input: Sample, target_class: usize, layers: &[String]) -> Result<Vec<Heatmap>> {
    let n = model.config.caps.n;
    if target_class >= n {
        return Err(Error::param(format!("target class {target_class} out of range for {n} classes")));
    }
    let mut g = model.graph(&[input], GradMode::Explain, Masking::Winner)?;
    let mut vars = Vec::with_capacity(layers.len());
    for id in layers {
        match g.layers.get(id) {
            Some(v) => vars.push(*v),
            None => {
                return Err(Error::param(format!(
                    "unknown layer '{id}'; known layers: {}",
                    layer_names(model).join(", ")
                )))
            }
        }
    }
    let mut onehot = vec![0.0; n];
    onehot[target_class] = 1.0;
    let pick = g.tape.constant(Tensor::new(&[1, n], onehot)?);
    let score = g.tape.mul(g.norms, pick)?;
    let score = g.tape.sum(score);
    g.tape.backward(score)?;
    let size = model.config.input_size;
    layers
        .iter()
        .zip(vars)
        .map(|(id, v)| {
            let act = g.tape.value(v);
            let grad = g.tape.grad(v).unwrap_or_else(|| Tensor::zeros(act.shape()));
            Ok(Heatmap {
                values: cam_from(act, &grad, size)?,
                source_layer: id.clone(),
            })
        })
        .collect()
}

pub fn grad_cam(model: &PaXNetModel, input: Sample, target_class: usize, layer_id: &str) -> Result<Heatmap> {
    Ok(grad_cams(model, input, target_class, &[layer_id.to_string()])?.remove(0))
}

/// One map per provider in configuration order, then the fusion map.
pub fn per_provider_cams(model: &PaXNetModel, input: Sample, target_class: usize) -> Result<Vec<Heatmap>> {
    grad_cams(model, input, target_class, &layer_names(model))
}

fn warm(t: f64) -> [f64; 3] {
    [(2.0 * t).min(1.0), (2.0 * t - 0.5).clamp(0.0, 1.0), (4.0 * t - 3.0).clamp(0.0, 1.0)]
}

/// Grey input blended with the heatmap in a black-red-yellow-white scale,
/// opacity growing with heat.
pub fn overlay(input: &GrayImage, heat: &Heatmap) -> Vec<[f64; 3]> {
    let (w, h) = (heat.values.width(), heat.values.height());
    let base = if (input.width(), input.height()) == (w, h) {
        input.clone()
    } else {
        resize_bilinear(input, w, h)
    };
    base.data()
        .iter()
        .zip(heat.values.data())
        .map(|(&g, &t)| {
            let a = 0.6 * t;
            let c = warm(t);
            [0, 1, 2].map(|k| (1.0 - a) * g + a * c[k])
        })
        .collect()
}

pub fn save_overlay(input: &GrayImage, heat: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let rgb = overlay(input, heat);
    io::save_rgb_png(heat.values.width(), heat.values.height(), &rgb, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Transform {
    /// Degrees counter-clockwise.
    Rotate(f64),
    /// Content scale; below 1 shrinks.
    Scale(f64),
    /// Multiplicative brightness factor.
    Brightness(f64),
}

impl Transform {
    pub fn params(&self) -> AugmentParams {
        let mut p = AugmentParams::IDENTITY;
        match *self {
            Transform::Rotate(d) => p.rotation = d,
            Transform::Scale(s) => p.zoom = 1.0 / s,
            Transform::Brightness(b) => p.brightness = b,
        }
        p
    }

    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        self.params().apply(img)
    }

    /// Moves a mask with the geometric part of the transform.
    pub fn apply_mask(&self, mask: &BinaryImage) -> BinaryImage {
        let mut p = self.params();
        p.brightness = 1.0;
        let moved = p.apply(&mask.to_gray());
        let bits = moved.data().iter().map(|&v| v >= 0.5).collect();
        BinaryImage::from_vec(mask.width(), mask.height(), bits).expect("same size")
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Transform::Rotate(_) => "rotate",
            Transform::Scale(_) => "scale",
            Transform::Brightness(_) => "brightness",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Transform::Rotate(v) | Transform::Scale(v) | Transform::Brightness(v) => v,
        }
    }
}

/// Nine rotations over 0-180 degrees, seven scales over 40-160 percent and
/// four brightness factors within plus or minus 30 percent.
pub fn default_grid() -> Vec<Transform> {
    let mut v: Vec<Transform> = (0..9).map(|i| Transform::Rotate(22.5 * i as f64)).collect();
    v.extend((0..7).map(|i| Transform::Scale(0.4 + 0.2 * i as f64)));
    v.extend([0.7, 0.85, 1.15, 1.3].map(Transform::Brightness));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: &'static str,
    pub value: f64,
    pub predicted: usize,
    /// Prediction differs from the untransformed input's.
    pub changed: bool,
    /// IoU of the transformed map's hottest pixels against the reference
    /// moved by the same transform.
    pub iou: f64,
}

/// Runs `transforms` over `input`. The reference region is `lesion` when
/// given, else the untransformed heatmap's hottest pixels; maps target the
/// untransformed prediction and are taken at `layer`.
pub fn robustness_sweep(
    model: &PaXNetModel,
    input: &GrayImage,
    lesion: Option<&BinaryImage>,
    transforms: &[Transform],
    layer: &str,
) -> Result<Vec<SweepRow>> {
    let size = model.config.input_size;
    let base = if (input.width(), input.height()) == (size, size) {
        input.clone()
    } else {
        resize_bilinear(input, size, size)
    };
    let reference = match lesion {
        Some(m) if (m.width(), m.height()) == (size, size) => m.clone(),
        Some(m) => {
            let g = resize_bilinear(&m.to_gray(), size, size);
            BinaryImage::from_vec(size, size, g.data().iter().map(|&v| v >= 0.5).collect())?
        }
        None => {
            let class = model.forward(&[Sample::anonymous(&base)])?[0].predicted();
            grad_cam(model, Sample::anonymous(&base), class, layer)?.top_decile()
        }
    };
    let original = model.forward(&[Sample::anonymous(&base)])?[0].predicted();
    transforms
        .iter()
        .map(|t| {
            let img = t.apply(&base);
            let predicted = model.forward(&[Sample::anonymous(&img)])?[0].predicted();
            let heat = grad_cam(model, Sample::anonymous(&img), original, layer)?;
            let iou = heat.top_decile().iou(&t.apply_mask(&reference))?;
            Ok(SweepRow {
                kind: t.kind(),
                value: t.value(),
                predicted,
                changed: predicted != original,
                iou,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size() {
        let g = default_grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[8], Transform::Rotate(180.0));
        assert!((g[15].value() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn cam_relu_and_normalisation() {
        let a = Tensor::new(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        let g = Tensor::new(&[1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, -0.5, -0.5, -0.5, -0.5]).unwrap();
        // weights (1, -0.5): (-1, 0.5, 2, 3.5) -> ReLU -> divided by 3.5
        let out = cam_from(&a, &g, 2).unwrap();
        let want = [0.0, 1.0 / 7.0, 4.0 / 7.0, 1.0];
        for (o, w) in out.data().iter().zip(want) {
            assert!((o - w).abs() < 1e-15);
        }
        assert!(cam_from(&a, &Tensor::zeros(&[1, 2, 2, 1]), 2).is_err());
    }

    #[test]
    fn zero_map_stays_zero() {
        let a = Tensor::zeros(&[1, 3, 2, 2]);
        let g = Tensor::filled(&[1, 3, 2, 2], 0.5);
        let out = cam_from(&a, &g, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
