//! Image file loading and saving.
//!
//! PNG, BMP, JPEG and PGM (P5) inputs are accepted at 8 or 16 bits and
//! normalized into `[0, 1]`. Output is 8-bit PNG or binary PGM.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::DynamicImage;

use super::GrayImage;
use crate::error::{Error, Result};

pub fn load(path: impl AsRef<Path>) -> Result<GrayImage> {
    let img = image::open(path.as_ref())?;
    from_dynamic(&img)
}

pub fn from_dynamic(img: &DynamicImage) -> Result<GrayImage> {
    let sixteen_bit = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if sixteen_bit {
        img.to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect()
    } else {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect()
    };
    GrayImage::from_vec(w, h, data)
}

pub fn to_bytes(img: &GrayImage) -> Vec<u8> {
    img.data().iter().map(|v| (v * 255.0).round() as u8).collect()
}

/// Writes an 8-bit image; the format follows the extension (`.pgm` or PNG).
pub fn save(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        save_pgm(img, path)
    } else {
        save_png_bytes(img.width(), img.height(), &to_bytes(img), path)
    }
}

pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width(), img.height())?;
    f.write_all(&to_bytes(img))?;
    Ok(())
}

fn save_png_bytes(w: usize, h: usize, bytes: &[u8], path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes.to_vec())
        .ok_or_else(|| Error::shape("pixel buffer does not match dimensions"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes an RGB PNG from row-major `[r, g, b]` triples in `[0, 1]`.
pub fn save_rgb_png(w: usize, h: usize, rgb: &[[f64; 3]], path: impl AsRef<Path>) -> Result<()> {
    if rgb.len() != w * h {
        return Err(Error::shape("rgb buffer does not match dimensions"));
    }
    let raw: Vec<u8> = rgb
        .iter()
        .flat_map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::shape("rgb buffer does not match dimensions"))?;
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}
