use super::{BinaryImage, GrayImage};
use crate::error::{Error, Result};

/// Sauvola dynamic range for intensities normalized to `[0, 1]`.
pub const SAUVOLA_DYNAMIC_RANGE: f64 = 0.5;

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("{name} must be positive, got {sigma}")));
    }
    Ok(())
}

/// Normalized 1-D Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    check_sigma("sigma", sigma)?;
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    Ok(k)
}

/// Separable Gaussian blur: a row pass followed by a column pass.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    let kernel = gaussian_kernel_1d(sigma)?;
    img.ensure_non_empty()?;
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());

    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * img.get_clamped(x as isize + i as isize - r, y as isize);
            }
            rows[y * w + x] = acc;
        }
    }

    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * rows[yy * w + x];
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    GrayImage::from_vec(w, h, out)
}

/// Edge-preserving bilateral filter over a `(2 ceil(3 sigma_space) + 1)^2` window.
pub fn bilateral_filter(img: &GrayImage, sigma_space: f64, sigma_range: f64) -> Result<GrayImage> {
    check_sigma("sigma_space", sigma_space)?;
    check_sigma("sigma_range", sigma_range)?;
    img.ensure_non_empty()?;
    let r = (3.0 * sigma_space).ceil().max(1.0) as isize;
    let side = (2 * r + 1) as usize;
    let mut spatial = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            spatial.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma_space * sigma_space)).exp());
        }
    }
    let range_den = 2.0 * sigma_range * sigma_range;

    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let center = img.get(x, y);
            let mut num = 0.0;
            let mut den = 0.0;
            let mut idx = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = img.get_clamped(x as isize + dx, y as isize + dy);
                    let d = v - center;
                    let wgt = spatial[idx] * (-(d * d) / range_den).exp();
                    num += wgt * v;
                    den += wgt;
                    idx += 1;
                }
            }
            out[y * w + x] = (num / den).clamp(0.0, 1.0);
        }
    }
    GrayImage::from_vec(w, h, out)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Absolute Sobel-x response, not rescaled.
pub fn vertical_edge_response(img: &GrayImage) -> Result<Vec<f64>> {
    if img.width() < 3 || img.height() == 0 {
        return Err(Error::param(format!(
            "vertical edge filter needs width >= 3, got {}",
            img.width()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, krow) in SOBEL_X.iter().enumerate() {
                for (kx, &k) in krow.iter().enumerate() {
                    acc += k * img.get_clamped(x as isize + kx as isize - 1, y as isize + ky as isize - 1);
                }
            }
            out[y * w + x] = acc.abs();
        }
    }
    Ok(out)
}

/// Sobel-x magnitude rescaled so the strongest edge is 1.
pub fn vertical_edge_filter(img: &GrayImage) -> Result<GrayImage> {
    let resp = vertical_edge_response(img)?;
    let max = resp.iter().cloned().fold(0.0, f64::max);
    let data = if max > 0.0 {
        resp.iter().map(|v| (v / max).clamp(0.0, 1.0)).collect()
    } else {
        resp
    };
    GrayImage::from_vec(img.width(), img.height(), data)
}

/// Sauvola local thresholding; foreground where `v > m (1 + k (s / R - 1))`.
///
/// Window statistics come from summed-area tables over an edge-replicated
/// copy of the image.
pub fn sauvola_binarize(img: &GrayImage, window: usize, k: f64) -> Result<BinaryImage> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::param(format!("sauvola window must be odd and >= 3, got {window}")));
    }
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::param(format!("sauvola k must be in (0, 1), got {k}")));
    }
    img.ensure_non_empty()?;
    let r = (window / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let pw = w + 2 * r as usize;
    let ph = h + 2 * r as usize;

    // (pw + 1) x (ph + 1) tables with a zero first row/column.
    let stride = pw + 1;
    let mut sum = vec![0.0; stride * (ph + 1)];
    let mut sq = vec![0.0; stride * (ph + 1)];
    for py in 0..ph {
        let mut row_sum = 0.0;
        let mut row_sq = 0.0;
        for px in 0..pw {
            let v = img.get_clamped(px as isize - r, py as isize - r);
            row_sum += v;
            row_sq += v * v;
            let i = (py + 1) * stride + px + 1;
            sum[i] = sum[i - stride] + row_sum;
            sq[i] = sq[i - stride] + row_sq;
        }
    }
    let rect = |t: &[f64], x0: usize, y0: usize| {
        let (x1, y1) = (x0 + window, y0 + window);
        t[y1 * stride + x1] - t[y0 * stride + x1] - t[y1 * stride + x0] + t[y0 * stride + x0]
    };

    let n = (window * window) as f64;
    let mut out = BinaryImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let m = rect(&sum, x, y) / n;
            let var = (rect(&sq, x, y) / n - m * m).max(0.0);
            let s = var.sqrt();
            let threshold = m * (1.0 + k * (s / SAUVOLA_DYNAMIC_RANGE - 1.0));
            out.set(x, y, img.get(x, y) > threshold);
        }
    }
    Ok(out)
}
