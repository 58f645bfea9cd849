//! Bilinear sampling and resizing.

use super::GrayImage;

/// Bilinear lookup at continuous pixel-centre coordinates; zero outside.
pub fn bilinear_zero(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |xx: isize, yy: isize| {
        if xx < 0 || yy < 0 || xx >= w || yy >= h {
            0.0
        } else {
            img.get(xx as usize, yy as usize)
        }
    };
    let mut acc = 0.0;
    // Skip zero-weight taps so exact pixel-centre hits do not read neighbours.
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                acc += wgt * px(x0 + dx, y0 + dy);
            }
        }
    }
    acc
}

/// Bilinear lookup with clamp-to-edge replication.
pub fn bilinear_clamped(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (img.width() - 1) as f64);
    let y = y.clamp(0.0, (img.height() - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
    let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resizes with pixel-centre aligned bilinear interpolation.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    GrayImage::from_fn(width, height, |x, y| {
        bilinear_clamped(img, (x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
    })
}

/// Same as [`resize_bilinear`] for an unconstrained row-major grid.
pub fn resize_grid(src: &[f64], sw: usize, sh: usize, width: usize, height: usize) -> Vec<f64> {
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let at = |x: usize, y: usize| src[y * sw + x];
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let fxp = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let fyp = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
            let x0 = fxp.floor() as usize;
            let y0 = fyp.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let fx = fxp - x0 as f64;
            let fy = fyp - y0 as f64;
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
