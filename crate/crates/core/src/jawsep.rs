//! ROI extraction and maxilla/mandible separation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RoiStage};
use crate::imgproc::{
    integral_projection, significant_slope, Axis, GrayImage, SlopeConfig, SlopeDirection,
};

/// Half-open crop rectangle `[left, right) x [top, bottom)` in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

impl Roi {
    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn crop(&self, img: &GrayImage) -> Result<GrayImage> {
        img.crop(self.left, self.top, self.right, self.bottom)
    }
}

fn roi_err(stage: RoiStage, e: Error) -> Error {
    Error::Roi {
        stage,
        reason: e.to_string(),
    }
}

/// Two-step ROI detection on a single image; see [`extract_roi_with`].
pub fn extract_roi(img: &GrayImage, cfg: &SlopeConfig) -> Result<Roi> {
    extract_roi_with(img, img, cfg)
}

/// Step 1 finds the jaw-angle edges on `edges` from the first significant
/// positive slope of the column profile (scanned from the left, and mirrored
/// from the right). Step 2 crops `intensity` to those columns and takes the
/// first significant negative slope of its row profile as the top of the jaw
/// (the end of the external oblique ridge), mirrored from the bottom.
///
/// The left edge and ridge are required; the mirrored right and bottom bounds
/// fall back to the image border when no slope exists.
pub fn extract_roi_with(edges: &GrayImage, intensity: &GrayImage, cfg: &SlopeConfig) -> Result<Roi> {
    if edges.width() != intensity.width() || edges.height() != intensity.height() {
        return Err(Error::shape("edge and intensity images differ in size"));
    }
    let (w, h) = (intensity.width(), intensity.height());
    let cols = integral_projection(edges, Axis::Vertical).map_err(|e| roi_err(RoiStage::LeftEdge, e))?;
    let left = significant_slope(&cols, SlopeDirection::Positive, cfg)
        .map_err(|e| roi_err(RoiStage::LeftEdge, e))?;
    let right = match significant_slope(&cols.reversed(), SlopeDirection::Positive, cfg) {
        Ok(i) => w - i,
        Err(Error::NotFound(_)) => w,
        Err(e) => return Err(roi_err(RoiStage::RightEdge, e)),
    };
    if right <= left {
        return Err(Error::Roi {
            stage: RoiStage::RightEdge,
            reason: format!("right edge {right} not past left edge {left}"),
        });
    }

    let band = intensity.crop(left, 0, right, h)?;
    let rows = integral_projection(&band, Axis::Horizontal).map_err(|e| roi_err(RoiStage::Ridge, e))?;
    let top = significant_slope(&rows, SlopeDirection::Negative, cfg)
        .map_err(|e| roi_err(RoiStage::Ridge, e))?;
    let bottom = match significant_slope(&rows.reversed(), SlopeDirection::Negative, cfg) {
        Ok(i) => h - i,
        Err(Error::NotFound(_)) => h,
        Err(e) => return Err(roi_err(RoiStage::Ridge, e)),
    };
    if bottom <= top {
        return Err(Error::Roi {
            stage: RoiStage::Ridge,
            reason: format!("bottom {bottom} not below ridge {top}"),
        });
    }
    Ok(Roi {
        left,
        top,
        right,
        bottom,
    })
}

/// A separation path with exactly one row per image column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparationPath {
    rows: Vec<usize>,
}

impl SeparationPath {
    pub fn new(rows: Vec<usize>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.rows.len()
    }

    /// `(column, row)` pairs, columns ascending from zero.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().copied().enumerate()
    }

    /// Mean intensity of the pixels the path visits.
    pub fn cost(&self, img: &GrayImage) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.points().map(|(x, y)| img.get(x, y)).sum::<f64>() / self.rows.len() as f64
    }
}

/// Picks the minimum of each strip's row profile and joins the points linearly.
/// Ties go to the row nearest the image's middle row.
pub fn middle_points_separator(img: &GrayImage, n_parts: usize) -> Result<SeparationPath> {
    if n_parts < 2 {
        return Err(Error::param(format!("middle points needs n_parts >= 2, got {n_parts}")));
    }
    img.ensure_non_empty()?;
    let (w, h) = (img.width(), img.height());
    if w < n_parts {
        return Err(Error::param(format!("{w} columns cannot form {n_parts} strips")));
    }
    let mid = (h - 1) as f64 / 2.0;
    let mut anchors: Vec<(f64, f64)> = Vec::with_capacity(n_parts);
    for k in 0..n_parts {
        let x0 = k * w / n_parts;
        let x1 = (k + 1) * w / n_parts;
        let strip = img.crop(x0, 0, x1, h)?;
        let prof = integral_projection(&strip, Axis::Horizontal)?;
        let mut best = 0usize;
        for (y, &v) in prof.values.iter().enumerate() {
            let b = prof.values[best];
            if v < b || (v == b && (y as f64 - mid).abs() < (best as f64 - mid).abs()) {
                best = y;
            }
        }
        anchors.push(((x0 + x1 - 1) as f64 / 2.0, best as f64));
    }

    let rows = (0..w)
        .map(|x| {
            let xf = x as f64;
            let y = if xf <= anchors[0].0 {
                anchors[0].1
            } else if xf >= anchors[n_parts - 1].0 {
                anchors[n_parts - 1].1
            } else {
                let k = anchors.iter().rposition(|a| a.0 <= xf).unwrap();
                let (xa, ya) = anchors[k];
                let (xb, yb) = anchors[k + 1];
                ya + (yb - ya) * (xf - xa) / (xb - xa)
            };
            (y.round() as usize).min(h - 1)
        })
        .collect();
    Ok(SeparationPath { rows })
}

/// Start of the snake: the darkest row of the middle third of columns, placed
/// at the column of that third where the row is darkest over a 5-pixel window.
/// Ties go to the column nearest the centre.
pub fn snake_start(img: &GrayImage) -> Result<(usize, usize)> {
    img.ensure_non_empty()?;
    let w = img.width();
    let x0 = w / 3;
    let x1 = (2 * w / 3).max(x0 + 1);
    let band = img.crop(x0, 0, x1, img.height())?;
    let prof = integral_projection(&band, Axis::Horizontal)?;
    let row = prof.argmin().unwrap_or(0);
    let r = img.row(row);
    let window = |x: usize| {
        let (a, b) = (x.saturating_sub(2), (x + 3).min(w));
        r[a..b].iter().sum::<f64>() / (b - a) as f64
    };
    let centre = w / 2;
    let mut best = (window(centre), centre);
    for x in x0..x1 {
        let v = window(x);
        if v < best.0 || (v == best.0 && x.abs_diff(centre) < best.1.abs_diff(centre)) {
            best = (v, x);
        }
    }
    Ok((best.1, row))
}

pub fn snake_separator(img: &GrayImage, step_len: usize) -> Result<SeparationPath> {
    let (x, y) = snake_start(img)?;
    snake_from(img, step_len, x, y)
}

/// Crawls left and right from `(start_x, start_y)` in steps of `step_len`
/// columns. Each step picks the end row within `±step_len` of the current row
/// whose straight segment has the lowest mean intensity; ties go to the row
/// closest to the current one, then to the upper row.
pub fn snake_from(
    img: &GrayImage,
    step_len: usize,
    start_x: usize,
    start_y: usize,
) -> Result<SeparationPath> {
    if step_len == 0 {
        return Err(Error::param("snake step length must be >= 1"));
    }
    img.ensure_non_empty()?;
    let (w, h) = (img.width(), img.height());
    if start_x >= w || start_y >= h {
        return Err(Error::param("snake start outside image"));
    }
    let mut rows = vec![0usize; w];
    rows[start_x] = start_y;

    for dir in [1isize, -1] {
        let (mut x, mut y) = (start_x as isize, start_y as isize);
        loop {
            let remaining = if dir > 0 { w as isize - 1 - x } else { x };
            if remaining <= 0 {
                break;
            }
            let step = remaining.min(step_len as isize);
            let lo = (y - step_len as isize).max(0);
            let hi = (y + step_len as isize).min(h as isize - 1);
            let mut best: Option<(f64, isize)> = None;
            for cand in lo..=hi {
                let cost = segment_cost(img, x, y, dir * step, cand);
                let better = match best {
                    None => true,
                    Some((bc, by)) => {
                        cost < bc
                            || (cost == bc
                                && ((cand - y).abs() < (by - y).abs()
                                    || ((cand - y).abs() == (by - y).abs() && cand < by)))
                    }
                };
                if better {
                    best = Some((cost, cand));
                }
            }
            let (_, ny) = best.expect("candidate range is never empty");
            for i in 1..=step {
                let col = x + dir * i;
                rows[col as usize] = segment_row(y, ny, i, step) as usize;
            }
            x += dir * step;
            y = ny;
        }
    }
    Ok(SeparationPath { rows })
}

#[inline]
fn segment_row(y0: isize, y1: isize, i: isize, step: isize) -> isize {
    let t = i as f64 / step as f64;
    (y0 as f64 + (y1 - y0) as f64 * t).round() as isize
}

fn segment_cost(img: &GrayImage, x: isize, y0: isize, dx: isize, y1: isize) -> f64 {
    let step = dx.abs();
    let dir = dx.signum();
    let mut acc = 0.0;
    for i in 1..=step {
        let r = segment_row(y0, y1, i, step);
        acc += img.get((x + dir * i) as usize, r as usize);
    }
    acc / step as f64
}

/// Output of [`split_jaws`]. Both crops keep source geometry; pixels on the
/// other side of the path are zero padding.
#[derive(Debug, Clone)]
pub struct JawSplit {
    pub maxilla: GrayImage,
    pub mandible: GrayImage,
    /// Source row of the mandible crop's first row.
    pub mandible_offset: usize,
    pub path: SeparationPath,
}

impl JawSplit {
    /// Stitches both crops back into a full image along the path.
    pub fn reassemble(&self) -> GrayImage {
        let w = self.path.width();
        let h = self.mandible_offset + self.mandible.height();
        GrayImage::from_fn(w, h, |x, y| {
            if y < self.path.rows[x] {
                self.maxilla.get(x, y)
            } else {
                self.mandible.get(x, y - self.mandible_offset)
            }
        })
    }

    pub fn is_maxilla_pixel(&self, x: usize, y: usize) -> bool {
        y < self.path.rows[x]
    }

    pub fn is_mandible_pixel(&self, x: usize, y: usize) -> bool {
        y + self.mandible_offset >= self.path.rows[x]
    }
}

/// Maxilla gets pixels strictly above the path, mandible the rest.
pub fn split_jaws(img: &GrayImage, path: &SeparationPath) -> Result<JawSplit> {
    let (w, h) = (img.width(), img.height());
    if path.width() != w {
        return Err(Error::shape(format!(
            "path spans {} columns, image has {w}",
            path.width()
        )));
    }
    if path.rows.iter().any(|&r| r >= h) {
        return Err(Error::param("path row outside image"));
    }
    let max_row = *path.rows.iter().max().unwrap_or(&0);
    let min_row = *path.rows.iter().min().unwrap_or(&0);
    let maxilla = GrayImage::from_fn(w, max_row, |x, y| {
        if y < path.rows[x] {
            img.get(x, y)
        } else {
            0.0
        }
    });
    let mandible = GrayImage::from_fn(w, h - min_row, |x, y| {
        let sy = y + min_row;
        if sy >= path.rows[x] {
            img.get(x, sy)
        } else {
            0.0
        }
    });
    Ok(JawSplit {
        maxilla,
        mandible,
        mandible_offset: min_row,
        path: path.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roi_left_edge_from_dark_margin() {
        let img = GrayImage::from_fn(120, 80, |x, y| {
            if x < 20 {
                0.05
            } else if y < 30 {
                0.9
            } else {
                0.5
            }
        });
        let roi = extract_roi(&img, &SlopeConfig::default()).unwrap();
        assert!((roi.left as isize - 20).abs() <= 5, "{roi:?}");
        assert!((roi.top as isize - 30).abs() <= 5, "{roi:?}");
        assert_eq!(roi.right, 120);
    }

    #[test]
    fn roi_fails_on_uniform() {
        let img = GrayImage::filled(50, 50, 0.4);
        match extract_roi(&img, &SlopeConfig::default()) {
            Err(Error::Roi { stage, .. }) => assert_eq!(stage, RoiStage::LeftEdge),
            other => panic!("expected roi error, got {other:?}"),
        }
    }

    #[test]
    fn middle_points_on_dark_row() {
        let img = GrayImage::from_fn(64, 40, |_, y| if y == 17 { 0.0 } else { 1.0 });
        let p = middle_points_separator(&img, 8).unwrap();
        assert!(p.rows().iter().all(|&r| r == 17));
        assert!(matches!(middle_points_separator(&img, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn middle_points_follows_ramp_band() {
        let center = |x: usize| 20.0 + x as f64 * 0.1;
        let img = GrayImage::from_fn(160, 60, |x, y| {
            if (y as f64 - center(x)).abs() <= 2.0 {
                0.05
            } else {
                0.8
            }
        });
        let p = middle_points_separator(&img, 8).unwrap();
        for k in 0..8 {
            let x = k * 20 + 10;
            assert!((p.rows()[x] as f64 - center(x)).abs() <= 2.0 + 0.5);
        }
    }

    #[test]
    fn snake_on_dark_row() {
        let img = GrayImage::from_fn(90, 50, |_, y| if y == 31 { 0.0 } else { 1.0 });
        let p = snake_separator(&img, 6).unwrap();
        assert_eq!(p.width(), 90);
        assert!(p.rows().iter().all(|&r| r == 31));
    }

    #[test]
    fn snake_stays_in_seeded_band() {
        // Two dark bands 24 rows apart; start in the upper one.
        let img = GrayImage::from_fn(200, 80, |x, y| {
            let upper = 20.0 + 4.0 * (x as f64 / 25.0).sin();
            let lower = upper + 24.0;
            let d = (y as f64 - upper).abs().min((y as f64 - lower).abs());
            if d <= 2.0 {
                0.1
            } else {
                0.9
            }
        });
        let p = snake_from(&img, 8, 100, 20).unwrap();
        for (x, y) in p.points() {
            let upper = 20.0 + 4.0 * (x as f64 / 25.0).sin();
            assert!((y as f64 - upper).abs() <= 8.0, "col {x} row {y}");
        }
    }

    #[test]
    fn split_constant_path() {
        let img = GrayImage::from_fn(10, 12, |x, y| ((x + y) % 5) as f64 / 4.0);
        let path = SeparationPath::new(vec![5; 10]);
        let s = split_jaws(&img, &path).unwrap();
        assert_eq!(s.maxilla.height(), 5);
        assert_eq!(s.mandible.height(), 7);
        assert_eq!(s.reassemble(), img);
    }

    #[test]
    fn split_sloped_path_reassembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = GrayImage::from_fn(30, 20, |_, _| rng.random::<f64>());
        let path = SeparationPath::new((0..30).map(|x| 4 + x / 3).collect());
        let s = split_jaws(&img, &path).unwrap();
        assert!(s.maxilla.height() + s.mandible.height() >= img.height());
        assert_eq!(s.reassemble(), img);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn split_is_a_partition(seed in 0u64..10_000, w in 2usize..20, h in 2usize..20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = GrayImage::from_fn(w, h, |_, _| rng.random::<f64>());
                let rows: Vec<usize> = (0..w).map(|_| rng.random_range(0..h)).collect();
                let path = SeparationPath::new(rows);
                let s = split_jaws(&img, &path).unwrap();
                for x in 0..w {
                    let mut col: Vec<f64> = Vec::new();
                    for y in 0..s.maxilla.height() {
                        if s.is_maxilla_pixel(x, y) {
                            col.push(s.maxilla.get(x, y));
                        }
                    }
                    for y in 0..s.mandible.height() {
                        if s.is_mandible_pixel(x, y) {
                            col.push(s.mandible.get(x, y));
                        }
                    }
                    let orig: Vec<f64> = (0..h).map(|y| img.get(x, y)).collect();
                    prop_assert_eq!(col, orig);
                }
            }
        }
    }
}
