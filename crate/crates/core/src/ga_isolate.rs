//! Genetic-algorithm tooth isolation.
//!
//! Each chromosome is one separator line `(base_x, angle)`. A line's cost is
//! the mean intensity of the pixels it crosses, so lines settle into the dark
//! gaps between neighbouring teeth. The population cost is the sum of the line
//! costs. Surplus lines are pruned in two stages before the jaw is cut into
//! single-tooth crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::GrayImage;

/// Maximum tilt of a separator line from vertical, in degrees.
pub const MAX_ANGLE: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineGenome {
    /// Column where the line crosses the jaw's middle row.
    pub base_x: f64,
    /// Tilt from vertical in degrees, within `±MAX_ANGLE`.
    pub angle: f64,
}

impl LineGenome {
    pub fn new(base_x: f64, angle: f64) -> Self {
        Self {
            base_x,
            angle: angle.clamp(-MAX_ANGLE, MAX_ANGLE),
        }
    }

    /// Continuous column of the line at row `y` of an image `height` rows tall.
    pub fn x_at(&self, y: f64, height: usize) -> f64 {
        let mid = (height as f64 - 1.0) / 2.0;
        self.base_x + (y - mid) * self.angle.to_radians().tan()
    }

    /// One pixel per row in `rows`, nearest column, clipped to the image.
    pub fn rasterize(&self, width: usize, height: usize, rows: std::ops::Range<usize>) -> Vec<(usize, usize)> {
        rows.filter_map(|y| {
            let c = self.x_at(y as f64, height).round();
            (c >= 0.0 && c < width as f64).then_some((c as usize, y))
        })
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JawType {
    Maxilla,
    Mandible,
}

/// Fractional row range `[top, bottom)` of a jaw image used for line costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowBand {
    pub top: f64,
    pub bottom: f64,
}

impl RowBand {
    pub const FULL: RowBand = RowBand {
        top: 0.0,
        bottom: 1.0,
    };

    pub fn rows(&self, height: usize) -> std::ops::Range<usize> {
        let a = (self.top.clamp(0.0, 1.0) * height as f64).floor() as usize;
        let b = (self.bottom.clamp(0.0, 1.0) * height as f64).ceil() as usize;
        a.min(height)..b.clamp(a.min(height), height)
    }
}

impl Default for RowBand {
    fn default() -> Self {
        Self::FULL
    }
}

/// Mean intensity along the rasterized line over every row.
pub fn line_cost(img: &GrayImage, g: &LineGenome) -> Result<f64> {
    line_cost_in(img, g, RowBand::FULL)
}

pub fn line_cost_in(img: &GrayImage, g: &LineGenome, band: RowBand) -> Result<f64> {
    let rows = band.rows(img.height());
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in rows {
        let c = g.x_at(y as f64, img.height()).round();
        if c >= 0.0 && c < img.width() as f64 {
            acc += img.get(c as usize, y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::param(format!(
            "line at x={:.1}, {:.1} deg misses the {}x{} image",
            g.base_x,
            g.angle,
            img.width(),
            img.height()
        )));
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population_size: usize,
    pub max_generations: usize,
    pub crossover_rate: f64,
    pub mutation_sigma_x: f64,
    pub mutation_sigma_angle: f64,
    pub elite_count: usize,
    pub stall_generations: usize,
    pub rng_seed: u64,
    pub cost_band: RowBand,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 30,
            max_generations: 200,
            crossover_rate: 0.8,
            mutation_sigma_x: 2.0,
            mutation_sigma_angle: 2.0,
            elite_count: 2,
            stall_generations: 25,
            rng_seed: 0,
            cost_band: RowBand::FULL,
        }
    }
}

impl GaConfig {
    /// Mandibular lines are scored on the upper 70% of the crop, away from
    /// the jawbone shadow.
    pub fn for_jaw(jaw: JawType) -> Self {
        match jaw {
            JawType::Maxilla => Self::default(),
            JawType::Mandible => Self {
                cost_band: RowBand {
                    top: 0.0,
                    bottom: 0.7,
                },
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::param("population_size must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::param("crossover_rate must be in [0, 1]"));
        }
        if self.mutation_sigma_x < 0.0 || self.mutation_sigma_angle < 0.0 {
            return Err(Error::param("mutation sigmas must be non-negative"));
        }
        if self.elite_count > self.population_size {
            return Err(Error::param("elite_count exceeds population_size"));
        }
        Ok(())
    }
}

/// Lines ranked by cost, cheapest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub genomes: Vec<LineGenome>,
    pub costs: Vec<f64>,
    pub generation: usize,
}

impl Population {
    pub fn best_cost(&self) -> f64 {
        self.costs.first().copied().unwrap_or(f64::NAN)
    }

    pub fn worst_cost(&self) -> f64 {
        self.costs.last().copied().unwrap_or(f64::NAN)
    }

    /// `C(x)`: the sum of the individual line costs.
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    fn rank(&mut self) {
        let mut idx: Vec<usize> = (0..self.genomes.len()).collect();
        idx.sort_by(|&a, &b| {
            self.costs[a]
                .total_cmp(&self.costs[b])
                .then(self.genomes[a].base_x.total_cmp(&self.genomes[b].base_x))
        });
        self.genomes = idx.iter().map(|&i| self.genomes[i]).collect();
        self.costs = idx.iter().map(|&i| self.costs[i]).collect();
    }
}

/// Stratified initial lines: one per equal-width stratum, jittered inside it,
/// with uniform angles. Costs are left at zero until evaluated.
pub fn init_population(cfg: &GaConfig, jaw_width: usize, rng: &mut impl Rng) -> Result<Population> {
    cfg.validate()?;
    let n = cfg.population_size;
    if jaw_width <= n {
        return Err(Error::param(format!(
            "jaw width {jaw_width} must exceed population size {n}"
        )));
    }
    let stratum = jaw_width as f64 / n as f64;
    let genomes = (0..n)
        .map(|k| {
            let x = ((k as f64 + rng.random::<f64>()) * stratum).min(jaw_width as f64 - 1.0);
            let a = rng.random_range(-MAX_ANGLE..=MAX_ANGLE);
            LineGenome::new(x, a)
        })
        .collect();
    Ok(Population {
        genomes,
        costs: vec![0.0; n],
        generation: 0,
    })
}

/// Per-gene parent choice: `mask[k]` true takes gene `k` from `a` for the first
/// child; the second child takes the complement.
pub fn crossover_with_mask(a: &LineGenome, b: &LineGenome, mask: [bool; 2]) -> (LineGenome, LineGenome) {
    let pick = |m: bool, x: f64, y: f64| if m { (x, y) } else { (y, x) };
    let (x1, x2) = pick(mask[0], a.base_x, b.base_x);
    let (a1, a2) = pick(mask[1], a.angle, b.angle);
    (
        LineGenome {
            base_x: x1,
            angle: a1,
        },
        LineGenome {
            base_x: x2,
            angle: a2,
        },
    )
}

pub fn scattered_crossover(a: &LineGenome, b: &LineGenome, rng: &mut impl Rng) -> (LineGenome, LineGenome) {
    let mask = [rng.random::<bool>(), rng.random::<bool>()];
    crossover_with_mask(a, b, mask)
}

/// Adds zero-mean Gaussian noise to both genes, then clamps the angle to
/// `±MAX_ANGLE` and `base_x` to `[0, width - 1]`.
pub fn gaussian_mutation(g: &LineGenome, cfg: &GaConfig, width: usize, rng: &mut impl Rng) -> LineGenome {
    let mut out = *g;
    if cfg.mutation_sigma_x > 0.0 {
        out.base_x += Normal::new(0.0, cfg.mutation_sigma_x).unwrap().sample(rng);
    }
    if cfg.mutation_sigma_angle > 0.0 {
        out.angle += Normal::new(0.0, cfg.mutation_sigma_angle).unwrap().sample(rng);
    }
    out.base_x = out.base_x.clamp(0.0, width.saturating_sub(1) as f64);
    out.angle = out.angle.clamp(-MAX_ANGLE, MAX_ANGLE);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub worst: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxGenerations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct Evolution {
    /// Final lines sorted by `base_x`.
    pub lines: Vec<LineGenome>,
    /// Costs aligned with `lines`.
    pub costs: Vec<f64>,
    pub history: Vec<GenerationStats>,
    pub stop: StopReason,
}

fn evaluate(img: &GrayImage, genomes: &[LineGenome], band: RowBand) -> Vec<f64> {
    // A line that misses the image entirely is as bad as a white line.
    genomes
        .par_iter()
        .map(|g| line_cost_in(img, g, band).unwrap_or(f64::INFINITY))
        .collect()
}

/// Runs the genetic cycle on a single-jaw image.
///
/// Per generation the population is ranked. The `elite_count` cheapest lines
/// pass through untouched; every other line picks a mate among its four
/// nearest neighbours along the jaw by linear rank weights, recombines with
/// scattered crossover, is mutated, and is replaced by its child only if the
/// child is strictly cheaper. Restricting mating and replacement to
/// neighbours keeps one sub-population per gap instead of collapsing every
/// line into the darkest gap. All random draws of a generation happen before
/// its (parallel) cost evaluation.
pub fn evolve(jaw: &GrayImage, cfg: &GaConfig) -> Result<Evolution> {
    cfg.validate()?;
    jaw.ensure_non_empty()?;
    let width = jaw.width();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut pop = init_population(cfg, width, &mut rng)?;
    pop.costs = evaluate(jaw, &pop.genomes, cfg.cost_band);
    pop.rank();

    let n = pop.genomes.len();
    let mut history = vec![stats(&pop)];
    let mut best_total = pop.total_cost();
    let mut stall = 0usize;
    let mut stop = StopReason::MaxGenerations;

    for generation in 1..=cfg.max_generations {
        let mut by_x: Vec<usize> = (0..n).collect();
        by_x.sort_by(|&a, &b| pop.genomes[a].base_x.total_cmp(&pop.genomes[b].base_x).then(a.cmp(&b)));
        let mut pos = vec![0usize; n];
        for (p, &i) in by_x.iter().enumerate() {
            pos[i] = p;
        }

        let mut children = Vec::with_capacity(n);
        for i in cfg.elite_count..n {
            let parent = pop.genomes[i];
            let p = pos[i];
            let lo = p.saturating_sub(2);
            let hi = (p + 2).min(n - 1);
            let mates: Vec<usize> = (lo..=hi).filter(|&q| q != p).map(|q| by_x[q]).collect();
            let mut child = parent;
            if !mates.is_empty() && rng.random::<f64>() < cfg.crossover_rate {
                // Index in `pop` is the rank, so weight n - rank favours cheaper mates.
                let weights: Vec<f64> = mates.iter().map(|&m| (n - m) as f64).collect();
                let total: f64 = weights.iter().sum();
                let mut t = rng.random::<f64>() * total;
                let mut mate = mates[mates.len() - 1];
                for (&m, &w) in mates.iter().zip(&weights) {
                    if t < w {
                        mate = m;
                        break;
                    }
                    t -= w;
                }
                let (c1, c2) = scattered_crossover(&parent, &pop.genomes[mate], &mut rng);
                // Crowding: keep the child nearest the parent along the jaw.
                child = if (c1.base_x - parent.base_x).abs() <= (c2.base_x - parent.base_x).abs() {
                    c1
                } else {
                    c2
                };
            }
            children.push((i, gaussian_mutation(&child, cfg, width, &mut rng)));
        }

        let genomes: Vec<LineGenome> = children.iter().map(|c| c.1).collect();
        let costs = evaluate(jaw, &genomes, cfg.cost_band);
        for ((i, child), cost) in children.into_iter().zip(costs) {
            if cost < pop.costs[i] {
                pop.genomes[i] = child;
                pop.costs[i] = cost;
            }
        }
        pop.generation = generation;
        pop.rank();
        history.push(stats(&pop));

        let total = pop.total_cost();
        if total < best_total {
            best_total = total;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.stall_generations {
                stop = StopReason::Stalled;
                break;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pop.genomes[a].base_x.total_cmp(&pop.genomes[b].base_x).then(a.cmp(&b)));
    Ok(Evolution {
        lines: order.iter().map(|&i| pop.genomes[i]).collect(),
        costs: order.iter().map(|&i| pop.costs[i]).collect(),
        history,
        stop,
    })
}

fn stats(pop: &Population) -> GenerationStats {
    GenerationStats {
        generation: pop.generation,
        best: pop.best_cost(),
        worst: pop.worst_cost(),
        total: pop.total_cost(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemovalConfig {
    /// Initial removal drops lines costlier than `median * cost_ratio`.
    pub cost_ratio: f64,
    /// Lower bound on the initial-removal threshold.
    pub cost_floor: f64,
    /// Lines closer than this (in pixels, at the middle row) are one gap.
    pub min_tooth_width: f64,
    /// A segment whose brightest column mean is below this fraction of the
    /// jaw's brightest column holds no tooth.
    pub empty_ratio: f64,
    pub cost_band: RowBand,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self {
            cost_ratio: 2.0,
            cost_floor: 0.02,
            min_tooth_width: 12.0,
            empty_ratio: 0.5,
            cost_band: RowBand::FULL,
        }
    }
}

impl RemovalConfig {
    pub fn for_jaw(jaw: JawType) -> Self {
        match jaw {
            JawType::Maxilla => Self::default(),
            JawType::Mandible => Self {
                cost_ratio: 1.5,
                cost_band: RowBand {
                    top: 0.0,
                    bottom: 0.7,
                },
                ..Self::default()
            },
        }
    }
}

/// Mean intensity per column over the configured rows.
fn column_content(jaw: &GrayImage, band: RowBand) -> Vec<f64> {
    let rows = band.rows(jaw.height());
    let n = rows.len().max(1) as f64;
    (0..jaw.width())
        .map(|x| rows.clone().map(|y| jaw.get(x, y)).sum::<f64>() / n)
        .collect()
}

/// Initial removal: cost outliers.
pub fn remove_costly_lines(lines: &[LineGenome], jaw: &GrayImage, cfg: &RemovalConfig) -> Vec<LineGenome> {
    if lines.is_empty() {
        return Vec::new();
    }
    let costs: Vec<f64> = lines
        .iter()
        .map(|g| line_cost_in(jaw, g, cfg.cost_band).unwrap_or(f64::INFINITY))
        .collect();
    let mut sorted = costs.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    };
    let limit = (median * cfg.cost_ratio).max(cfg.cost_floor);
    lines
        .iter()
        .zip(&costs)
        .filter(|(_, &c)| c <= limit)
        .map(|(g, _)| *g)
        .collect()
}

/// Final removal: one line per proximity group, then no line bounding a
/// segment without a tooth.
pub fn remove_redundant_lines(lines: &[LineGenome], jaw: &GrayImage, cfg: &RemovalConfig) -> Vec<LineGenome> {
    let cost = |g: &LineGenome| line_cost_in(jaw, g, cfg.cost_band).unwrap_or(f64::INFINITY);
    let mut sorted: Vec<LineGenome> = lines.to_vec();
    sorted.sort_by(|a, b| a.base_x.total_cmp(&b.base_x));

    let mut kept: Vec<(LineGenome, f64)> = Vec::new();
    let mut group: Vec<(LineGenome, f64)> = Vec::new();
    let flush = |group: &mut Vec<(LineGenome, f64)>, kept: &mut Vec<(LineGenome, f64)>| {
        if let Some(best) = group
            .iter()
            .copied()
            .reduce(|a, b| if b.1 < a.1 { b } else { a })
        {
            kept.push(best);
        }
        group.clear();
    };
    for g in sorted {
        if let Some(last) = group.last() {
            if g.base_x - last.0.base_x >= cfg.min_tooth_width {
                flush(&mut group, &mut kept);
            }
        }
        group.push((g, cost(&g)));
    }
    flush(&mut group, &mut kept);

    let content = column_content(jaw, cfg.cost_band);
    let peak = content.iter().cloned().fold(0.0, f64::max);
    let floor = cfg.empty_ratio * peak;
    let empty = |a: f64, b: f64| {
        let lo = (a.round().max(0.0) as usize).min(content.len());
        let hi = (b.round().max(0.0) as usize).min(content.len());
        content[lo..hi].iter().cloned().fold(0.0, f64::max) < floor
    };
    loop {
        let mut bounds: Vec<f64> = vec![0.0];
        bounds.extend(kept.iter().map(|k| k.0.base_x));
        bounds.push(jaw.width() as f64);
        // Segment s lies between bounds[s] and bounds[s + 1]; kept[i] is bounds[i + 1].
        let hit = (0..bounds.len() - 1).find(|&s| empty(bounds[s], bounds[s + 1]) && !kept.is_empty());
        let Some(s) = hit else { break };
        let left = s.checked_sub(1);
        let right = (s < kept.len()).then_some(s);
        let drop = match (left, right) {
            (Some(l), Some(r)) => {
                if kept[r].1 > kept[l].1 {
                    r
                } else {
                    l
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => break,
        };
        kept.remove(drop);
    }
    kept.into_iter().map(|k| k.0).collect()
}

/// Both removal stages in order. The result is a subset of `lines`.
pub fn remove_lines(lines: &[LineGenome], jaw: &GrayImage, cfg: &RemovalConfig) -> Vec<LineGenome> {
    let initial = remove_costly_lines(lines, jaw, cfg);
    remove_redundant_lines(&initial, jaw, cfg)
}

/// Fig. 7-style location of a tooth: jaw × {left, middle, right} third.
/// Regions 1-3 are maxillary, 4-6 mandibular; the middle third holds
/// canines and incisors, the outer thirds molars and premolars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JawRegion(u8);

impl JawRegion {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=6).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::param(format!("jaw region must be 1..=6, got {id}")))
        }
    }

    /// Region of a tooth centred at `center_x` in a jaw `width` columns wide.
    pub fn locate(jaw: JawType, center_x: f64, width: usize) -> Self {
        let third = ((3.0 * center_x / width as f64).floor() as i64).clamp(0, 2) as u8;
        let base = match jaw {
            JawType::Maxilla => 1,
            JawType::Mandible => 4,
        };
        Self(base + third)
    }

    pub fn id(&self) -> u8 {
        self.0
    }

    pub fn jaw(&self) -> JawType {
        if self.0 <= 3 {
            JawType::Maxilla
        } else {
            JawType::Mandible
        }
    }

    pub fn is_molar_premolar(&self) -> bool {
        self.0 % 3 != 2
    }
}

#[derive(Debug, Clone)]
pub struct ToothCrop {
    pub image: GrayImage,
    pub jaw: JawType,
    pub region: JawRegion,
    /// Corners in jaw coordinates: top-left, top-right, bottom-right, bottom-left.
    pub source_bounds: [(f64, f64); 4],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsolationConfig {
    pub ga: GaConfig,
    pub removal: RemovalConfig,
}

impl IsolationConfig {
    pub fn for_jaw(jaw: JawType) -> Self {
        Self {
            ga: GaConfig::for_jaw(jaw),
            removal: RemovalConfig::for_jaw(jaw),
        }
    }
}

/// Everything produced while isolating the teeth of one jaw.
#[derive(Debug, Clone)]
pub struct Isolation {
    pub evolution: Evolution,
    pub after_initial_removal: Vec<LineGenome>,
    pub lines: Vec<LineGenome>,
    pub crops: Vec<ToothCrop>,
}

/// Evolves separator lines, prunes them, and cuts the jaw between consecutive
/// survivors (the jaw borders act as the outermost cuts).
pub fn isolate_teeth(jaw: &GrayImage, jaw_type: JawType, cfg: &IsolationConfig) -> Result<Isolation> {
    let evolution = evolve(jaw, &cfg.ga)?;
    let after_initial_removal = remove_costly_lines(&evolution.lines, jaw, &cfg.removal);
    let lines = remove_redundant_lines(&after_initial_removal, jaw, &cfg.removal);
    if lines.len() < 2 {
        return Err(Error::Isolation(format!(
            "only {} separator line(s) survived removal",
            lines.len()
        )));
    }
    let (w, h) = (jaw.width(), jaw.height());
    let left_border = LineGenome::new(0.0, 0.0);
    let right_border = LineGenome::new(w as f64 - 1.0, 0.0);
    let mut bounds = vec![left_border];
    bounds.extend(lines.iter().copied());
    bounds.push(right_border);

    let mut crops = Vec::new();
    for pair in bounds.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let ax = |y: usize| a.x_at(y as f64, h);
        let bx = |y: usize| b.x_at(y as f64, h);
        let x0 = (0..h).map(ax).fold(f64::INFINITY, f64::min).round().max(0.0) as usize;
        let x1 = ((0..h).map(bx).fold(f64::NEG_INFINITY, f64::max).round() as isize + 1)
            .clamp(0, w as isize) as usize;
        if x1 <= x0 {
            continue;
        }
        let image = GrayImage::from_fn(x1 - x0, h, |x, y| {
            let sx = (x + x0) as f64;
            if sx >= ax(y).round() && sx <= bx(y).round() {
                jaw.get(x + x0, y)
            } else {
                0.0
            }
        });
        let hb = (h - 1) as f64;
        crops.push(ToothCrop {
            image,
            jaw: jaw_type,
            region: JawRegion::locate(jaw_type, (a.base_x + b.base_x) / 2.0, w),
            source_bounds: [(ax(0), 0.0), (bx(0), 0.0), (bx(h - 1), hb), (ax(h - 1), hb)],
        });
    }
    Ok(Isolation {
        evolution,
        after_initial_removal,
        lines,
        crops,
    })
}
