use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ga_isolate::{JawRegion, JawType};
use crate::imgproc::{io, BinaryImage, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Mild,
    Severe,
}

impl Label {
    pub fn is_caries(self) -> bool {
        self != Label::Healthy
    }

    /// Binary class index: 0 healthy, 1 caries.
    pub fn class(self) -> usize {
        usize::from(self.is_caries())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub label: Label,
    pub jaw: JawType,
    pub region: u8,
    /// Binary lesion mask, for carious samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        let region = JawRegion::new(self.region).map_err(|e| Error::Data(format!("{}: {e}", self.id)))?;
        if region.jaw() != self.jaw {
            return Err(Error::Data(format!(
                "{}: region {} does not belong to the {:?}",
                self.id, self.region, self.jaw
            )));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Entries(Vec<ManifestEntry>),
    Full {
        entries: Vec<ManifestEntry>,
        #[serde(default)]
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_seed: u64,
}

impl DatasetManifest {
    /// Reads a JSON array of entries, or an object with `entries` and
    /// `split_seed`.
    pub fn from_json(text: &str) -> Result<Self> {
        let m = match serde_json::from_str(text)? {
            ManifestFile::Entries(entries) => Self { entries, split_seed: 0 },
            ManifestFile::Full { entries, split_seed } => Self { entries, split_seed },
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes the entries as a JSON array.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.entries)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            e.validate()?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {}", e.id)));
            }
        }
        Ok(())
    }
}

/// Images and lesion masks held in memory, parallel to `entries`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<GrayImage>,
    pub masks: Vec<Option<BinaryImage>>,
}

impl Dataset {
    pub fn new(entries: Vec<ManifestEntry>, images: Vec<GrayImage>, masks: Vec<Option<BinaryImage>>) -> Result<Self> {
        if entries.len() != images.len() || entries.len() != masks.len() {
            return Err(Error::Data("entries, images and masks differ in length".into()));
        }
        Ok(Self { entries, images, masks })
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut masks = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let p = resolve(&e.image);
            if !p.is_file() {
                return Err(Error::Data(format!("{}: image {} not found", e.id, p.display())));
            }
            images.push(io::load(&p)?);
            masks.push(match &e.mask {
                Some(m) => {
                    let g = io::load(resolve(m))?;
                    let bits = g.data().iter().map(|&v| v > 0.5).collect();
                    Some(BinaryImage::from_vec(g.width(), g.height(), bits)?)
                }
                None => None,
            });
        }
        Self::new(manifest.entries, images, masks)
    }

    /// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.json` under
    /// `dir`, rewriting entry paths relative to it. Returns the manifest path.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        if self.masks.iter().any(Option::is_some) {
            fs::create_dir_all(dir.join("masks"))?;
        }
        for i in 0..self.len() {
            let id = self.entries[i].id.clone();
            let rel = PathBuf::from("images").join(format!("{id}.png"));
            io::save(&self.images[i], dir.join(&rel))?;
            self.entries[i].image = rel;
            self.entries[i].mask = match &self.masks[i] {
                Some(m) => {
                    let rel = PathBuf::from("masks").join(format!("{id}.png"));
                    io::save(&m.to_gray(), dir.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
        }
        let manifest = dir.join("manifest.json");
        DatasetManifest {
            entries: self.entries.clone(),
            split_seed: 0,
        }
        .save(&manifest)?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

fn by_class(labels: &[Label]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        out[l.class()].push(i);
    }
    out
}

/// Indices into `labels` with the smaller binary class (mild and severe pooled
/// as caries) topped up by sampling with replacement until both classes are
/// equally large, then shuffled.
pub fn balance_by_resampling(labels: &[Label], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let [healthy, caries] = by_class(labels);
    if healthy.is_empty() || caries.is_empty() {
        return Err(Error::Data("resampling needs both healthy and carious samples".into()));
    }
    let (small, large) = if caries.len() < healthy.len() {
        (caries, healthy)
    } else {
        (healthy, caries)
    };
    let mut out: Vec<usize> = large.iter().chain(small.iter()).copied().collect();
    for _ in small.len()..large.len() {
        out.push(small[rng.random_range(0..small.len())]);
    }
    out.shuffle(rng);
    Ok(out)
}

/// Stratified split on the binary class. Each class contributes
/// `round(fraction * count)` test samples, clamped so that both sides keep at
/// least one. Returns ascending `(train, test)` indices.
pub fn split_train_test(labels: &[Label], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(format!("test fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class(labels).into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {} has {} sample(s); a split needs at least 2",
                if class == 1 { "caries" } else { "healthy" },
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Number of samples of each label.
pub fn label_counts(labels: &[Label]) -> BTreeMap<Label, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(*l).or_insert(0) += 1;
    }
    m
}
