use std::path::{Path, PathBuf};

use paxnet::autodiff::container;
use paxnet::capsnet::{train_autoencoder, AutoencoderModel, ModelConfig, PaXNetModel, Sample};
use paxnet::explain::{default_grid, grad_cams, layer_names, robustness_sweep, save_overlay, sweep_csv};
use paxnet::ga_isolate::JawType;
use paxnet::imgproc::{io, BinaryImage};
use paxnet::pipeline::{extract_single_jaw, extract_teeth};
use paxnet::training::synth;
use paxnet::training::{
    balance_by_resampling, evaluate, label_counts, lr_range_test, split_train_test, synth_dataset, train as fit,
    Dataset,
};
use paxnet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{read_json, write_json, RunConfig};

const BALANCE_SALT: u64 = 0x6261_6c61_6e63_6521;

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn synth_teeth(cfg: &RunConfig, n: usize, caries_fraction: f64, out: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = synth_dataset(n, caries_fraction, &cfg.synth, &mut rng)?;
    let manifest = data.write(out)?;
    log::info!("labels: {:?}", label_counts(&data.labels()));
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct PanoramicTruth {
    roi: paxnet::jawsep::Roi,
    band_center: Vec<f64>,
}

pub fn synth_panoramic(cfg: &RunConfig, out: &Path) -> Result<()> {
    out_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = synth::synth_panoramic(&cfg.panoramic, &mut rng)?;
    let img = out.join("panoramic.png");
    io::save(&p.image, &img)?;
    write_json(
        &PanoramicTruth {
            roi: p.roi,
            band_center: p.jaws.band_center.clone(),
        },
        &out.join("truth.json"),
    )?;
    println!("{}", img.display());
    Ok(())
}

pub fn extract(cfg: &RunConfig, input: &Path, out: &Path, jaw: Option<JawType>, overlays: bool) -> Result<()> {
    let img = io::load(input)?;
    let ex = match jaw {
        Some(j) => extract_single_jaw(&img, j, &cfg.extract)?,
        None => extract_teeth(&img, &cfg.extract)?,
    };
    let report = ex.write(&cfg.extract, out)?;
    if overlays {
        for p in ex.write_overlays(&img, out)? {
            log::info!("wrote {}", p.display());
        }
    }
    let teeth: usize = report.jaws.iter().map(|j| j.teeth.len()).sum();
    log::info!("{teeth} teeth written to {}", out.display());
    Ok(())
}

/// Train/test ids as written next to a trained model.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    seed: u64,
    test_fraction: f64,
    train: Vec<String>,
    test: Vec<String>,
}

fn split(cfg: &RunConfig, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    split_train_test(&data.labels(), cfg.train.test_fraction, cfg.seed)
}

pub fn pretrain_ae(mut cfg: RunConfig, manifest: &Path, out: &Path, epochs: Option<usize>, lr: Option<f64>) -> Result<()> {
    if let Some(e) = epochs {
        cfg.autoencoder.epochs = e;
    }
    if let Some(l) = lr {
        cfg.autoencoder.lr = l;
    }
    let data = Dataset::load(manifest)?;
    let (train_idx, _) = split(&cfg, &data)?;
    let images: Vec<_> = train_idx.iter().map(|&i| data.images[i].clone()).collect();
    let (ae, history) = train_autoencoder(&images, &cfg.model.autoencoder, &cfg.autoencoder)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    container::save(&ae.params, out)?;
    log::info!("autoencoder mse per epoch: {history:?}");
    println!("{}", history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path, model_config: Option<&Path>) -> Result<PaXNetModel> {
    let sibling = checkpoint.with_file_name("model_config.json");
    let mc: ModelConfig = match model_config {
        Some(p) => read_json(p)?,
        None if sibling.is_file() => read_json(&sibling)?,
        None => cfg.model.clone(),
    };
    PaXNetModel::load(mc, checkpoint)
}

fn load_ae(cfg: &RunConfig, path: &Path) -> Result<AutoencoderModel> {
    AutoencoderModel::from_params(cfg.model.autoencoder.clone(), container::load(path)?)
}

fn training_indices(cfg: &RunConfig, data: &Dataset, train_idx: &[usize]) -> Result<Vec<usize>> {
    let labels: Vec<_> = train_idx.iter().map(|&i| data.entries[i].label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BALANCE_SALT);
    Ok(balance_by_resampling(&labels, &mut rng)?
        .into_iter()
        .map(|k| train_idx[k])
        .collect())
}

pub fn train(
    mut cfg: RunConfig,
    manifest: &Path,
    ae: &Path,
    out: &Path,
    epochs: Option<usize>,
    lr: Option<f64>,
    auto_lr: bool,
) -> Result<()> {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = lr {
        cfg.train.lr = l;
    }
    cfg.train.validate()?;
    out_dir(out)?;
    let data = Dataset::load(manifest)?;
    let (train_idx, test_idx) = split(&cfg, &data)?;
    let indices = training_indices(&cfg, &data, &train_idx)?;
    let ae = load_ae(&cfg, ae)?;
    let mut model = PaXNetModel::new(cfg.model.clone(), &ae, cfg.seed)?;
    if auto_lr {
        let curve = lr_range_test(&model, &data, &indices, &cfg.train, &cfg.lr_range)?;
        std::fs::write(out.join("lr_curve.csv"), curve.to_csv()?)?;
        log::info!(
            "range test: minimum at lr {:.3e}, using {:.3e}",
            curve.points[curve.min_index].lr,
            curve.suggested_lr
        );
        cfg.train.lr = curve.suggested_lr;
    }
    log::info!("training config: {}", serde_json::to_string(&cfg.train)?);
    write_json(&cfg, &out.join("run_config.json"))?;
    write_json(&cfg.model, &out.join("model_config.json"))?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| data.entries[i].id.clone()).collect();
    write_json(
        &SplitFile {
            seed: cfg.seed,
            test_fraction: cfg.train.test_fraction,
            train: ids(&train_idx),
            test: ids(&test_idx),
        },
        &out.join("split.json"),
    )?;
    let ckpt = out.join("checkpoints");
    let history = fit(&mut model, &data, &indices, &cfg.train, (cfg.train.checkpoint_every > 0).then_some(ckpt.as_path()))?;
    history.write_csv(out.join("history.csv"))?;
    model.save(out.join("model.pxn"))?;
    let report = evaluate(&model, &data, &test_idx)?;
    std::fs::write(out.join("eval.json"), report.to_json()?)?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn indices_for_ids(data: &Dataset, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            data.entries
                .iter()
                .position(|e| &e.id == id)
                .ok_or_else(|| Error::Data(format!("split id {id} not in the manifest")))
        })
        .collect()
}

pub fn eval(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    split: Option<&Path>,
    model_config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let data = Dataset::load(manifest)?;
    let model = load_model(cfg, checkpoint, model_config)?;
    let indices = match split {
        Some(p) => indices_for_ids(&data, &read_json::<SplitFile>(p)?.test)?,
        None => (0..data.len()).collect(),
    };
    let report = evaluate(&model, &data, &indices)?;
    let text = report.to_json()?;
    match out {
        Some(p) => std::fs::write(p, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

pub struct ExplainArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub out: &'a Path,
    pub model_config: Option<&'a Path>,
    pub class: Option<usize>,
    pub layers: &'a [String],
    pub sweep: bool,
    pub mask: Option<&'a Path>,
}

#[derive(Serialize)]
struct Explanation {
    probabilities: Vec<f64>,
    predicted: usize,
    target: usize,
    maps: Vec<PathBuf>,
}

pub fn explain(cfg: &RunConfig, a: &ExplainArgs) -> Result<()> {
    out_dir(a.out)?;
    let model = load_model(cfg, a.checkpoint, a.model_config)?;
    let img = io::load(a.image)?;
    let fwd = model.forward(&[Sample::anonymous(&img)])?.remove(0);
    let predicted = fwd.predicted();
    let target = a.class.unwrap_or(predicted);
    let layers = if a.layers.is_empty() { layer_names(&model) } else { a.layers.to_vec() };
    let cams = grad_cams(&model, Sample::anonymous(&img), target, &layers)?;
    let mut maps = Vec::with_capacity(cams.len());
    for h in &cams {
        let name = PathBuf::from(format!("gradcam_{}.png", h.source_layer.replace('.', "_")));
        save_overlay(&img, h, a.out.join(&name))?;
        maps.push(name);
    }
    write_json(
        &Explanation {
            probabilities: fwd.probs.data().to_vec(),
            predicted,
            target,
            maps,
        },
        &a.out.join("explain.json"),
    )?;
    if a.sweep {
        let mask = match a.mask {
            Some(p) => {
                let g = io::load(p)?;
                Some(BinaryImage::from_vec(g.width(), g.height(), g.data().iter().map(|&v| v > 0.5).collect())?)
            }
            None => None,
        };
        let layer = layers.last().expect("at least one layer");
        let rows = robustness_sweep(&model, &img, mask.as_ref(), &default_grid(), layer)?;
        std::fs::write(a.out.join("sweep.csv"), sweep_csv(&rows)?)?;
        let flips = rows.iter().filter(|r| r.changed).count();
        log::info!("sweep: {flips} of {} transforms change the prediction", rows.len());
    }
    Ok(())
}

pub fn lr_find(cfg: &RunConfig, manifest: &Path, ae: &Path, out: &Path) -> Result<()> {
    let data = Dataset::load(manifest)?;
    let (train_idx, _) = split(cfg, &data)?;
    let indices = training_indices(cfg, &data, &train_idx)?;
    let model = PaXNetModel::new(cfg.model.clone(), &load_ae(cfg, ae)?, cfg.seed)?;
    let curve = lr_range_test(&model, &data, &indices, &cfg.train, &cfg.lr_range)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    std::fs::write(out, curve.to_csv()?)?;
    println!(
        "{}",
        serde_json::json!({
            "suggested_lr": curve.suggested_lr,
            "lr_at_minimum": curve.points[curve.min_index].lr,
            "interior_minimum": curve.has_interior_minimum(),
            "truncated": curve.truncated,
        })
    );
    Ok(())
}
