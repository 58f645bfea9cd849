use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{bind, image_batch, init_params, ParamVars};
use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::imgproc::GrayImage;

/// Four stride-2/stride-1 conv layers down to `input_size / 8`, mirrored by
/// conv + nearest upsampling on the way back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    pub input_size: usize,
    pub channels: [usize; 4],
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: [16, 32, 32, 8],
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::Config(format!(
                "autoencoder input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("autoencoder channels must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn latent_channels(&self) -> usize {
        self.channels[3]
    }

    /// Parameter shapes with their fan-in, encoder then decoder.
    pub(crate) fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let c = self.channels;
        let enc_io = [(1, c[0]), (c[0], c[1]), (c[1], c[2]), (c[2], c[3])];
        let dec_io = [(c[3], c[2]), (c[2], c[1]), (c[1], c[0]), (c[0], 1)];
        let mut out = Vec::new();
        for (prefix, io) in [("enc", enc_io), ("dec", dec_io)] {
            for (i, (cin, cout)) in io.iter().enumerate() {
                let name = format!("{prefix}.conv{}", i + 1);
                out.push((format!("{name}.w"), vec![*cout, *cin, 3, 3], cin * 9));
                out.push((format!("{name}.b"), vec![*cout], 0));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub config: AeConfig,
    /// `enc.*` and `dec.*` tensors.
    pub params: ParamStore,
}

impl AutoencoderModel {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.param_shapes(), seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: AeConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in config.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "{name}: expected {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Data(format!("autoencoder weights lack {name}"))),
            }
        }
        let params = params
            .into_iter()
            .filter(|(k, _)| k.starts_with("enc.") || k.starts_with("dec."))
            .collect();
        Ok(Self { config, params })
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Reconstructs images at the configured input size.
    pub fn reconstruct(&self, images: &[&GrayImage]) -> Result<Vec<GrayImage>> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, |_| false);
        let x = tape.constant(image_batch(images, self.config.input_size)?);
        let z = encode(&mut tape, &p, x)?;
        let y = decode(&mut tape, &p, z)?;
        let s = self.config.input_size;
        Ok(tape
            .value(y)
            .data()
            .chunks(s * s)
            .map(|c| GrayImage::from_fn(s, s, |x, y| c[y * s + x]))
            .collect())
    }
}

/// Encoder activations after each layer; the last one is the latent code.
pub(crate) fn encode_layers(tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Vec<Var>> {
    let mut h = x;
    let mut out = Vec::with_capacity(4);
    for i in 1..=4 {
        let stride = if i < 4 { 2 } else { 1 };
        let name = format!("enc.conv{i}");
        h = tape.conv2d(h, p[&format!("{name}.w")], Some(p[&format!("{name}.b")]), stride, 1)?;
        h = tape.swish(h);
        out.push(h);
    }
    Ok(out)
}

pub(crate) fn encode(tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
    Ok(*encode_layers(tape, p, x)?.last().expect("four layers"))
}

/// Latent `[N, c4, S/8, S/8]` to image `[N, 1, S, S]` in `(0, 1)`.
pub(crate) fn decode(tape: &mut Tape, p: &ParamVars, z: Var) -> Result<Var> {
    let mut h = z;
    for i in 1..=4 {
        let name = format!("dec.conv{i}");
        h = tape.conv2d(h, p[&format!("{name}.w")], Some(p[&format!("{name}.b")]), 1, 1)?;
        if i < 4 {
            h = tape.swish(h);
            h = tape.upsample2d(h, 2)?;
        } else {
            h = tape.sigmoid(h);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Fits encoder and decoder to reconstruct `images` under MSE. Returns the
/// model and the mean MSE of every epoch.
pub fn train_autoencoder(
    images: &[GrayImage],
    config: &AeConfig,
    train: &AeTrainConfig,
) -> Result<(AutoencoderModel, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Data("autoencoder needs at least one image".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut model = AutoencoderModel::new(config.clone(), train.seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(train.batch_size).enumerate() {
            let batch: Vec<&GrayImage> = chunk.iter().map(|&i| &images[i]).collect();
            let mut tape = Tape::new();
            let p = bind(&mut tape, &model.params, |_| true);
            let x = tape.constant(image_batch(&batch, config.input_size)?);
            let z = encode(&mut tape, &p, x)?;
            let y = decode(&mut tape, &p, z)?;
            let loss = tape.mse_loss(y, x)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    batch: bi,
                    lr: train.lr,
                    reason: "autoencoder loss is not finite".into(),
                });
            }
            total += lv * chunk.len() as f64;
            tape.backward(loss)?;
            let grads: BTreeMap<String, _> = p
                .iter()
                .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g)))
                .collect();
            adam.step(&mut model.params, &grads, train.lr)?;
        }
        let mse = total / images.len() as f64;
        log::debug!("autoencoder epoch {epoch}: mse {mse:.6}");
        history.push(mse);
    }
    Ok((model, history))
}
