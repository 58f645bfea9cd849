use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::{decode, encode_layers, AeConfig, AutoencoderModel};
use super::{argmax, route, CapsuleLayerSpec, LossConfig};
use crate::autodiff::{container, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imgproc::{sample::resize_bilinear, GrayImage};

pub(crate) type ParamVars = BTreeMap<String, Var>;

/// Puts every tensor of `params` on the tape; names for which `trainable`
/// holds become gradient-carrying leaves.
pub(crate) fn bind(tape: &mut Tape, params: &ParamStore, trainable: impl Fn(&str) -> bool) -> ParamVars {
    params
        .iter()
        .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable(k))))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zero,
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn(usize),
    Uniform(f64),
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, so each tensor's init is independent of which others exist.
    name.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub(crate) fn init_tensor(name: &str, shape: &[usize], init: Init, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::FanIn(f) => Tensor::uniform(shape, (6.0 / f.max(1) as f64).sqrt(), &mut rng),
        Init::Uniform(b) => Tensor::uniform(shape, b, &mut rng),
    }
}

pub(crate) fn init_params(shapes: &[(String, Vec<usize>, usize)], seed: u64) -> ParamStore {
    shapes
        .iter()
        .map(|(name, shape, fan_in)| {
            let init = if *fan_in == 0 { Init::Zero } else { Init::FanIn(*fan_in) };
            (name.clone(), init_tensor(name, shape, init, seed))
        })
        .collect()
}

/// Stacks images into `[N, 1, size, size]`, resizing where needed.
pub(crate) fn image_batch(images: &[&GrayImage], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        img.ensure_non_empty()?;
        if img.width() == size && img.height() == size {
            data.extend_from_slice(img.data());
        } else {
            data.extend_from_slice(resize_bilinear(img, size, size).data());
        }
    }
    Tensor::new(&[images.len(), 1, size, size], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderSpec {
    /// Trainable two-layer CNN.
    Cnn { channels: [usize; 2] },
    /// Frozen encoder of the pretrained autoencoder.
    Encoder,
    /// Frozen features read from a PXN1 file, one `[channels, size, size]`
    /// tensor per sample id.
    Sidecar {
        name: String,
        path: PathBuf,
        channels: usize,
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub providers: Vec<ProviderSpec>,
    pub autoencoder: AeConfig,
    pub fusion_channels: usize,
    /// Width of the dense layer feeding the primary capsules. Defaults to
    /// `m * d1`; any other width adds a linear projection to `m * d1`.
    pub dense_width: Option<usize>,
    pub caps: CapsuleLayerSpec,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            providers: vec![ProviderSpec::Cnn { channels: [16, 32] }, ProviderSpec::Encoder],
            autoencoder: AeConfig::default(),
            fusion_channels: 32,
            dense_width: None,
            caps: CapsuleLayerSpec::default(),
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced model for 32x32 crops, small enough for CPU test runs.
    pub fn mini() -> Self {
        Self {
            input_size: 32,
            providers: vec![ProviderSpec::Cnn { channels: [8, 16] }, ProviderSpec::Encoder],
            autoencoder: AeConfig {
                input_size: 32,
                channels: [8, 8, 8, 8],
            },
            fusion_channels: 16,
            ..Self::default()
        }
    }

    /// Same model with only the trainable CNN feeding the fusion layer.
    pub fn cnn_only(&self) -> Self {
        Self {
            providers: self
                .providers
                .iter()
                .filter(|p| matches!(p, ProviderSpec::Cnn { .. }))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.caps.validate()?;
        self.autoencoder.validate()?;
        if self.input_size % 8 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.autoencoder.input_size != self.input_size {
            return Err(Error::Config("autoencoder.input_size must equal input_size".into()));
        }
        let cnns = self
            .providers
            .iter()
            .filter(|p| matches!(p, ProviderSpec::Cnn { .. }))
            .count();
        if cnns != 1 {
            return Err(Error::Config(format!(
                "exactly one cnn provider is required, found {cnns}"
            )));
        }
        for p in &self.providers {
            match p {
                ProviderSpec::Cnn { channels } if channels.contains(&0) => {
                    return Err(Error::Config("cnn channels must be positive".into()))
                }
                ProviderSpec::Sidecar { channels, size, .. } if *channels == 0 || *size == 0 => {
                    return Err(Error::Config("sidecar channels and size must be positive".into()))
                }
                _ => {}
            }
        }
        if self.fusion_channels == 0 || self.dense_width == Some(0) {
            return Err(Error::Config("fusion_channels and dense_width must be positive".into()));
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.input_size / 4
    }

    fn dense_width(&self) -> usize {
        self.dense_width.unwrap_or(self.caps.m * self.caps.d1)
    }

    fn fused_channels(&self) -> usize {
        self.providers
            .iter()
            .map(|p| match p {
                ProviderSpec::Cnn { channels } => channels[1],
                ProviderSpec::Encoder => self.autoencoder.latent_channels(),
                ProviderSpec::Sidecar { channels, .. } => *channels,
            })
            .sum()
    }

    /// Shapes and init of every trainable tensor.
    fn trainable_shapes(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = self.caps;
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, 3, 3], Init::FanIn(cin * 9)));
            out.push((format!("{name}.b"), vec![cout], Init::Zero));
        };
        for p in &self.providers {
            if let ProviderSpec::Cnn { channels } = p {
                conv("cnn.conv1", channels[0], 1);
                conv("cnn.conv2", channels[1], channels[0]);
            }
        }
        conv("fusion", self.fusion_channels, self.fused_channels());
        let flat = self.fusion_channels * (self.input_size / 8).pow(2);
        let dw = self.dense_width();
        out.push(("dense.w".into(), vec![flat, dw], Init::FanIn(flat)));
        out.push(("dense.b".into(), vec![dw], Init::Zero));
        if dw != c.m * c.d1 {
            out.push(("proj.w".into(), vec![dw, c.m * c.d1], Init::FanIn(dw)));
        }
        // Scaled so that a unit primary capsule yields an output of roughly
        // unit length under uniform couplings.
        let caps_bound = c.n as f64 * (3.0 / (c.m * c.d2) as f64).sqrt();
        out.push(("caps.w".into(), vec![c.m, c.n, c.d2, c.d1], Init::Uniform(caps_bound)));
        let latent = self.autoencoder.latent_channels() * self.autoencoder.latent_size().pow(2);
        out.push(("bridge.w".into(), vec![c.d2, latent], Init::FanIn(c.d2)));
        out.push(("bridge.b".into(), vec![latent], Init::Zero));
        out
    }
}

/// Runtime form of a [`ProviderSpec`].
#[derive(Debug, Clone)]
pub enum FeatureProvider {
    Cnn,
    Encoder,
    Sidecar {
        name: String,
        features: ParamStore,
        channels: usize,
        size: usize,
    },
}

impl FeatureProvider {
    pub fn name(&self) -> &str {
        match self {
            FeatureProvider::Cnn => "cnn",
            FeatureProvider::Encoder => "encoder",
            FeatureProvider::Sidecar { name, .. } => name,
        }
    }

    pub fn frozen(&self) -> bool {
        !matches!(self, FeatureProvider::Cnn)
    }

    /// Graph layer whose activation is the provider's last feature map.
    pub fn last_layer(&self) -> String {
        match self {
            FeatureProvider::Cnn => "cnn.conv2".into(),
            FeatureProvider::Encoder => "enc.conv4".into(),
            FeatureProvider::Sidecar { name, .. } => format!("sidecar.{name}"),
        }
    }
}

/// One input image plus the id used to look up sidecar features.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a GrayImage,
    pub id: &'a str,
}

impl<'a> Sample<'a> {
    pub fn new(image: &'a GrayImage, id: &'a str) -> Self {
        Self { image, id }
    }

    pub fn anonymous(image: &'a GrayImage) -> Self {
        Self { image, id: "" }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Pure inference.
    None,
    /// Trainable parameters carry gradients.
    Train,
    /// The input carries gradients so every activation does (Grad-CAM).
    Explain,
}

#[derive(Debug, Clone, Copy)]
pub enum Masking<'a> {
    Winner,
    /// Mask with the true class of each sample.
    Teacher(&'a [usize]),
}

/// A recorded forward pass over a batch.
pub struct Graph {
    pub tape: Tape,
    pub params: BTreeMap<String, Var>,
    pub input: Var,
    /// Named activations: provider last layers and `"fusion"`.
    pub layers: BTreeMap<String, Var>,
    /// `[N, n, d2]`
    pub v: Var,
    /// `[N, n]` capsule norms.
    pub norms: Var,
    /// `[N, n]`
    pub probs: Var,
    /// `[N, 1, S, S]`
    pub recon: Var,
    pub couplings: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n]`
    pub probs: Tensor,
    /// `[n, d2]`
    pub v: Tensor,
    pub reconstruction: GrayImage,
}

impl ForwardOutput {
    pub fn predicted(&self) -> usize {
        argmax(self.probs.data())
    }
}

#[derive(Debug, Clone)]
pub struct PaXNetModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub providers: Vec<FeatureProvider>,
}

pub const FROZEN_PREFIXES: [&str; 2] = ["enc.", "dec."];

pub fn is_frozen(name: &str) -> bool {
    FROZEN_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl PaXNetModel {
    /// Fresh trainable weights from `seed`; encoder and decoder copied from `ae`.
    pub fn new(config: ModelConfig, ae: &AutoencoderModel, seed: u64) -> Result<Self> {
        config.validate()?;
        if ae.config != config.autoencoder {
            return Err(Error::Config("autoencoder config differs from the model's".into()));
        }
        let mut params = ae.params.clone();
        for (name, shape, init) in config.trainable_shapes() {
            let t = init_tensor(&name, &shape, init, seed);
            params.insert(name, t);
        }
        let providers = load_providers(&config)?;
        Ok(Self {
            config,
            params,
            providers,
        })
    }

    /// Rebuilds a model from a checkpoint.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected: Vec<(String, Vec<usize>)> = config
            .trainable_shapes()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        expected.extend(config.autoencoder.param_shapes().into_iter().map(|(n, s, _)| (n, s)));
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!("{name}: expected {shape:?}, found {:?}", t.shape())))
                }
                None => return Err(Error::Data(format!("checkpoint lacks {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        let providers = load_providers(&config)?;
        Ok(Self {
            config,
            params,
            providers,
        })
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.keys().filter(|k| !is_frozen(k)).cloned().collect()
    }

    pub fn frozen_params(&self) -> ParamStore {
        self.params
            .iter()
            .filter(|(k, _)| is_frozen(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        container::save(&self.params, path)
    }

    pub fn load(config: ModelConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(config, container::load(path)?)
    }

    /// Records a forward pass over `samples`.
    pub fn graph(&self, samples: &[Sample], mode: GradMode, masking: Masking) -> Result<Graph> {
        if samples.is_empty() {
            return Err(Error::Data("forward pass over an empty batch".into()));
        }
        let cfg = &self.config;
        let caps = cfg.caps;
        let bn = samples.len();
        let mut tape = Tape::new();
        let params = bind(&mut tape, &self.params, |k| mode == GradMode::Train && !is_frozen(k));
        let p = |k: &str| params[k];
        let images: Vec<&GrayImage> = samples.iter().map(|s| s.image).collect();
        let input = tape.leaf(image_batch(&images, cfg.input_size)?, mode == GradMode::Explain);
        let mut layers = BTreeMap::new();
        let grid = cfg.grid();

        let mut maps = Vec::new();
        for prov in &self.providers {
            let fm = match prov {
                FeatureProvider::Cnn => {
                    let h = tape.conv2d(input, p("cnn.conv1.w"), Some(p("cnn.conv1.b")), 1, 1)?;
                    let h = tape.swish(h);
                    let h = tape.max_pool2d(h, 2)?;
                    let h = tape.conv2d(h, p("cnn.conv2.w"), Some(p("cnn.conv2.b")), 1, 1)?;
                    let h = tape.swish(h);
                    layers.insert(prov.last_layer(), h);
                    tape.max_pool2d(h, 2)?
                }
                FeatureProvider::Encoder => {
                    let z = *encode_layers(&mut tape, &params, input)?.last().expect("four layers");
                    layers.insert(prov.last_layer(), z);
                    z
                }
                FeatureProvider::Sidecar {
                    name,
                    features,
                    channels,
                    size,
                } => {
                    let mut data = Vec::with_capacity(bn * channels * size * size);
                    for s in samples {
                        let t = features.get(s.id).ok_or_else(|| {
                            Error::Data(format!("sidecar {name} has no features for sample '{}'", s.id))
                        })?;
                        if t.shape() != [*channels, *size, *size] {
                            return Err(Error::shape(format!(
                                "sidecar {name} entry '{}' is {:?}, expected [{channels}, {size}, {size}]",
                                s.id,
                                t.shape()
                            )));
                        }
                        data.extend_from_slice(t.data());
                    }
                    let t = Tensor::new(&[bn, *channels, *size, *size], data)?;
                    let v = tape.leaf(t, mode == GradMode::Explain);
                    layers.insert(prov.last_layer(), v);
                    v
                }
            };
            maps.push(align(&mut tape, fm, grid, prov.name())?);
        }

        let fused = if maps.len() == 1 { maps[0] } else { tape.concat(&maps, 1)? };
        let h = tape.conv2d(fused, p("fusion.w"), Some(p("fusion.b")), 1, 1)?;
        let h = tape.swish(h);
        layers.insert("fusion".into(), h);
        let h = tape.max_pool2d(h, 2)?;
        let h = tape.flatten(h)?;
        let mut h = tape.dense(h, p("dense.w"), Some(p("dense.b")))?;
        if let Some(&proj) = params.get("proj.w") {
            h = tape.dense(h, proj, None)?;
        }
        let u = tape.reshape(h, &[bn, caps.m, caps.d1])?;
        let u = tape.squash(u)?;
        let uhat = tape.capsule_predict(u, p("caps.w"))?;
        let (v, couplings) = route(&mut tape, uhat, caps.routing_iters)?;
        let norms = tape.norm_last(v)?;
        let probs = tape.softmax(norms, 1)?;

        let idx: Vec<usize> = match masking {
            Masking::Teacher(labels) => {
                if labels.len() != bn {
                    return Err(Error::shape(format!("{} labels for {bn} samples", labels.len())));
                }
                labels.to_vec()
            }
            Masking::Winner => tape.value(probs).data().chunks(caps.n).map(argmax).collect(),
        };
        let masked = tape.select_capsule(v, &idx)?;
        let z = tape.dense(masked, p("bridge.w"), Some(p("bridge.b")))?;
        let ls = cfg.autoencoder.latent_size();
        let z = tape.reshape(z, &[bn, cfg.autoencoder.latent_channels(), ls, ls])?;
        let recon = decode(&mut tape, &params, z)?;

        Ok(Graph {
            tape,
            params,
            input,
            layers,
            v,
            norms,
            probs,
            recon,
            couplings,
        })
    }

    /// Inference over a batch.
    pub fn forward(&self, samples: &[Sample]) -> Result<Vec<ForwardOutput>> {
        let g = self.graph(samples, GradMode::None, Masking::Winner)?;
        let (n, d2) = (self.config.caps.n, self.config.caps.d2);
        let s = self.config.input_size;
        let probs = g.tape.value(g.probs).data();
        let v = g.tape.value(g.v).data();
        let rec = g.tape.value(g.recon).data();
        (0..samples.len())
            .map(|b| {
                Ok(ForwardOutput {
                    probs: Tensor::new(&[n], probs[b * n..(b + 1) * n].to_vec())?,
                    v: Tensor::new(&[n, d2], v[b * n * d2..(b + 1) * n * d2].to_vec())?,
                    reconstruction: GrayImage::from_fn(s, s, |x, y| rec[b * s * s + y * s + x]),
                })
            })
            .collect()
    }

    /// Reconstruction from an already masked capsule `[d2]`.
    pub fn reconstruct(&self, masked: &Tensor) -> Result<GrayImage> {
        let d2 = self.config.caps.d2;
        if masked.len() != d2 {
            return Err(Error::shape(format!("masked capsule must have {d2} values")));
        }
        let mut tape = Tape::new();
        let params = bind(&mut tape, &self.params, |_| false);
        let m = tape.constant(masked.clone().reshape(&[1, d2])?);
        let z = tape.dense(m, params["bridge.w"], Some(params["bridge.b"]))?;
        let ls = self.config.autoencoder.latent_size();
        let z = tape.reshape(z, &[1, self.config.autoencoder.latent_channels(), ls, ls])?;
        let y = decode(&mut tape, &params, z)?;
        let s = self.config.input_size;
        let d = tape.value(y).data();
        Ok(GrayImage::from_fn(s, s, |x, yy| d[yy * s + x]))
    }
}

/// Brings a feature map to the `grid x grid` fusion resolution by an integer
/// upsampling or average-pooling factor.
fn align(tape: &mut Tape, v: Var, grid: usize, who: &str) -> Result<Var> {
    let s = tape.value(v).shape().to_vec();
    let (h, w) = (s[2], s[3]);
    if h != w {
        return Err(Error::shape(format!("{who} features are not square: {h}x{w}")));
    }
    if h == grid {
        Ok(v)
    } else if grid % h == 0 {
        tape.upsample2d(v, grid / h)
    } else if h % grid == 0 {
        tape.avg_pool2d(v, h / grid)
    } else {
        Err(Error::shape(format!(
            "{who} features are {h}x{h}, not an integer factor of the {grid}x{grid} fusion grid"
        )))
    }
}

fn load_providers(config: &ModelConfig) -> Result<Vec<FeatureProvider>> {
    config
        .providers
        .iter()
        .map(|p| {
            Ok(match p {
                ProviderSpec::Cnn { .. } => FeatureProvider::Cnn,
                ProviderSpec::Encoder => FeatureProvider::Encoder,
                ProviderSpec::Sidecar {
                    name,
                    path,
                    channels,
                    size,
                } => FeatureProvider::Sidecar {
                    name: name.clone(),
                    features: container::load(path)?,
                    channels: *channels,
                    size: *size,
                },
            })
        })
        .collect()
}

/// Single-image inference.
pub fn paxnet_forward(model: &PaXNetModel, tooth: &GrayImage) -> Result<ForwardOutput> {
    Ok(model
        .forward(&[Sample::anonymous(tooth)])?
        .pop()
        .expect("one sample in, one out"))
}
