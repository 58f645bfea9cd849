//! Capsule classifier over an ensemble of feature providers.

mod autoencoder;
mod model;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use autoencoder::{train_autoencoder, AeConfig, AeTrainConfig, AutoencoderModel};
pub use model::{
    paxnet_forward, FeatureProvider, ForwardOutput, GradMode, Graph, Masking, ModelConfig, PaXNetModel,
    ProviderSpec, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapsuleLayerSpec {
    /// Primary capsule count.
    pub m: usize,
    /// Primary capsule dimension.
    pub d1: usize,
    /// Class capsule count.
    pub n: usize,
    /// Class capsule dimension.
    pub d2: usize,
    pub routing_iters: usize,
}

impl Default for CapsuleLayerSpec {
    fn default() -> Self {
        Self {
            m: 10,
            d1: 8,
            n: 2,
            d2: 32,
            routing_iters: 3,
        }
    }
}

impl CapsuleLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d1 == 0 || self.n == 0 || self.d2 == 0 {
            return Err(Error::Config("capsule dimensions must be positive".into()));
        }
        if self.routing_iters == 0 {
            return Err(Error::Config("routing_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// `s * |s| / (1 + |s|^2)`; the zero vector maps to itself.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let k = n2.sqrt() / (1.0 + n2);
    s.iter().map(|v| v * k).collect()
}

/// Routing by agreement on a tape. `uhat` is `[N, m, n, d2]`; returns the
/// class capsules `[N, n, d2]` and the coupling coefficients `[N, m, n]` used
/// in each iteration. Logits start at zero on every call and gradients flow
/// through all iterations.
pub fn route(tape: &mut Tape, uhat: Var, iters: usize) -> Result<(Var, Vec<Var>)> {
    if iters == 0 {
        return Err(Error::param("routing needs at least one iteration"));
    }
    let s = tape.value(uhat).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("routing input must be [N, m, n, d2], got {s:?}")));
    }
    let mut b = tape.constant(Tensor::zeros(&s[..3]));
    let mut couplings = Vec::with_capacity(iters);
    let mut v = None;
    for it in 0..iters {
        let c = tape.softmax(b, 2)?;
        couplings.push(c);
        let sj = tape.route_sum(c, uhat)?;
        let vj = tape.squash(sj)?;
        if it + 1 < iters {
            let a = tape.agreement(uhat, vj)?;
            b = tape.add(b, a)?;
        }
        v = Some(vj);
    }
    Ok((v.expect("iters >= 1"), couplings))
}

/// Result of routing one sample.
#[derive(Debug, Clone)]
pub struct Routing {
    /// `[n, d2]`
    pub v: Tensor,
    /// One `[m, n]` coupling matrix per iteration.
    pub couplings: Vec<Tensor>,
}

/// Routing for a single sample's predictions `u_hat[m, n, d2]`.
pub fn dynamic_routing(u_hat: &Tensor, iters: usize) -> Result<Routing> {
    let s = u_hat.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("u_hat must be [m, n, d2], got {s:?}")));
    }
    let mut tape = Tape::new();
    let u = tape.constant(u_hat.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let (v, cs) = route(&mut tape, u, iters)?;
    Ok(Routing {
        v: tape.value(v).clone().reshape(&[s[1], s[2]])?,
        couplings: cs
            .iter()
            .map(|c| tape.value(*c).clone().reshape(&[s[0], s[1]]))
            .collect::<Result<_>>()?,
    })
}

/// Softmax over the capsule norms of `v[n, d2]`.
pub fn class_probabilities(v: &Tensor) -> Result<Tensor> {
    ops::softmax(&ops::norm_last(v)?, 0)
}

/// Index of the largest probability; ties go to the lower index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// The capsule of the winning class, or of `teacher` when given.
pub fn mask_winner(v: &Tensor, probs: &Tensor, teacher: Option<usize>) -> Result<Tensor> {
    let (n, d) = match *v.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape(format!("mask_winner needs [n, d2], got {s:?}"))),
    };
    let j = teacher.unwrap_or_else(|| argmax(probs.data()));
    if j >= n {
        return Err(Error::shape(format!("class {j} out of range for {n} capsules")));
    }
    Tensor::new(&[d], v.data()[j * d..(j + 1) * d].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    /// Multiplies the pixel count to weight the reconstruction MSE.
    pub recon_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            recon_weight: 0.0005,
        }
    }
}

/// Margin loss of one sample from its class-capsule norms.
pub fn margin_loss(norms: &[f64], label: usize, cfg: &LossConfig) -> f64 {
    norms
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            if j == label {
                (cfg.m_plus - l).max(0.0).powi(2)
            } else {
                cfg.lambda * (l - cfg.m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}

/// Margin loss on `v[n, d2]` plus `recon_weight * pixels * MSE(recon, input)`.
pub fn paxnet_loss(v: &Tensor, reconstruction: &Tensor, input: &Tensor, label: usize, cfg: &LossConfig) -> Result<f64> {
    let norms = ops::norm_last(v)?;
    let mse = ops::mse_loss(reconstruction, input)?.item()?;
    Ok(margin_loss(norms.data(), label, cfg) + cfg.recon_weight * input.len() as f64 * mse)
}

/// Batch-mean loss on a tape. `norms` is `[N, n]`, `recon` and `input` are
/// `[N, 1, H, W]`.
pub fn loss_on_tape(
    tape: &mut Tape,
    norms: Var,
    recon: Var,
    input: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let s = tape.value(norms).shape().to_vec();
    let (bn, n) = match s[..] {
        [a, b] if a == labels.len() => (a, b),
        _ => return Err(Error::shape(format!("norms {s:?} vs {} labels", labels.len()))),
    };
    let mut pos_mask = vec![0.0; bn * n];
    let mut neg_mask = vec![cfg.lambda; bn * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::shape(format!("label {y} out of range for {n} classes")));
        }
        pos_mask[i * n + y] = 1.0;
        neg_mask[i * n + y] = 0.0;
    }
    let pos_mask = tape.constant(Tensor::new(&[bn, n], pos_mask)?);
    let neg_mask = tape.constant(Tensor::new(&[bn, n], neg_mask)?);

    let up = tape.affine(norms, -1.0, cfg.m_plus);
    let up = tape.relu(up);
    let up = tape.mul(up, up)?;
    let up = tape.mul(up, pos_mask)?;
    let down = tape.affine(norms, 1.0, -cfg.m_minus);
    let down = tape.relu(down);
    let down = tape.mul(down, down)?;
    let down = tape.mul(down, neg_mask)?;
    let margin = tape.add(up, down)?;
    let margin = tape.sum(margin);
    let margin = tape.scale(margin, 1.0 / bn as f64);

    let pixels: usize = tape.value(input).shape()[1..].iter().product();
    let mse = tape.mse_loss(recon, input)?;
    let mse = tape.scale(mse, cfg.recon_weight * pixels as f64);
    let margin = tape.reshape(margin, &[1])?;
    let mse = tape.reshape(mse, &[1])?;
    let total = tape.add(margin, mse)?;
    Ok(tape.sum(total))
}
