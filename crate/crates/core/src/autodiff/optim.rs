use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.len() {
        return Err(Error::shape(format!(
            "adam: param {:?}, grad {:?}, state {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a [`ParamStore`], with moments keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient; others are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
            let st = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p.len()));
            adam_step(p, g, st, lr, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3);
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_formula() {
        let cfg = AdamConfig::default();
        let g = Tensor::new(&[3], vec![0.3, -2.0, 1e-3]).unwrap();
        let mut p = Tensor::zeros(&[3]);
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
        for (dp, gv) in p.data().iter().zip(g.data()) {
            let want = -0.01 * gv / (gv.abs() + cfg.eps);
            assert!((dp - want).abs() < 1e-15, "{dp} vs {want}");
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig::default();
        let g = Tensor::filled(&[1], 0.7);
        let mut p = Tensor::zeros(&[1]);
        let mut st = AdamState::new(1);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut p, &g, &mut st, 1e-3, &cfg).unwrap();
            step = prev - p.data()[0];
            prev = p.data()[0];
        }
        assert!((step - 1e-3).abs() < 1e-9, "{step}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, 0.1, &AdamConfig::default()).is_err());
    }
}
