//! AdamW with decoupled weight decay and per-prefix learning-rate multipliers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters whose name starts with a key have their step scaled by the value.
    pub lr_multipliers: BTreeMap<String, f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_multipliers: BTreeMap::new(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("AdamW needs lr >= 0 and betas in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("AdamW needs eps > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }

    fn multiplier(&self, name: &str) -> f64 {
        self.lr_multipliers
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, &m)| m)
            .unwrap_or(1.0)
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamWState {
    /// Apply one update. Parameters absent from `grads` are left untouched.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamWConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let lr = cfg.lr * cfg.multiplier(name);
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown parameter {name:?}")))?;
            p.check_same_shape(g, name)?;
            if lr == 0.0 {
                continue;
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(&[3], 0.5));
        let before = p.clone();
        let grads = [("w".to_string(), Tensor::full(&[3], 2.0))].into_iter().collect();
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        AdamWState::default().update(&mut p, &grads, &cfg).unwrap();
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("enc.w", Tensor::full(&[1], 0.0));
        p.insert("dec.w", Tensor::full(&[1], 0.0));
        let grads = [
            ("enc.w".to_string(), Tensor::full(&[1], 3.0)),
            ("dec.w".to_string(), Tensor::full(&[1], 3.0)),
        ]
        .into_iter()
        .collect();
        let mut cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        cfg.lr_multipliers.insert("enc.".into(), 0.01);
        AdamWState::default().update(&mut p, &grads, &cfg).unwrap();
        assert!((p.get("dec.w").unwrap().data()[0] + 0.1).abs() < 1e-6);
        assert!((p.get("enc.w").unwrap().data()[0] + 0.001).abs() < 1e-7);
    }
}
