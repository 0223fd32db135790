use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{read_blob, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Frozen parameters are never touched, even if a
/// gradient for them is supplied.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the ids that changed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Vec<ParamId> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut ids: Vec<_> = grads.ids().collect();
        ids.sort();
        let mut touched = Vec::new();
        for id in ids {
            if store.get(id).frozen {
                continue;
            }
            let g = grads.get(id).expect("listed id");
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(id);
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
            touched.push(id);
        }
        touched
    }

    /// Persists moments keyed by parameter name, plus the step counter.
    pub fn save(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let mut tmp = ParamStore::new();
        tmp.insert("__step", Tensor::scalar(self.step as f64))?;
        for (id, (m, v)) in &self.moments {
            let name = &store.get(*id).name;
            tmp.insert(format!("m:{name}"), m.clone())?;
            tmp.insert(format!("v:{name}"), v.clone())?;
        }
        tmp.save_blob("", path)
    }

    pub fn load(config: AdamConfig, store: &ParamStore, path: &Path) -> Result<Self> {
        let mut opt = Self::new(config);
        let mut m_by_name = BTreeMap::new();
        let mut v_by_name = BTreeMap::new();
        for (name, t) in read_blob(path)? {
            if name == "__step" {
                opt.step = t.data()[0] as u64;
            } else if let Some(n) = name.strip_prefix("m:") {
                m_by_name.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("v:") {
                v_by_name.insert(n.to_string(), t);
            }
        }
        for (name, m) in m_by_name {
            let v = v_by_name
                .remove(&name)
                .ok_or_else(|| Error::Integrity(format!("optimizer state missing second moment for `{name}`")))?;
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Integrity(format!("optimizer state names unknown parameter `{name}`")))?;
            opt.moments.insert(id, (m, v));
        }
        Ok(opt)
    }
}
