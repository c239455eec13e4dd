//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grads, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0f32; p.numel()]).collect();
        Self { config, t: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.data.len() != store.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.data.len(), store.len())));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = c.lr / bc1;
        for (k, (_, p)) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.data[k]);
            for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                let gi = gi as f64;
                let mn = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                *w = (*w as f64 - step * mn / ((vn / bc2).sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`adam.m.<param>`, `adam.v.<param>`).
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (kind, bufs) in [("m", &self.m), ("v", &self.v)] {
            for ((name, p), b) in store.iter().zip(bufs) {
                out.push((format!("adam.{kind}.{name}"), Tensor::new(p.shape().to_vec(), b.clone()).expect("shape matches")));
            }
        }
        out
    }

    pub fn from_state(config: AdamConfig, t: u64, store: &ParamStore, lookup: impl Fn(&str) -> Option<Tensor<f32>>) -> Result<Self> {
        let mut adam = Self::new(config, store);
        adam.t = t;
        for (kind, bufs) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            for ((name, p), b) in store.iter().zip(bufs.iter_mut()) {
                let key = format!("adam.{kind}.{name}");
                let t = lookup(&key).ok_or_else(|| Error::Contract(format!("checkpoint lacks optimizer state {key}")))?;
                if t.shape() != p.shape() {
                    return Err(Error::Dimension(format!("optimizer state {key} has shape {:?}", t.shape())));
                }
                *b = t.into_data();
            }
        }
        Ok(adam)
    }
}
