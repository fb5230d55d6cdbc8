//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter. Per parameter:
    /// `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step. A missing
    /// gradient counts as zero. Any non-finite gradient rejects the whole
    /// step before touching the parameters.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((id, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient of {} has shape {:?}, parameter {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if p.trainable && !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} (param {}) at step {}",
                        p.name,
                        id.0,
                        self.step + 1
                    )));
                }
            }
        }
        self.moments.resize_with(store.len(), || None);
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let n = store.value(id).len();
            let mom = self.moments[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let g = grads[id.0].as_ref().map(|g| g.data());
            let theta = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                let mut th = theta[i].as_f64();
                th -= c.lr * c.weight_decay * th;
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                th -= c.lr * mhat / (vhat.sqrt() + c.eps);
                theta[i] = T::lit(th);
            }
        }
        Ok(())
    }
}
