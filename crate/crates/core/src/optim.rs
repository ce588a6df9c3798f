//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::model::OPTIMIZER_PREFIX;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `min + (max - min) (1 + cos(pi t / total)) / 2`, clamped at `t = total`.
pub fn cosine_lr(step: usize, total: usize, max_lr: f64, min_lr: f64) -> f64 {
    if total == 0 {
        return max_lr;
    }
    let t = step.min(total) as f64 / total as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: AdamWConfig,
    /// Updates applied so far.
    pub steps: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, hp: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { hp, steps: 0, m: zeros(), v: zeros() }
    }

    /// One update. Decay applies to matrices and kernels only, not to biases,
    /// norm scales or shift gates.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim("AdamW::step", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.steps += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.hp;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let decay = if store.get(id).rank() >= 2 { weight_decay } else { 0.0 };
            g.same_shape("AdamW::step", store.get(id))?;
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let pi = p[i] as f64;
                let update = (mi / c1) / ((vi / c2).sqrt() + eps) + decay * pi;
                p[i] = (pi - lr * update) as f32;
            }
        }
        Ok(())
    }

    /// Moment records named after their parameters.
    pub fn records(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        let m = names.iter().zip(&self.m).map(|(n, t)| (format!("{OPTIMIZER_PREFIX}m/{n}"), t.clone()));
        let v = names.iter().zip(&self.v).map(|(n, t)| (format!("{OPTIMIZER_PREFIX}v/{n}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn restore(store: &ParamStore<f32>, hp: AdamWConfig, steps: u64, ck: &Checkpoint) -> Result<Self> {
        let load = |kind: &str| -> Result<Vec<Tensor<f32>>> {
            store
                .iter()
                .map(|(n, p)| {
                    let key = format!("{OPTIMIZER_PREFIX}{kind}/{n}");
                    let t = ck
                        .get(&key)
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer record {key}")))?;
                    t.same_shape("AdamW::restore", p)?;
                    Ok(t.clone())
                })
                .collect()
        };
        Ok(Self { hp, steps, m: load("m")?, v: load("v")? })
    }
}
