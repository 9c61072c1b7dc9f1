//! Adam with global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step counter and moment buffers, one pair per parameter block.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, blocks: &[&Tensor]) -> Result<Self> {
        let AdamConfig { lr, beta1, beta2, eps } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {beta1} and {beta2}")));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(lr) || !positive(eps) {
            return Err(Error::Config(format!("lr ({lr}) and eps ({eps}) must be positive")));
        }
        Ok(AdamState {
            config,
            t: 0,
            m: blocks.iter().map(|b| vec![0.0; b.numel()]).collect(),
            v: blocks.iter().map(|b| vec![0.0; b.numel()]).collect(),
        })
    }

    pub fn first_moment(&self, block: usize) -> &[f64] {
        &self.m[block]
    }

    pub fn second_moment(&self, block: usize) -> &[f64] {
        &self.v[block]
    }

    /// `lr * sqrt(1 - beta2^t) / (1 - beta1^t)`
    pub fn effective_rate(&self, t: u64) -> f64 {
        effective_rate(&self.config, t)
    }

    /// One update. `grads[i]` must match `params[i]` in length; `names` labels errors.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} moment buffers, {} parameter blocks, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("block {i}"));
            if p.numel() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::InvalidArgument(format!(
                    "adam: `{name}` has {} values but {} gradients",
                    p.numel(),
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let rate = self.effective_rate(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                // m stays exactly 0 under zero gradients, so the update is exactly 0.
                *theta -= rate * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn effective_rate(config: &AdamConfig, t: u64) -> f64 {
    let t = t as i32;
    config.lr * (1.0 - config.beta2.powi(t)).sqrt() / (1.0 - config.beta1.powi(t))
}

pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales every gradient so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().map(Vec::as_slice).collect::<Vec<_>>());
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= scale;
        }
    }
    norm
}
