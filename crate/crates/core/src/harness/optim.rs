//! AdamW with linear warmup and cosine decay.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::graph::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid_config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid_config(format!("beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup` steps, then half-cosine to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        Self {
            base_lr,
            total_steps,
            warmup_steps: (total_steps as f64 * warmup_fraction).round() as u64,
        }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam. Moments are kept for every parameter;
/// parameters without a gradient in a step are left untouched, including
/// their decay and step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
    /// Updates applied to each parameter, for bias correction.
    pub steps: Vec<u64>,
    decay: Vec<bool>,
}

/// Only matrix weights of linear layers decay; layer-norm gains are also
/// named `.weight` but are a single row.
pub fn decays(name: &str, value: &Array2<f32>) -> bool {
    name.ends_with(".weight") && value.nrows() > 1
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, _, p)| Array2::zeros(p.raw_dim())).collect::<Vec<_>>();
        Ok(Self {
            m: zeros(),
            v: zeros(),
            steps: vec![0; params.len()],
            decay: params.iter().map(|(_, name, p)| decays(name, p)).collect(),
            config,
        })
    }

    /// One update at learning rate `lr` with per-parameter gradients
    /// (indexed like the store).
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Array2<f32>>], lr: f64) {
        let c = &self.config;
        let ids: Vec<ParamId> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let step_size = (lr / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let eps = c.eps as f32;
            let shrink = if self.decay[i] {
                1.0 - (lr * c.weight_decay) as f32
            } else {
                1.0
            };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * shrink - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            });
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Array2<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}
