//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::{ParamGroup, ParamStore};

/// Peak learning rates per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub heads: f64,
    pub encoder: f64,
}

impl LearningRates {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            heads: self.heads * factor,
            encoder: self.encoder * factor,
        }
    }

    fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Heads => self.heads,
        }
    }
}

/// Linear warmup from 0 to 1 over the first `warmup_steps`, then cosine
/// decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn new(total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as usize;
        Self {
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return 1.0;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .entries()
        .iter()
        .flat_map(|e| e.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for e in store.entries_mut() {
            e.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
        }
    }
}

impl AdamW {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the accumulated gradients, which are cleared
    /// afterwards. Weight decay applies to matrices only (rank ≥ 2).
    pub fn step(&mut self, store: &mut ParamStore, lr: &LearningRates, weight_decay: f64) -> Result<()> {
        if let Some(e) = store
            .entries()
            .iter()
            .find(|e| e.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(e.name.clone()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for e in store.entries_mut() {
            let rate = lr.for_group(e.group);
            let decay = if e.value.shape().len() >= 2 { weight_decay } else { 0.0 };
            let values = e.value.data_mut();
            for i in 0..values.len() {
                let g = e.grad[i];
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g;
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                values[i] -= rate * (mhat / (vhat.sqrt() + self.eps) + decay * values[i]);
                e.grad[i] = 0.0;
            }
        }
        Ok(())
    }
}
