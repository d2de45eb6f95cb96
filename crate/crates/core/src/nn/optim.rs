use std::f64::consts::PI;

use super::ParamStore;
use crate::error::{config_err, Error, Result};

/// Linear warm-up to `base` over `warmup` steps, then cosine decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (PI * t).cos())
    }
}

/// Accumulates per-parameter gradients over a mini-batch.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
    count: usize,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            count: 0,
        }
    }

    pub fn accumulate(&mut self, grads: &[Vec<f64>]) {
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient over the accumulated samples; the buffer is cleared.
    pub fn take_mean(&mut self) -> Vec<Vec<f64>> {
        let n = self.count.max(1) as f64;
        let out = self
            .grads
            .iter_mut()
            .map(|g| {
                let mean = g.iter().map(|v| v / n).collect();
                g.fill(0.0);
                mean
            })
            .collect();
        self.count = 0;
        out
    }
}

/// SGD with heavy-ball momentum and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, clip_norm: Option<f64>) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(config_err!("momentum {momentum} outside [0, 1)"));
        }
        Ok(Self {
            momentum,
            clip_norm,
            velocity: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        })
    }

    /// Applies one update. Only parameters flagged in `mask` (all if `None`) move.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Vec<f64>],
        lr: f64,
        mask: Option<&[bool]>,
    ) -> Result<()> {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm {norm}")));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (i, (t, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let vel = &mut self.velocity[i];
            for ((w, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = self.momentum * *v + g * scale;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}
