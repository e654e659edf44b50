use crate::error::{Error, Result};
use crate::params::Parameters;

pub const RMSPROP_DECAY: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// RMSprop with optional global-norm gradient clipping.
///
/// `v = decay * v + (1 - decay) * g^2`, `theta -= lr * g / (sqrt(v) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    square_avg: Vec<f64>,
}

/// What one optimizer step did to the raw gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl RmsProp {
    pub fn new(lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            decay: RMSPROP_DECAY,
            eps: RMSPROP_EPS,
            clip_norm,
            square_avg: Vec::new(),
        }
    }

    pub fn square_avg(&self) -> &[f64] {
        &self.square_avg
    }

    /// Applies one update. A non-finite gradient aborts the step and leaves
    /// both the parameters and the accumulators untouched.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<StepInfo> {
        let mut g = grads.flatten();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut clipped = false;
        if let Some(max) = self.clip_norm {
            if grad_norm > max {
                let s = max / grad_norm;
                g.iter_mut().for_each(|v| *v *= s);
                clipped = true;
            }
        }
        if self.square_avg.len() != g.len() {
            self.square_avg = vec![0.0; g.len()];
        }
        let mut i = 0;
        for t in params.tensors_mut() {
            for p in t.iter_mut() {
                let v = &mut self.square_avg[i];
                *v = self.decay * *v + (1.0 - self.decay) * g[i] * g[i];
                *p -= self.lr * g[i] / (v.sqrt() + self.eps);
                i += 1;
            }
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}

/// Linear annealing from `start` to `end` over `anneal_steps`, flat after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl EpsilonSchedule {
    pub fn epsilon(&self, t: u64) -> f64 {
        if self.anneal_steps == 0 || t >= self.anneal_steps {
            return self.end;
        }
        let frac = t as f64 / self.anneal_steps as f64;
        self.start + frac * (self.end - self.start)
    }
}
