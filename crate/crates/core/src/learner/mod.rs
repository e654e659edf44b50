//! Centralized training: replay, TD targets, BPTT loss, optimizer and the
//! rollout/evaluate/train loop.

pub mod buffer;
pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::agent::AgentKind;
use crate::error::{Error, Result};
use crate::mixer::MixerMode;

pub use buffer::{Episode, EpisodeBatch, ReplayBuffer};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use loss::{loss_and_grads, td_targets, TdTargets};
pub use optim::{EpsilonSchedule, RmsProp, StepInfo};
pub use train::{evaluate, rollout, run_training, CurveRow, EvalSummary, TrainOutcome};

/// Training hyperparameters. Defaults follow the usual value-based
/// multi-agent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_update_episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: u64,
    pub depth_agent: usize,
    pub depth_mix: usize,
    pub h_agent: usize,
    pub h_mix: usize,
    /// `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Environment steps to train for.
    pub total_steps: u64,
    pub eval_cycle: u64,
    pub eval_episodes: usize,
    /// Gradient steps per collected episode.
    pub updates_per_episode: usize,
    pub mixer: MixerMode,
    pub agent_kind: AgentKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 0.0005,
            batch_size: 32,
            buffer_capacity: 5000,
            target_update_episodes: 200,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 50_000,
            depth_agent: 3,
            depth_mix: 3,
            h_agent: 32,
            h_mix: 16,
            grad_clip_norm: Some(10.0),
            seed: 0,
            total_steps: 2_000_000,
            eval_cycle: 5000,
            eval_episodes: 32,
            updates_per_episode: 1,
            mixer: MixerMode::Mixrts,
            agent_kind: AgentKind::Rtc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{k}: {why}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.eps_end) || !(0.0..=1.0).contains(&self.eps_start) {
            return bad("eps_start", "epsilon values must lie in [0, 1]");
        }
        if self.eps_end > self.eps_start {
            return bad("eps_end", "must not exceed eps_start");
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("target_update_episodes", self.target_update_episodes),
            ("depth_agent", self.depth_agent),
            ("depth_mix", self.depth_mix),
            ("h_agent", self.h_agent),
            ("h_mix", self.h_mix),
            ("eval_cycle", self.eval_cycle as usize),
            ("eval_episodes", self.eval_episodes),
            ("updates_per_episode", self.updates_per_episode),
            ("eps_anneal_steps", self.eps_anneal_steps as usize),
        ] {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        if self.batch_size > self.buffer_capacity {
            return bad("batch_size", "must not exceed buffer_capacity");
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad("grad_clip_norm", "must be positive or none");
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule { start: self.eps_start, end: self.eps_end, anneal_steps: self.eps_anneal_steps }
    }
}
