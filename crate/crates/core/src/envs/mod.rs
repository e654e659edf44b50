//! Cooperative Dec-POMDP environments.
//!
//! Every environment hands out one local observation per agent, a global
//! state for centralized training, availability masks and a single team
//! reward. All emitted vectors lie in `[0, 1]`.

mod grid;
mod matrix;
mod memory;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use grid::{greedy_chase_baseline, PredatorPreyGrid};
pub use matrix::{optimal_matrix_return, CooperativeMatrixGame, PayoffTensor};
pub use memory::MemoryRecallGame;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
}

/// What the agents and the learner see after a reset or a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub avail: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub avail: Vec<Vec<bool>>,
    pub reward: f64,
    pub terminated: bool,
    /// Task solved on this step (optimal payoff, all recalled, prey caught).
    pub success: bool,
}

impl StepResult {
    pub fn observation(&self) -> Observation {
        Observation {
            obs: self.obs.clone(),
            state: self.state.clone(),
            avail: self.avail.clone(),
        }
    }
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Deterministic initial condition for `seed`.
    fn reset(&mut self, seed: u64) -> Observation;

    /// Advances one step. Unavailable actions are a contract violation.
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
}

pub(crate) fn check_actions(spec: &EnvSpec, avail: &[Vec<bool>], actions: &[usize]) -> Result<()> {
    if actions.len() != spec.n_agents {
        return Err(Error::EnvContract(format!(
            "{}: expected {} actions, got {}",
            spec.name,
            spec.n_agents,
            actions.len()
        )));
    }
    for (i, &a) in actions.iter().enumerate() {
        if a >= spec.n_actions || !avail[i][a] {
            return Err(Error::EnvContract(format!(
                "{}: action {a} not available to agent {i}",
                spec.name
            )));
        }
    }
    Ok(())
}

/// Environment selector as written in configs and on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvChoice {
    Matrix(PayoffTensor),
    Memory,
    Grid,
}

impl EnvChoice {
    /// Resolves a name; `payoff_csv` optionally replaces the matrix payoff.
    pub fn from_name(name: &str, payoff_csv: Option<&Path>) -> Result<Self> {
        match name {
            "matrix" => Ok(EnvChoice::Matrix(match payoff_csv {
                Some(p) => PayoffTensor::from_csv_file(p)?,
                None => PayoffTensor::default_coordination(),
            })),
            "memory" => Ok(EnvChoice::Memory),
            "grid" | "predator_prey" => Ok(EnvChoice::Grid),
            _ => Err(Error::Config(format!(
                "unknown env `{name}` (expected matrix, memory or grid)"
            ))),
        }
    }

    pub fn make(&self) -> Box<dyn Env> {
        match self {
            EnvChoice::Matrix(p) => Box::new(CooperativeMatrixGame::new(p.clone())),
            EnvChoice::Memory => Box::new(MemoryRecallGame::new()),
            EnvChoice::Grid => Box::new(PredatorPreyGrid::new()),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        self.make().spec().clone()
    }
}
