use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, Env, EnvSpec, Observation, StepResult};
use crate::error::{Error, Result};

const HORIZON: usize = 3;

/// Each agent sees a private bit at the first step only and must report it at
/// the last step. Intermediate steps allow only the no-op action, so the
/// previous action carries no information and the bit has to be remembered.
///
/// Observation: `[bit == 0, bit == 1, t / HORIZON]`, with the bit features
/// zeroed after the first step. Reward at the last step is the number of
/// agents that reported their own bit.
pub struct MemoryRecallGame {
    spec: EnvSpec,
    signals: Vec<usize>,
    t: usize,
}

impl Default for MemoryRecallGame {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryRecallGame {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "memory".into(),
                n_agents: 2,
                n_actions: 2,
                obs_dim: 3,
                state_dim: 3,
                episode_limit: HORIZON,
            },
            signals: vec![0; 2],
            t: 0,
        }
    }

    pub fn signals(&self) -> &[usize] {
        &self.signals
    }

    fn observation(&self) -> Observation {
        let clock = self.t as f64 / HORIZON as f64;
        let obs = self
            .signals
            .iter()
            .map(|&s| {
                let mut o = vec![0.0, 0.0, clock];
                if self.t == 0 {
                    o[s] = 1.0;
                }
                o
            })
            .collect();
        let mut state: Vec<f64> = self.signals.iter().map(|&s| s as f64).collect();
        state.push(clock);
        let last = self.t + 1 == HORIZON;
        Observation {
            obs,
            state,
            avail: vec![vec![true, last]; self.spec.n_agents],
        }
    }
}

impl Env for MemoryRecallGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.signals = (0..self.spec.n_agents).map(|_| rng.gen_range(0..2)).collect();
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.t >= HORIZON {
            return Err(Error::EnvContract("memory: step after termination".into()));
        }
        check_actions(&self.spec, &self.observation().avail, actions)?;
        let last = self.t + 1 == HORIZON;
        let reward = if last {
            actions.iter().zip(&self.signals).filter(|(a, s)| a == s).count() as f64
        } else {
            0.0
        };
        self.t += 1;
        let mut o = self.observation();
        if last {
            o.avail = vec![vec![true, false]; self.spec.n_agents];
        }
        Ok(StepResult {
            obs: o.obs,
            state: o.state,
            avail: o.avail,
            reward,
            terminated: last,
            success: last && reward == self.spec.n_agents as f64,
        })
    }
}
