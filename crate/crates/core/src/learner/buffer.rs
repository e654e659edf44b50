use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;

use crate::envs::EnvSpec;
use crate::error::{Error, Result};

/// One recorded episode of `T` steps.
///
/// Observation-side arrays hold `T + 1` entries: index `t` is what the agents
/// saw before acting at step `t`, and index `T` is the final observation used
/// for bootstrapping when the episode was cut off by the step limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub obs: Vec<Vec<Vec<f64>>>,
    pub state: Vec<Vec<f64>>,
    pub avail: Vec<Vec<Vec<bool>>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self, spec: &EnvSpec) -> Result<()> {
        let t = self.len();
        let bad = |msg: String| Err(Error::Episode(msg));
        if t == 0 {
            return bad("episode has no steps".into());
        }
        if self.obs.len() != t + 1 || self.state.len() != t + 1 || self.avail.len() != t + 1 {
            return bad(format!("observation arrays must have {} entries", t + 1));
        }
        if self.rewards.len() != t || self.terminated.len() != t {
            return bad(format!("reward/termination arrays must have {t} entries"));
        }
        for step in 0..=t {
            if self.obs[step].len() != spec.n_agents
                || self.obs[step].iter().any(|o| o.len() != spec.obs_dim || o.iter().any(|v| !v.is_finite()))
            {
                return bad(format!("step {step}: observation shape or value"));
            }
            if self.state[step].len() != spec.state_dim || self.state[step].iter().any(|v| !v.is_finite()) {
                return bad(format!("step {step}: state shape or value"));
            }
            if self.avail[step].len() != spec.n_agents || self.avail[step].iter().any(|a| a.len() != spec.n_actions) {
                return bad(format!("step {step}: availability shape"));
            }
        }
        for step in 0..t {
            if self.actions[step].len() != spec.n_agents {
                return bad(format!("step {step}: action count"));
            }
            for (i, &a) in self.actions[step].iter().enumerate() {
                if a >= spec.n_actions || !self.avail[step][i][a] {
                    return bad(format!("step {step}: agent {i} took unavailable action {a}"));
                }
            }
            if !self.rewards[step].is_finite() {
                return bad(format!("step {step}: non-finite reward"));
            }
            if self.terminated[step] && step + 1 != t {
                return bad(format!("step {step}: termination before the last step"));
            }
        }
        Ok(())
    }
}

/// Episodes padded to a common length. `filled[b][t]` marks real steps and is
/// always a prefix mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
    pub t_max: usize,
    pub filled: Vec<Vec<bool>>,
}

impl EpisodeBatch {
    pub fn new(episodes: Vec<Episode>) -> Self {
        let t_max = episodes.iter().map(Episode::len).max().unwrap_or(0);
        Self::padded(episodes, t_max)
    }

    /// Pads every episode to `t_max` steps with empty, unfilled entries.
    pub fn padded(episodes: Vec<Episode>, t_max: usize) -> Self {
        let filled = episodes
            .iter()
            .map(|ep| (0..t_max).map(|t| t < ep.len()).collect())
            .collect();
        let episodes = episodes
            .into_iter()
            .map(|mut ep| {
                let n = ep.obs[0].len();
                let obs_dim = ep.obs[0][0].len();
                let state_dim = ep.state[0].len();
                let n_actions = ep.avail[0][0].len();
                while ep.len() < t_max {
                    ep.obs.push(vec![vec![0.0; obs_dim]; n]);
                    ep.state.push(vec![0.0; state_dim]);
                    ep.avail.push(vec![vec![false; n_actions]; n]);
                    ep.actions.push(vec![0; n]);
                    ep.rewards.push(0.0);
                    ep.terminated.push(false);
                }
                ep
            })
            .collect();
        Self {
            episodes,
            t_max,
            filled,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Number of real steps in episode `b`.
    pub fn filled_len(&self, b: usize) -> usize {
        self.filled[b].iter().take_while(|&&f| f).count()
    }

    pub fn total_filled(&self) -> usize {
        (0..self.len()).map(|b| self.filled_len(b)).sum()
    }
}

/// FIFO episode replay.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    spec: EnvSpec,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, spec: EnvSpec) -> Self {
        Self {
            capacity,
            spec,
            episodes: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push_episode(&mut self, episode: Episode) -> Result<()> {
        episode.validate(&self.spec)?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Uniform sample of `batch_size` distinct episodes.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<EpisodeBatch> {
        if batch_size > self.episodes.len() {
            return Err(Error::Usage("replay buffer holds fewer episodes than the batch size"));
        }
        let mut idx = sample(rng, self.episodes.len(), batch_size).into_vec();
        idx.sort_unstable();
        Ok(EpisodeBatch::new(idx.into_iter().map(|i| self.episodes[i].clone()).collect()))
    }
}
