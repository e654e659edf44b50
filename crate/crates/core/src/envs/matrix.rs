use std::path::Path;

use super::{check_actions, Env, EnvSpec, Observation, StepResult};
use crate::error::{Error, Result};

/// Team payoff over joint actions, stored row-major with agent 0 outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl PayoffTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config("payoff shape must be non-empty and positive".into()));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Config(format!(
                "payoff has {} entries but shape {:?}",
                values.len(),
                shape
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("payoff"));
        }
        Ok(Self { shape, values })
    }

    /// Two agents, three actions: optimum 8 at (0, 0) surrounded by heavy
    /// miscoordination penalties, with a safe suboptimal region around (2, 2).
    pub fn default_coordination() -> Self {
        Self {
            shape: vec![3, 3],
            values: vec![8.0, -12.0, -12.0, -12.0, 0.0, 0.0, -12.0, 0.0, 6.0],
        }
    }

    /// One payoff row per line, comma separated; blank lines and `#` comments
    /// are skipped. Produces a two-agent matrix.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!("payoff csv line {}: bad number `{}`", lineno + 1, c.trim()))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Config(format!("payoff csv line {}: ragged row", lineno + 1)));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Config("payoff csv is empty".into()));
        }
        let shape = vec![rows.len(), rows[0].len()];
        Self::new(shape, rows.concat())
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn n_agents(&self) -> usize {
        self.shape.len()
    }

    pub fn get(&self, joint: &[usize]) -> f64 {
        let mut idx = 0;
        for (a, s) in joint.iter().zip(&self.shape) {
            idx = idx * s + a;
        }
        self.values[idx]
    }
}

/// Exhaustive maximum over joint actions; the first joint action in
/// lexicographic order wins ties.
pub fn optimal_matrix_return(payoff: &PayoffTensor) -> (f64, Vec<usize>) {
    let n = payoff.shape.len();
    let mut best = (f64::NEG_INFINITY, vec![0; n]);
    for flat in 0..payoff.values.len() {
        let mut joint = vec![0; n];
        let mut rem = flat;
        for i in (0..n).rev() {
            joint[i] = rem % payoff.shape[i];
            rem /= payoff.shape[i];
        }
        let v = payoff.get(&joint);
        if v > best.0 {
            best = (v, joint);
        }
    }
    best
}

/// Stateless one-shot coordination game.
pub struct CooperativeMatrixGame {
    spec: EnvSpec,
    payoff: PayoffTensor,
    optimum: f64,
    done: bool,
}

impl CooperativeMatrixGame {
    pub fn new(payoff: PayoffTensor) -> Self {
        // every agent gets the largest action count; shorter axes are masked
        let n_actions = *payoff.shape.iter().max().unwrap();
        let optimum = optimal_matrix_return(&payoff).0;
        Self {
            spec: EnvSpec {
                name: "matrix".into(),
                n_agents: payoff.n_agents(),
                n_actions,
                obs_dim: 1,
                state_dim: 1,
                episode_limit: 1,
            },
            payoff,
            optimum,
            done: false,
        }
    }

    pub fn payoff(&self) -> &PayoffTensor {
        &self.payoff
    }

    fn avail(&self) -> Vec<Vec<bool>> {
        self.payoff
            .shape
            .iter()
            .map(|&s| (0..self.spec.n_actions).map(|a| a < s).collect())
            .collect()
    }

    fn observation(&self) -> Observation {
        Observation {
            obs: vec![vec![1.0]; self.spec.n_agents],
            state: vec![if self.done { 1.0 } else { 0.0 }],
            avail: self.avail(),
        }
    }
}

impl Env for CooperativeMatrixGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        self.done = false;
        self.observation()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EnvContract("matrix: step after termination".into()));
        }
        check_actions(&self.spec, &self.avail(), actions)?;
        let reward = self.payoff.get(actions);
        self.done = true;
        let o = self.observation();
        Ok(StepResult {
            obs: o.obs,
            state: o.state,
            avail: o.avail,
            reward,
            terminated: true,
            success: reward >= self.optimum,
        })
    }
}
