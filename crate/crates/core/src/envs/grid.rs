use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, Env, EnvSpec, Observation, StepResult};
use crate::error::{Error, Result};

const SIZE: i32 = 5;
const N_PREDATORS: usize = 2;
const LIMIT: usize = 20;
const CAPTURE_REWARD: f64 = 10.0;
const STEP_COST: f64 = 0.1;

/// stay, north, south, east, west
const MOVES: [(i32, i32); 5] = [(0, 0), (0, -1), (0, 1), (1, 0), (-1, 0)];

type Pos = (i32, i32);

/// Two predators chase a randomly moving prey on a 5x5 grid.
///
/// Each predator observes a 3x3 egocentric window (one channel for the prey,
/// one for the other predator, row-major with north first) and its own
/// normalized position. A capture happens when a predator shares the prey's
/// cell, either after the predators move or after the prey moves. The team
/// receives +10 on capture and pays 0.1 per step.
pub struct PredatorPreyGrid {
    spec: EnvSpec,
    predators: Vec<Pos>,
    prey: Pos,
    t: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl Default for PredatorPreyGrid {
    fn default() -> Self {
        Self::new()
    }
}

fn clamp_move(p: Pos, action: usize) -> Pos {
    let (dx, dy) = MOVES[action];
    ((p.0 + dx).clamp(0, SIZE - 1), (p.1 + dy).clamp(0, SIZE - 1))
}

fn manhattan(a: Pos, b: Pos) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

impl PredatorPreyGrid {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "grid".into(),
                n_agents: N_PREDATORS,
                n_actions: MOVES.len(),
                obs_dim: 9 + 9 + 2,
                state_dim: 2 * N_PREDATORS + 2 + 1,
                episode_limit: LIMIT,
            },
            predators: vec![(0, 0); N_PREDATORS],
            prey: (0, 0),
            t: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn predators(&self) -> &[Pos] {
        &self.predators
    }

    pub fn prey(&self) -> Pos {
        self.prey
    }

    fn captured(&self) -> bool {
        self.predators.contains(&self.prey)
    }

    fn observation(&self) -> Observation {
        let norm = (SIZE - 1) as f64;
        let obs = (0..N_PREDATORS)
            .map(|i| {
                let me = self.predators[i];
                let mut o = vec![0.0; self.spec.obs_dim];
                let mut cell = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let c = (me.0 + dx, me.1 + dy);
                        if c == self.prey {
                            o[cell] = 1.0;
                        }
                        if self.predators.iter().enumerate().any(|(j, &p)| j != i && p == c) {
                            o[9 + cell] = 1.0;
                        }
                        cell += 1;
                    }
                }
                o[18] = me.0 as f64 / norm;
                o[19] = me.1 as f64 / norm;
                o
            })
            .collect();
        let mut state = Vec::with_capacity(self.spec.state_dim);
        for p in self.predators.iter().chain(std::iter::once(&self.prey)) {
            state.push(p.0 as f64 / norm);
            state.push(p.1 as f64 / norm);
        }
        state.push(self.t as f64 / LIMIT as f64);
        Observation {
            obs,
            state,
            avail: vec![vec![true; MOVES.len()]; N_PREDATORS],
        }
    }
}

impl Env for PredatorPreyGrid {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells: Vec<Pos> = Vec::new();
        while cells.len() < N_PREDATORS + 1 {
            let c = (self.rng.gen_range(0..SIZE), self.rng.gen_range(0..SIZE));
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        self.prey = cells.pop().unwrap();
        self.predators = cells;
        self.t = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EnvContract("grid: step after termination".into()));
        }
        check_actions(&self.spec, &self.observation().avail, actions)?;
        for (p, &a) in self.predators.iter_mut().zip(actions) {
            *p = clamp_move(*p, a);
        }
        let mut caught = self.captured();
        if !caught {
            let a = self.rng.gen_range(0..MOVES.len());
            self.prey = clamp_move(self.prey, a);
            caught = self.captured();
        }
        self.t += 1;
        self.done = caught || self.t >= LIMIT;
        let reward = if caught { CAPTURE_REWARD - STEP_COST } else { -STEP_COST };
        let o = self.observation();
        Ok(StepResult {
            obs: o.obs,
            state: o.state,
            avail: o.avail,
            reward,
            terminated: caught,
            success: caught,
        })
    }
}

/// Mean return of a scripted chaser that knows the prey position and takes
/// the move minimizing Manhattan distance (lowest action index on ties).
pub fn greedy_chase_baseline(seeds: std::ops::Range<u64>) -> f64 {
    let mut env = PredatorPreyGrid::new();
    let n = seeds.end - seeds.start;
    let mut total = 0.0;
    for seed in seeds {
        env.reset(seed);
        loop {
            let prey = env.prey();
            let actions: Vec<usize> = env
                .predators()
                .iter()
                .map(|&p| {
                    (0..MOVES.len())
                        .min_by_key(|&a| manhattan(clamp_move(p, a), prey))
                        .unwrap()
                })
                .collect();
            let r = env.step(&actions).expect("chaser only uses available moves");
            total += r.reward;
            if r.terminated || env.t >= LIMIT {
                break;
            }
        }
    }
    total / n as f64
}
