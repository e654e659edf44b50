//! TD targets from frozen target networks and the masked squared TD loss
//! with backpropagation through time.

use crate::agent::{encode_input, greedy_action, AgentStep};
use crate::exec::Execution;
use crate::learner::buffer::{Episode, EpisodeBatch};
use crate::mixer::{q_tot_vdn, MixerMode};
use crate::model::Model;
use crate::params::Parameters;

/// TD targets per episode and filled step. Joint modes hold one value per
/// step, the independent mode one per agent. Padded steps are left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct TdTargets {
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Runs the agent network over the first `steps` observation rows of an
/// episode for every agent, threading hidden states from zero.
pub(crate) fn unroll(model: &Model, ep: &Episode, steps: usize) -> Vec<Vec<AgentStep>> {
    let layout = model.agent.layout;
    let n = layout.n_agents;
    (0..n)
        .map(|i| {
            let mut h = vec![0.0; model.agent.ensemble()];
            let mut out = Vec::with_capacity(steps);
            for t in 0..steps {
                let prev = if t == 0 { None } else { Some(ep.actions[t - 1][i]) };
                let x = encode_input(&layout, &ep.obs[t][i], prev, i);
                let step = model.agent.step(&x, &h);
                h = step.hidden.clone();
                out.push(step);
            }
            out
        })
        .collect()
}

/// Targets for one episode: `r + gamma * Q'_tot(next greedy)`, with no
/// bootstrap on terminal steps. Greedy next actions are chosen per agent
/// from the target agent network.
pub fn episode_targets(target: &Model, ep: &Episode, len: usize, gamma: f64) -> Vec<Vec<f64>> {
    let n = target.agent.layout.n_agents;
    let rolled = unroll(target, ep, len + 1);
    (0..len)
        .map(|t| {
            let r = ep.rewards[t];
            if ep.terminated[t] {
                let k = if target.mode() == MixerMode::Independent { n } else { 1 };
                return vec![r; k];
            }
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    let q = &rolled[i][t + 1].q;
                    let a = greedy_action(q, &ep.avail[t + 1][i]).unwrap_or(0);
                    q[a]
                })
                .collect();
            match target.mode() {
                MixerMode::Mixrts => {
                    let mixer = target.mixer.as_ref().expect("mixrts model has a mixer");
                    vec![r + gamma * mixer.forward_unchecked(&next, &ep.state[t + 1]).q_tot]
                }
                MixerMode::Vdn => vec![r + gamma * q_tot_vdn(&next)],
                MixerMode::Independent => next.iter().map(|q| r + gamma * q).collect(),
            }
        })
        .collect()
}

pub fn td_targets(batch: &EpisodeBatch, target: &Model, gamma: f64, exec: Execution) -> TdTargets {
    let idx: Vec<usize> = (0..batch.len()).collect();
    TdTargets {
        values: exec.map(&idx, |&b| episode_targets(target, &batch.episodes[b], batch.filled_len(b), gamma)),
    }
}

/// Loss contribution and gradients of a single episode.
///
/// `scale` is `1 / N` for the batch-wide count `N` of squared errors, so
/// per-episode gradients simply add up.
pub(crate) fn episode_loss_grads(
    model: &Model,
    ep: &Episode,
    len: usize,
    targets: &[Vec<f64>],
    scale: f64,
) -> (f64, Model) {
    let n = model.agent.layout.n_agents;
    let n_actions = model.agent.n_actions();
    let mut grads = model.zeroed();
    let rolled = unroll(model, ep, len);
    let mut dq = vec![vec![vec![0.0; n_actions]; len]; n];
    let mut sq = 0.0;
    for t in 0..len {
        let actions = &ep.actions[t];
        let q: Vec<f64> = (0..n).map(|i| rolled[i][t].q[actions[i]]).collect();
        match model.mode() {
            MixerMode::Mixrts => {
                let mixer = model.mixer.as_ref().expect("mixrts model has a mixer");
                let fwd = mixer.forward_unchecked(&q, &ep.state[t]);
                let td = targets[t][0] - fwd.q_tot;
                sq += td * td;
                let dq_i = mixer.backward(&fwd, -2.0 * td * scale, grads.mixer.as_mut().unwrap());
                for i in 0..n {
                    dq[i][t][actions[i]] = dq_i[i];
                }
            }
            MixerMode::Vdn => {
                let td = targets[t][0] - q_tot_vdn(&q);
                sq += td * td;
                for i in 0..n {
                    dq[i][t][actions[i]] = -2.0 * td * scale;
                }
            }
            MixerMode::Independent => {
                for i in 0..n {
                    let td = targets[t][i] - q[i];
                    sq += td * td;
                    dq[i][t][actions[i]] = -2.0 * td * scale;
                }
            }
        }
    }
    for i in 0..n {
        model.agent.backward_trajectory(&rolled[i], &dq[i], &mut grads.agent);
    }
    (sq, grads)
}

/// Number of squared errors the loss averages over.
pub fn loss_denominator(batch: &EpisodeBatch, mode: MixerMode, n_agents: usize) -> usize {
    let steps = batch.total_filled();
    match mode {
        MixerMode::Independent => steps * n_agents,
        _ => steps,
    }
}

/// Mean squared TD error over filled steps and its exact gradient; targets
/// are treated as constants.
pub fn loss_and_grads(batch: &EpisodeBatch, model: &Model, targets: &TdTargets, exec: Execution) -> (f64, Model) {
    let denom = loss_denominator(batch, model.mode(), model.agent.layout.n_agents);
    if denom == 0 {
        return (0.0, model.zeroed());
    }
    let scale = 1.0 / denom as f64;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let parts = exec.map(&idx, |&b| {
        episode_loss_grads(model, &batch.episodes[b], batch.filled_len(b), &targets.values[b], scale)
    });
    let mut total = 0.0;
    let mut grads = model.zeroed();
    for (sq, g) in &parts {
        total += sq;
        grads.add_scaled(g, 1.0);
    }
    (total * scale, grads)
}

/// Loss only, for finite-difference checks and diagnostics.
pub fn loss(batch: &EpisodeBatch, model: &Model, targets: &TdTargets) -> f64 {
    loss_and_grads(batch, model, targets, Execution::Sequential).0
}
