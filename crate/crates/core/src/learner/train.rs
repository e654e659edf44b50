//! Rollouts, greedy evaluation and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{encode_input, greedy_action, select_action};
use crate::envs::{Env, EnvChoice};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::learner::buffer::{Episode, ReplayBuffer};
use crate::learner::loss::{loss_and_grads, td_targets, unroll};
use crate::learner::optim::RmsProp;
use crate::learner::TrainConfig;
use crate::mixer::{joint_argmax_by, MixerMode};
use crate::model::{Model, ModelSpec};

/// Plays one episode. `epsilon = 0` gives the greedy policy and draws
/// nothing from `rng`. Returns the episode and whether it counted as a win.
pub fn rollout<R: Rng + ?Sized>(
    model: &Model,
    env: &mut dyn Env,
    seed: u64,
    epsilon: f64,
    rng: &mut R,
) -> Result<(Episode, bool)> {
    let spec = env.spec().clone();
    let layout = model.agent.layout;
    let n = spec.n_agents;
    let first = env.reset(seed);
    let mut ep = Episode {
        obs: vec![first.obs],
        state: vec![first.state],
        avail: vec![first.avail],
        actions: Vec::new(),
        rewards: Vec::new(),
        terminated: Vec::new(),
    };
    let mut hidden = vec![vec![0.0; model.agent.ensemble()]; n];
    let mut success = false;
    for t in 0..spec.episode_limit {
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let prev = ep.actions.last().map(|a: &Vec<usize>| a[i]);
            let x = encode_input(&layout, &ep.obs[t][i], prev, i);
            let step = model.agent.step(&x, &hidden[i]);
            hidden[i] = step.hidden;
            actions.push(select_action(&step.q, &ep.avail[t][i], epsilon, rng)?);
        }
        let res = env
            .step(&actions)
            .map_err(|e| Error::EnvContract(format!("{e} (episode seed {seed}, step {t})")))?;
        ep.actions.push(actions);
        ep.rewards.push(res.reward);
        ep.terminated.push(res.terminated);
        ep.obs.push(res.obs);
        ep.state.push(res.state);
        ep.avail.push(res.avail);
        success = res.success;
        if res.terminated {
            break;
        }
    }
    Ok((ep, success))
}

/// Aggregate of a batch of greedy test episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean_return: f64,
    pub win_rate: f64,
    pub mean_length: f64,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
}

/// Seeds used for test episodes of a run; disjoint from the training stream
/// in practice and identical across evaluations.
pub fn eval_seeds(run_seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed ^ 0x5eed_e7a1_0000_0000);
    (0..episodes).map(|_| rng.gen()).collect()
}

/// Greedy rollouts on the given seeds, one fresh env per episode.
pub fn evaluate(model: &Model, env: &EnvChoice, seeds: &[u64], exec: Execution) -> Result<(EvalSummary, Vec<Episode>)> {
    let runs = exec.map(seeds, |&s| {
        let mut e = env.make();
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rollout(model, e.as_mut(), s, 0.0, &mut rng)
    });
    let runs: Vec<(Episode, bool)> = runs.into_iter().collect::<Result<_>>()?;
    let k = runs.len().max(1) as f64;
    let returns: Vec<f64> = runs.iter().map(|(e, _)| e.episode_return()).collect();
    let lengths: Vec<usize> = runs.iter().map(|(e, _)| e.len()).collect();
    let summary = EvalSummary {
        mean_return: returns.iter().sum::<f64>() / k,
        win_rate: runs.iter().filter(|(_, w)| *w).count() as f64 / k,
        mean_length: lengths.iter().sum::<usize>() as f64 / k,
        returns,
        lengths,
    };
    Ok((summary, runs.into_iter().map(|(e, _)| e).collect()))
}

/// Fraction of visited steps where the exhaustive joint argmax of the full
/// mixed value (weights recomputed per joint action) differs from the tuple
/// of per-agent greedy actions. Zero for the additive modes.
pub fn igm_disagreement(model: &Model, episodes: &[Episode]) -> f64 {
    let Some(mixer) = model.mixer.as_ref() else {
        return 0.0;
    };
    let n = model.agent.layout.n_agents;
    let (mut total, mut bad) = (0usize, 0usize);
    for ep in episodes {
        let rolled = unroll(model, ep, ep.len());
        for t in 0..ep.len() {
            let tables: Vec<Vec<f64>> = (0..n).map(|i| rolled[i][t].q.clone()).collect();
            let avail = &ep.avail[t];
            let greedy: Vec<usize> = (0..n).map(|i| greedy_action(&tables[i], &avail[i]).unwrap_or(0)).collect();
            let (_, joint) = joint_argmax_by(&tables, |u| {
                if u.iter().enumerate().any(|(i, &a)| !avail[i][a]) {
                    return f64::NEG_INFINITY;
                }
                let q: Vec<f64> = u.iter().enumerate().map(|(i, &a)| tables[i][a]).collect();
                mixer.forward_unchecked(&q, &ep.state[t]).q_tot
            });
            total += 1;
            if joint != greedy {
                bad += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        bad as f64 / total as f64
    }
}

/// One learning-curve record.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub episodes: u64,
    pub mean_test_return: f64,
    pub test_win_rate: f64,
    /// Mean loss of the updates since the previous record; NaN if none.
    pub loss: f64,
    pub epsilon: f64,
}

pub const CURVE_HEADER: &str = "step,episodes,mean_test_return,test_win_rate,loss,epsilon";

impl CurveRow {
    pub fn to_csv(&self) -> String {
        let loss = if self.loss.is_nan() { "nan".to_string() } else { format!("{}", self.loss) };
        format!(
            "{},{},{},{},{},{}",
            self.step, self.episodes, self.mean_test_return, self.test_win_rate, loss, self.epsilon
        )
    }
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the evaluation with the highest mean test return
    /// (earliest on ties).
    pub best: Model,
    pub best_return: f64,
    pub curve: Vec<CurveRow>,
    /// IGM audit per evaluation record.
    pub igm_disagreement: Vec<f64>,
    pub env_steps: u64,
    pub episodes: u64,
}

pub fn model_spec(config: &TrainConfig, env: &EnvChoice) -> ModelSpec {
    ModelSpec::for_env(
        &env.spec(),
        config.agent_kind,
        config.mixer,
        config.depth_agent,
        config.h_agent,
        config.depth_mix,
        config.h_mix,
    )
}

/// Runs the full training loop. Given the same config and env the result is
/// bit-identical for either execution mode.
pub fn run_training(config: &TrainConfig, env: &EnvChoice, exec: Execution) -> Result<TrainOutcome> {
    run_training_with(config, env, exec, |_| {})
}

/// [`run_training`] with a callback invoked on every new curve record.
pub fn run_training_with<F: FnMut(&CurveRow)>(
    config: &TrainConfig,
    env: &EnvChoice,
    exec: Execution,
    mut on_record: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    let env_spec = env.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(model_spec(config, env), &mut rng)?;
    let mut target = model.clone();
    let mut opt = RmsProp::new(config.lr, config.grad_clip_norm);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, env_spec);
    let schedule = config.schedule();
    let seeds = eval_seeds(config.seed, config.eval_episodes);
    let mut train_env = env.make();

    let mut out = TrainOutcome {
        best: model.clone(),
        model: model.clone(),
        best_return: f64::NEG_INFINITY,
        curve: Vec::new(),
        igm_disagreement: Vec::new(),
        env_steps: 0,
        episodes: 0,
    };
    let (mut steps, mut episodes) = (0u64, 0u64);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut last_eval: Option<u64> = None;

    let mut record = |model: &Model, steps: u64, episodes: u64, loss: f64, out: &mut TrainOutcome| -> Result<()> {
        let (summary, eps) = evaluate(model, env, &seeds, exec)?;
        let igm = igm_disagreement(model, &eps);
        let row = CurveRow {
            step: steps,
            episodes,
            mean_test_return: summary.mean_return,
            test_win_rate: summary.win_rate,
            loss,
            epsilon: schedule.epsilon(steps),
        };
        log::info!(
            "step {steps} episodes {episodes} return {:.4} win {:.3} loss {loss:.5} igm-gap {igm:.3}",
            summary.mean_return,
            summary.win_rate
        );
        if model.mode() == MixerMode::Mixrts && igm > 0.0 {
            log::debug!("mixed argmax differs from decentralized argmax on {:.1}% of steps", igm * 100.0);
        }
        if summary.mean_return > out.best_return {
            out.best_return = summary.mean_return;
            out.best = model.clone();
        }
        on_record(&row);
        out.curve.push(row);
        out.igm_disagreement.push(igm);
        Ok(())
    };

    while last_eval.is_none() || steps < config.total_steps {
        if last_eval.is_none_or(|s| steps >= s + config.eval_cycle) {
            let loss = if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 };
            record(&model, steps, episodes, loss, &mut out)?;
            (loss_sum, loss_n) = (0.0, 0);
            last_eval = Some(steps);
            if steps >= config.total_steps {
                break;
            }
        }
        let eps = schedule.epsilon(steps);
        let seed: u64 = rng.gen();
        let (ep, _) = rollout(&model, train_env.as_mut(), seed, eps, &mut rng)?;
        steps += ep.len() as u64;
        episodes += 1;
        buffer.push_episode(ep)?;

        if buffer.len() >= config.batch_size {
            for _ in 0..config.updates_per_episode {
                let batch = buffer.sample(config.batch_size, &mut rng)?;
                let targets = td_targets(&batch, &target, config.gamma, exec);
                let (loss, grads) = loss_and_grads(&batch, &model, &targets, exec);
                opt.step(&mut model, &grads)?;
                loss_sum += loss;
                loss_n += 1;
            }
        }
        if episodes % config.target_update_episodes as u64 == 0 {
            target = model.clone();
        }
    }
    if last_eval != Some(steps) {
        let loss = if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 };
        record(&model, steps, episodes, loss, &mut out)?;
    }
    out.model = model;
    out.env_steps = steps;
    out.episodes = episodes;
    Ok(out)
}
