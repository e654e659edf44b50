//! The operations behind each CLI subcommand, usable from library code.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::envs::EnvChoice;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::interpret::{dump_tree, trace_decision, ImportanceMethod, ImportanceTrace, TreeDump};
use crate::learner::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::learner::train::{curve_csv, eval_seeds, evaluate, model_spec, rollout, run_training_with, EvalSummary, TrainOutcome};
use crate::model::Model;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub config_echo: PathBuf,
    pub curve: PathBuf,
    pub latest: PathBuf,
    pub best: PathBuf,
    pub traces: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains and writes `<out>/<run>/{config.echo, curve.csv, ckpt-latest,
/// ckpt-best, traces/}`. The traces directory holds an explanation of one
/// greedy episode of the final model.
pub fn cmd_train(config: &RunConfig, exec: Execution) -> Result<TrainArtifacts> {
    config.validate()?;
    let env = config.env_choice()?;
    let dir = config.run_dir();
    let traces = dir.join("traces");
    mkdir(&traces)?;
    let echo = config.echo();
    let config_echo = dir.join("config.echo");
    write(&config_echo, &echo)?;

    let outcome = run_training_with(&config.train, &env, exec, |row| {
        log::info!("curve {}", row.to_csv());
    })?;
    let curve = dir.join("curve.csv");
    write(&curve, curve_csv(&outcome.curve))?;
    let latest = dir.join("ckpt-latest");
    let best = dir.join("ckpt-best");
    save_checkpoint(&latest, &echo, &outcome.model)?;
    save_checkpoint(&best, &echo, &outcome.best)?;
    explain_to_dir(&outcome.model, &env, config.method, config.train.seed, &traces)?;
    Ok(TrainArtifacts { dir, config_echo, curve, latest, best, traces, outcome })
}

/// Loads a checkpoint and resolves the environment: `env` if given,
/// otherwise the one recorded in the checkpoint's config echo.
pub fn load_with_env(checkpoint: &Path, env: Option<&EnvChoice>) -> Result<(Checkpoint, EnvChoice)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let env = match env {
        Some(e) => e.clone(),
        None => RunConfig::from_text(&ckpt.config_echo)?.env_choice()?,
    };
    ckpt.model.spec.check_env(&env.spec())?;
    Ok((ckpt, env))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateReport {
    pub env: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_length: f64,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl From<(&str, EvalSummary)> for EvaluateReport {
    fn from((env, s): (&str, EvalSummary)) -> Self {
        Self {
            env: env.to_string(),
            episodes: s.returns.len(),
            mean_return: s.mean_return,
            success_rate: s.win_rate,
            mean_length: s.mean_length,
            returns: s.returns,
            lengths: s.lengths,
        }
    }
}

/// Greedy evaluation of a checkpoint; writes a JSON summary when `out` is
/// given.
pub fn cmd_evaluate(
    checkpoint: &Path,
    env: Option<&EnvChoice>,
    episodes: usize,
    seed: u64,
    out: Option<&Path>,
    exec: Execution,
) -> Result<EvaluateReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes: must be positive".into()));
    }
    let (ckpt, env) = load_with_env(checkpoint, env)?;
    let (summary, _) = evaluate(&ckpt.model, &env, &eval_seeds(seed, episodes), exec)?;
    let report = EvaluateReport::from((env.spec().name.as_str(), summary));
    if let Some(path) = out {
        write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Files written by an explanation.
#[derive(Debug, Clone)]
pub struct ExplainArtifacts {
    pub importance_csv: PathBuf,
    pub weights_csv: PathBuf,
    pub trace_json: PathBuf,
    pub trace: ImportanceTrace,
}

fn explain_to_dir(model: &Model, env: &EnvChoice, method: ImportanceMethod, seed: u64, dir: &Path) -> Result<ExplainArtifacts> {
    mkdir(dir)?;
    let mut e = env.make();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (episode, _) = rollout(model, e.as_mut(), seed, 0.0, &mut rng)?;
    let trace = trace_decision(model, &episode, method)?;
    let importance_csv = dir.join("importance.csv");
    let weights_csv = dir.join("weights.csv");
    let trace_json = dir.join("trace.json");
    write(&importance_csv, trace.importance_csv())?;
    write(&weights_csv, trace.weights_csv())?;
    write(&trace_json, trace.to_json()?)?;
    Ok(ExplainArtifacts { importance_csv, weights_csv, trace_json, trace })
}

/// Rolls one greedy episode from `seed` and writes `importance.csv`,
/// `weights.csv` and `trace.json` (records with per-layer distributions)
/// into `out_dir`.
pub fn cmd_explain(
    checkpoint: &Path,
    env: Option<&EnvChoice>,
    method: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<ExplainArtifacts> {
    let method: ImportanceMethod = method.parse()?;
    let (ckpt, env) = load_with_env(checkpoint, env)?;
    explain_to_dir(&ckpt.model, &env, method, seed, out_dir)
}

pub fn cmd_dump_tree(checkpoint: &Path, out: Option<&Path>) -> Result<TreeDump> {
    let ckpt = load_checkpoint(checkpoint)?;
    let dump = dump_tree(&ckpt.model);
    if let Some(path) = out {
        write(path, dump.to_json()?)?;
    }
    Ok(dump)
}

/// One cell of a depth by ensemble-size sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub depth: usize,
    pub h_agent: usize,
    pub param_count: usize,
    pub final_test_return: f64,
    pub best_test_return: f64,
}

pub const ABLATION_HEADER: &str = "depth,h_agent,param_count,final_test_return,best_test_return";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.depth, r.h_agent, r.param_count, r.final_test_return, r.best_test_return
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub depths: Vec<usize>,
    pub h_values: Vec<usize>,
    /// Upper bound on environment steps summed over all cells.
    pub budget_steps: u64,
    /// Cells trained at once; 1 runs them in order.
    pub jobs: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self { depths: vec![1, 2, 3], h_values: vec![8, 16, 32, 64], budget_steps: 2_000_000, jobs: 1 }
    }
}

/// Trains one model per `(depth, H)` cell with the shared seed and writes
/// `<out>/<run>/ablation.csv` plus each cell's curve under `cells/`.
pub fn cmd_ablate(config: &RunConfig, plan: &AblationPlan) -> Result<Vec<AblationRow>> {
    config.validate()?;
    if plan.depths.is_empty() || plan.h_values.is_empty() || plan.jobs == 0 {
        return Err(Error::Config("ablation needs at least one depth, one H value and one job".into()));
    }
    let cells: Vec<(usize, usize)> = plan
        .depths
        .iter()
        .flat_map(|&d| plan.h_values.iter().map(move |&h| (d, h)))
        .collect();
    let estimate = cells.len() as u64 * config.train.total_steps;
    if estimate > plan.budget_steps {
        return Err(Error::Config(format!(
            "ablation grid of {} cells needs about {estimate} environment steps, above the budget of {} (raise budget_steps or shrink the grid)",
            cells.len(),
            plan.budget_steps
        )));
    }
    let env = config.env_choice()?;
    let dir = config.run_dir();
    mkdir(&dir.join("cells"))?;
    write(&dir.join("config.echo"), config.echo())?;

    let run_cell = |&(depth, h): &(usize, usize)| -> Result<AblationRow> {
        let mut train = config.train.clone();
        train.depth_agent = depth;
        train.h_agent = h;
        let param_count = model_spec(&train, &env).param_count()?;
        let out = run_training_with(&train, &env, Execution::Sequential, |_| {})?;
        let cell_dir = dir.join("cells").join(format!("d{depth}_h{h}"));
        mkdir(&cell_dir)?;
        write(&cell_dir.join("curve.csv"), curve_csv(&out.curve))?;
        Ok(AblationRow {
            depth,
            h_agent: h,
            param_count,
            final_test_return: out.curve.last().map_or(f64::NAN, |r| r.mean_test_return),
            best_test_return: out.best_return,
        })
    };
    let rows: Vec<Result<AblationRow>> = if plan.jobs > 1 { run_parallel(plan.jobs, &cells, run_cell)? } else { cells.iter().map(run_cell).collect() };
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    write(&dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

#[cfg(feature = "parallel")]
fn run_parallel<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?;
    Ok(pool.install(|| Execution::Parallel.map(items, f)))
}

#[cfg(not(feature = "parallel"))]
fn run_parallel<T, R, F>(_jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    Ok(Execution::Sequential.map(items, f))
}
