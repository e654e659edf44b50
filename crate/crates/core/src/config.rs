//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::envs::EnvChoice;
use crate::error::{Error, Result};
use crate::interpret::ImportanceMethod;
use crate::learner::TrainConfig;

/// Everything a CLI run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub payoff_csv: Option<PathBuf>,
    pub out: PathBuf,
    pub run_name: String,
    pub checkpoint: Option<PathBuf>,
    pub method: ImportanceMethod,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "matrix".into(),
            payoff_csv: None,
            out: PathBuf::from("runs"),
            run_name: "run".into(),
            checkpoint: None,
            method: ImportanceMethod::Confidence,
            train: TrainConfig::default(),
        }
    }
}

/// Keys in echo order.
pub const KEYS: &[&str] = &[
    "env",
    "payoff_csv",
    "mixer",
    "agent",
    "out",
    "run_name",
    "checkpoint",
    "method",
    "seed",
    "steps",
    "gamma",
    "lr",
    "batch_size",
    "buffer_capacity",
    "target_update_episodes",
    "eps_start",
    "eps_end",
    "eps_anneal_steps",
    "depth_agent",
    "depth_mix",
    "h_agent",
    "h_mix",
    "grad_clip_norm",
    "eval_cycle",
    "eval_episodes",
    "updates_per_episode",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    match value {
        "" | "none" => None,
        v => Some(PathBuf::from(v)),
    }
}

impl RunConfig {
    /// Sets one key. Accepts `-` in place of `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let t = &mut self.train;
        match key.as_str() {
            "env" => self.env = value.to_string(),
            "payoff_csv" => self.payoff_csv = opt_path(value),
            "mixer" => t.mixer = value.parse().map_err(|e: Error| Error::Config(format!("mixer: {e}")))?,
            "agent" => t.agent_kind = value.parse().map_err(|e: Error| Error::Config(format!("agent: {e}")))?,
            "out" => self.out = PathBuf::from(value),
            "run_name" => self.run_name = value.to_string(),
            "checkpoint" => self.checkpoint = opt_path(value),
            "method" => self.method = value.parse().map_err(|e: Error| Error::Config(format!("method: {e}")))?,
            "seed" => t.seed = num(&key, value)?,
            "steps" => t.total_steps = num(&key, value)?,
            "gamma" => t.gamma = num(&key, value)?,
            "lr" => t.lr = num(&key, value)?,
            "batch_size" => t.batch_size = num(&key, value)?,
            "buffer_capacity" => t.buffer_capacity = num(&key, value)?,
            "target_update_episodes" => t.target_update_episodes = num(&key, value)?,
            "eps_start" => t.eps_start = num(&key, value)?,
            "eps_end" => t.eps_end = num(&key, value)?,
            "eps_anneal_steps" => t.eps_anneal_steps = num(&key, value)?,
            "depth_agent" => t.depth_agent = num(&key, value)?,
            "depth_mix" => t.depth_mix = num(&key, value)?,
            "h_agent" => t.h_agent = num(&key, value)?,
            "h_mix" => t.h_mix = num(&key, value)?,
            "grad_clip_norm" => {
                t.grad_clip_norm = match value {
                    "none" => None,
                    v => Some(num(&key, v)?),
                }
            }
            "eval_cycle" => t.eval_cycle = num(&key, value)?,
            "eval_episodes" => t.eval_episodes = num(&key, value)?,
            "updates_per_episode" => t.updates_per_episode = num(&key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        Some(match key {
            "env" => self.env.clone(),
            "payoff_csv" => path(&self.payoff_csv),
            "mixer" => t.mixer.as_str().into(),
            "agent" => t.agent_kind.as_str().into(),
            "out" => self.out.display().to_string(),
            "run_name" => self.run_name.clone(),
            "checkpoint" => path(&self.checkpoint),
            "method" => self.method.as_str().into(),
            "seed" => t.seed.to_string(),
            "steps" => t.total_steps.to_string(),
            "gamma" => t.gamma.to_string(),
            "lr" => t.lr.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "buffer_capacity" => t.buffer_capacity.to_string(),
            "target_update_episodes" => t.target_update_episodes.to_string(),
            "eps_start" => t.eps_start.to_string(),
            "eps_end" => t.eps_end.to_string(),
            "eps_anneal_steps" => t.eps_anneal_steps.to_string(),
            "depth_agent" => t.depth_agent.to_string(),
            "depth_mix" => t.depth_mix.to_string(),
            "h_agent" => t.h_agent.to_string(),
            "h_mix" => t.h_mix.to_string(),
            "grad_clip_norm" => t.grad_clip_norm.map_or("none".into(), |c| c.to_string()),
            "eval_cycle" => t.eval_cycle.to_string(),
            "eval_episodes" => t.eval_episodes.to_string(),
            "updates_per_episode" => t.updates_per_episode.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value, one per line.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn env_choice(&self) -> Result<EnvChoice> {
        EnvChoice::from_name(&self.env, self.payoff_csv.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.env_choice()?;
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config("run_name: must be a plain, non-empty name".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.run_name)
    }
}
