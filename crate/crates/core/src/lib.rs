//! Interpretable cooperative multi-agent Q-learning with recurrent soft
//! decision trees as agents and a tree-based monotonic mixer.

pub mod agent;
pub mod commands;
pub mod config;
pub mod envs;
pub mod error;
pub mod exec;
pub mod interpret;
pub mod learner;
pub mod mixer;
pub mod model;
pub mod params;
pub mod tree;

pub use agent::{agent_q, greedy_action, select_action, AgentKind, AgentNet, InputLayout};
pub use envs::{Env, EnvChoice, EnvSpec};
pub use error::{Error, Result};
pub use exec::Execution;
pub use learner::{run_training, TrainConfig};
pub use mixer::{MixerMode, MixerNet};
pub use model::{Model, ModelSpec};
pub use params::Parameters;
pub use tree::{TreeParams, TreeTopology};
