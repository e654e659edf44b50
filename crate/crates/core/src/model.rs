//! The trainable pair of agent network and (optional) mixer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentKind, AgentNet, InputLayout};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::mixer::{MixerMode, MixerNet};
use crate::params::{Parameters, Tensor};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub agent_kind: AgentKind,
    pub layout: InputLayout,
    pub depth_agent: usize,
    pub h_agent: usize,
    pub mixer: MixerMode,
    pub state_dim: usize,
    pub depth_mix: usize,
    pub h_mix: usize,
}

impl ModelSpec {
    pub fn for_env(
        env: &EnvSpec,
        agent_kind: AgentKind,
        mixer: MixerMode,
        depth_agent: usize,
        h_agent: usize,
        depth_mix: usize,
        h_mix: usize,
    ) -> Self {
        Self {
            agent_kind,
            layout: InputLayout {
                obs_dim: env.obs_dim,
                n_actions: env.n_actions,
                n_agents: env.n_agents,
            },
            depth_agent,
            h_agent,
            mixer,
            state_dim: env.state_dim,
            depth_mix,
            h_mix,
        }
    }

    /// Closed-form parameter count of the whole model.
    pub fn param_count(&self) -> Result<usize> {
        let agent = AgentNet::param_count(self.agent_kind, self.layout, self.depth_agent, self.h_agent)?;
        let mixer = match self.mixer {
            MixerMode::Mixrts => MixerNet::param_count(self.state_dim, self.depth_mix, self.h_mix)?,
            _ => 0,
        };
        Ok(agent + mixer)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("agent_kind", self.agent_kind.as_str().to_string()),
            ("obs_dim", self.layout.obs_dim.to_string()),
            ("n_actions", self.layout.n_actions.to_string()),
            ("n_agents", self.layout.n_agents.to_string()),
            ("depth_agent", self.depth_agent.to_string()),
            ("h_agent", self.h_agent.to_string()),
            ("mixer", self.mixer.as_str().to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("depth_mix", self.depth_mix.to_string()),
            ("h_mix", self.h_mix.to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad model spec line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("model spec missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("model spec `{k}` is not a count")))
        };
        Ok(Self {
            agent_kind: get("agent_kind")?.parse()?,
            layout: InputLayout {
                obs_dim: num("obs_dim")?,
                n_actions: num("n_actions")?,
                n_agents: num("n_agents")?,
            },
            depth_agent: num("depth_agent")?,
            h_agent: num("h_agent")?,
            mixer: get("mixer")?.parse()?,
            state_dim: num("state_dim")?,
            depth_mix: num("depth_mix")?,
            h_mix: num("h_mix")?,
        })
    }

    /// Errors unless the model fits the environment's dimensions.
    pub fn check_env(&self, env: &EnvSpec) -> Result<()> {
        let ok = self.layout.obs_dim == env.obs_dim
            && self.layout.n_actions == env.n_actions
            && self.layout.n_agents == env.n_agents
            && self.state_dim == env.state_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint shapes (obs {}, actions {}, agents {}, state {}) do not fit env `{}` (obs {}, actions {}, agents {}, state {})",
                self.layout.obs_dim,
                self.layout.n_actions,
                self.layout.n_agents,
                self.state_dim,
                env.name,
                env.obs_dim,
                env.n_actions,
                env.n_agents,
                env.state_dim
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub agent: AgentNet,
    /// Present only in [`MixerMode::Mixrts`].
    pub mixer: Option<MixerNet>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let agent = AgentNet::new(spec.agent_kind, spec.layout, spec.depth_agent, spec.h_agent, rng)?;
        let mixer = match spec.mixer {
            MixerMode::Mixrts => Some(MixerNet::new(spec.state_dim, spec.depth_mix, spec.h_mix, rng)?),
            _ => None,
        };
        Ok(Self { spec, agent, mixer })
    }

    pub fn mode(&self) -> MixerMode {
        self.spec.mixer
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        if let Some(m) = &self.mixer {
            m.validate()?;
        }
        Ok(())
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = self.agent.tensors();
        if let Some(m) = &self.mixer {
            out.extend(m.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.agent.tensors_mut();
        if let Some(m) = &mut self.mixer {
            out.extend(m.tensors_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_text_round_trip() {
        let spec = ModelSpec {
            agent_kind: AgentKind::Sdt,
            layout: InputLayout { obs_dim: 7, n_actions: 5, n_agents: 3 },
            depth_agent: 2,
            h_agent: 4,
            mixer: MixerMode::Vdn,
            state_dim: 9,
            depth_mix: 3,
            h_mix: 2,
        };
        assert_eq!(ModelSpec::from_text(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn param_count_matches_manifest() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mixer in [MixerMode::Mixrts, MixerMode::Vdn] {
            let spec = ModelSpec {
                agent_kind: AgentKind::Rtc,
                layout: InputLayout { obs_dim: 3, n_actions: 2, n_agents: 2 },
                depth_agent: 3,
                h_agent: 5,
                mixer,
                state_dim: 3,
                depth_mix: 2,
                h_mix: 4,
            };
            let m = Model::new(spec, &mut rng).unwrap();
            assert_eq!(m.num_params(), spec.param_count().unwrap());
        }
    }
}
