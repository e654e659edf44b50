//! Explanations: feature importance, decision traces with per-layer action
//! distributions, mixing-weight traces and structured tree dumps.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{encode_input, AgentInput, AgentKind, AgentNet, HiddenState};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::learner::buffer::Episode;
use crate::mixer::MixerMode;
use crate::model::{Model, ModelSpec};
use crate::tree::{softmax, TreeParams, TreeTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceMethod {
    /// Reach-probability weighted filters of the deepest inner level.
    Confidence,
    /// Filters along the greedy route.
    SumPath,
    /// Filters of every inner node.
    SumAll,
    /// Input gradient of the chosen action value.
    Gradient,
}

impl ImportanceMethod {
    pub const ALL: [ImportanceMethod; 4] = [Self::Confidence, Self::SumPath, Self::SumAll, Self::Gradient];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Confidence => "confidence",
            Self::SumPath => "sum-path",
            Self::SumAll => "sum-all",
            Self::Gradient => "gradient",
        }
    }
}

impl FromStr for ImportanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown importance method `{s}` (valid: confidence, sum-path, sum-all, gradient)")))
    }
}

fn tree_hidden<'a>(net: &AgentNet, k: usize, h: &'a [f64]) -> &'a [f64] {
    match net.kind {
        AgentKind::Rtc => &h[k..k + 1],
        AgentKind::Sdt => &[],
    }
}

fn checked_input(net: &AgentNet, input: &AgentInput, hidden: &HiddenState) -> Result<Vec<f64>> {
    let x = input.encode(&net.layout)?;
    check_dim("agent hidden state", net.ensemble(), hidden.h.len())?;
    check_finite("agent hidden state", &hidden.h)?;
    Ok(x)
}

fn mean_rows(rows: Vec<Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let k = rows.len() as f64;
    for r in &rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= k);
    out
}

/// Confidence importance of every tree separately.
pub(crate) fn confidence_per_tree(net: &AgentNet, x: &[f64], h: &[f64]) -> Vec<Vec<f64>> {
    net.trees
        .iter()
        .enumerate()
        .map(|(k, tree)| {
            let fwd = tree.forward_unchecked(x, tree_hidden(net, k, h));
            let level = tree.topology.depth() - 1;
            let mut imp = vec![0.0; tree.input_dim];
            for j in TreeTopology::nodes_at_level(level) {
                for (o, w) in imp.iter_mut().zip(tree.w_o_row(j)) {
                    *o += fwd.reach[j] * w;
                }
            }
            imp
        })
        .collect()
}

fn greedy_route(tree: &TreeParams, node_probs: &[f64]) -> Vec<usize> {
    let mut j = 1;
    let mut out = Vec::with_capacity(tree.topology.depth());
    while j <= tree.topology.n_inner() {
        out.push(j);
        j = if node_probs[j - 1] >= 0.5 { TreeTopology::left(j) } else { TreeTopology::right(j) };
    }
    out
}

pub(crate) fn importance_encoded(
    method: ImportanceMethod,
    net: &AgentNet,
    x: &[f64],
    h: &[f64],
    action: usize,
) -> Vec<f64> {
    let dim = net.layout.input_dim();
    match method {
        ImportanceMethod::Confidence => mean_rows(confidence_per_tree(net, x, h), dim),
        ImportanceMethod::SumPath => mean_rows(
            net.trees
                .iter()
                .enumerate()
                .map(|(k, tree)| {
                    let fwd = tree.forward_unchecked(x, tree_hidden(net, k, h));
                    let mut imp = vec![0.0; dim];
                    for j in greedy_route(tree, &fwd.node_probs) {
                        imp.iter_mut().zip(tree.w_o_row(j)).for_each(|(o, w)| *o += w);
                    }
                    imp
                })
                .collect(),
            dim,
        ),
        ImportanceMethod::SumAll => mean_rows(
            net.trees
                .iter()
                .map(|tree| {
                    let mut imp = vec![0.0; dim];
                    for j in 1..=tree.topology.n_inner() {
                        imp.iter_mut().zip(tree.w_o_row(j)).for_each(|(o, w)| *o += w);
                    }
                    imp
                })
                .collect(),
            dim,
        ),
        ImportanceMethod::Gradient => net.input_gradient(&net.step(x, h), action),
    }
}

/// Confidence-weighted filters of the deepest inner level, averaged over
/// the ensemble.
pub fn importance_confidence(net: &AgentNet, input: &AgentInput, hidden: &HiddenState) -> Result<Vec<f64>> {
    let x = checked_input(net, input, hidden)?;
    Ok(importance_encoded(ImportanceMethod::Confidence, net, &x, &hidden.h, 0))
}

/// Sum of filters on the greedy route (branch left when `p >= 0.5`),
/// averaged over the ensemble.
pub fn importance_sum_path(net: &AgentNet, input: &AgentInput, hidden: &HiddenState) -> Result<Vec<f64>> {
    let x = checked_input(net, input, hidden)?;
    Ok(importance_encoded(ImportanceMethod::SumPath, net, &x, &hidden.h, 0))
}

/// Sum of all inner-node filters, averaged over the ensemble.
pub fn importance_sum_all(net: &AgentNet, input: &AgentInput, hidden: &HiddenState) -> Result<Vec<f64>> {
    let x = checked_input(net, input, hidden)?;
    Ok(importance_encoded(ImportanceMethod::SumAll, net, &x, &hidden.h, 0))
}

/// `d q[action] / d input` over the encoded input (observation features
/// first), with the previous hidden state held fixed.
pub fn importance_gradient(net: &AgentNet, input: &AgentInput, hidden: &HiddenState, action: usize) -> Result<Vec<f64>> {
    let x = checked_input(net, input, hidden)?;
    if action >= net.n_actions() {
        return Err(Error::Dimension { what: "action index", expected: net.n_actions(), found: action });
    }
    Ok(importance_encoded(ImportanceMethod::Gradient, net, &x, &hidden.h, action))
}

pub const LAYER_METHOD_NOTE: &str = "layer l distribution: each tree's output is approximated by summing, over nodes j at level l, \
the reach probability of j times the mean leaf value below j; the approximations are combined into action values \
exactly like the full outputs and passed through a softmax. The last layer is the leaf level and reproduces softmax(q).";

/// Action distributions implied by each tree level, root first, leaf level
/// last.
pub fn layer_distributions(net: &AgentNet, x: &[f64], h: &[f64]) -> Vec<Vec<f64>> {
    let depth = net.depth();
    let a = net.n_actions();
    let fwds: Vec<_> = net
        .trees
        .iter()
        .enumerate()
        .map(|(k, t)| t.forward_unchecked(x, tree_hidden(net, k, h)))
        .collect();
    (0..=depth)
        .map(|level| {
            let partial: Vec<Vec<f64>> = net
                .trees
                .iter()
                .zip(&fwds)
                .map(|(tree, fwd)| {
                    let mut out = vec![0.0; tree.leaf_dim];
                    for j in TreeTopology::nodes_at_level(level) {
                        let under = tree.topology.leaves_under(j);
                        let scale = fwd.reach[j] / under.len() as f64;
                        for l in under {
                            out.iter_mut().zip(tree.leaf(l)).for_each(|(o, v)| *o += scale * v);
                        }
                    }
                    out
                })
                .collect();
            let q = match net.kind {
                AgentKind::Rtc => {
                    let mut q = vec![0.0; a];
                    for (k, hk) in partial.iter().enumerate() {
                        q.iter_mut().zip(net.w_q_row(k)).for_each(|(o, w)| *o += hk[0] * w);
                    }
                    q
                }
                AgentKind::Sdt => partial.into_iter().next().unwrap_or_default(),
            };
            softmax(&q)
        })
        .collect()
}

/// Everything recorded about one agent at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent: usize,
    /// Encoded input fed to the agent network.
    pub input: Vec<f64>,
    /// Hidden state before the step.
    pub hidden_in: Vec<f64>,
    pub q: Vec<f64>,
    pub action: usize,
    pub mixing_weight: f64,
    /// Per tree, node probabilities in heap order.
    pub node_probs: Vec<Vec<f64>>,
    /// Per tree, leaf path probabilities.
    pub leaf_probs: Vec<Vec<f64>>,
    pub layer_distributions: Vec<Vec<f64>>,
    /// Per-tree confidence importance (the ensemble mean is in `importance`
    /// when the method is confidence).
    pub confidence_per_tree: Vec<Vec<f64>>,
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    /// One weight per agent; uniform `1/n` for the additive modes.
    pub weights: Vec<f64>,
    pub agents: Vec<AgentRecord>,
}

/// Decision trace of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTrace {
    pub schema_version: u32,
    pub method: ImportanceMethod,
    pub mixer: MixerMode,
    pub layer_method: String,
    pub feature_names: Vec<String>,
    pub steps: Vec<StepRecord>,
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Replays `episode` through `model` and records every decision.
pub fn trace_decision(model: &Model, episode: &Episode, method: ImportanceMethod) -> Result<ImportanceTrace> {
    let net = &model.agent;
    let layout = net.layout;
    let n = layout.n_agents;
    if episode.obs.first().is_none_or(|o| o.len() != n) {
        return Err(Error::Dimension { what: "episode agents", expected: n, found: episode.obs.first().map_or(0, |o| o.len()) });
    }
    for t in 0..episode.len() {
        for i in 0..n {
            check_dim("episode observation", layout.obs_dim, episode.obs[t][i].len())?;
        }
        if let Some(m) = &model.mixer {
            check_dim("episode state", m.state_dim, episode.state[t].len())?;
        }
    }
    let mut hidden = vec![vec![0.0; net.ensemble()]; n];
    let mut steps = Vec::with_capacity(episode.len());
    for t in 0..episode.len() {
        let mut agents = Vec::with_capacity(n);
        for i in 0..n {
            let prev = if t == 0 { None } else { Some(episode.actions[t - 1][i]) };
            let x = encode_input(&layout, &episode.obs[t][i], prev, i);
            let step = net.step(&x, &hidden[i]);
            let action = episode.actions[t][i];
            agents.push(AgentRecord {
                agent: i,
                importance: importance_encoded(method, net, &x, &hidden[i], action),
                confidence_per_tree: confidence_per_tree(net, &x, &hidden[i]),
                layer_distributions: layer_distributions(net, &x, &hidden[i]),
                node_probs: step.trees.iter().map(|f| f.node_probs.clone()).collect(),
                leaf_probs: step.trees.iter().map(|f| f.leaf_probs().to_vec()).collect(),
                input: x,
                hidden_in: hidden[i].clone(),
                q: step.q.clone(),
                action,
                mixing_weight: 0.0,
            });
            hidden[i] = step.hidden;
        }
        let q_chosen: Vec<f64> = agents.iter().map(|r| r.q[r.action]).collect();
        let weights = match &model.mixer {
            Some(m) => m.forward_unchecked(&q_chosen, &episode.state[t]).weights,
            None => vec![1.0 / n as f64; n],
        };
        for (r, w) in agents.iter_mut().zip(&weights) {
            r.mixing_weight = *w;
        }
        steps.push(StepRecord { t, state: episode.state[t].clone(), weights, agents });
    }
    Ok(ImportanceTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        method,
        mixer: model.mode(),
        layer_method: LAYER_METHOD_NOTE.to_string(),
        feature_names: layout.feature_names(),
        steps,
    })
}

pub const IMPORTANCE_CSV_HEADER: &str = "t,agent,feature_index,feature_name,importance,method";

impl ImportanceTrace {
    pub fn importance_csv(&self) -> String {
        let mut s = format!("{IMPORTANCE_CSV_HEADER}\n");
        for step in &self.steps {
            for r in &step.agents {
                for (f, v) in r.importance.iter().enumerate() {
                    let _ = writeln!(s, "{},{},{f},{},{v},{}", step.t, r.agent, self.feature_names[f], self.method.as_str());
                }
            }
        }
        s
    }

    pub fn weights_csv(&self) -> String {
        let n = self.steps.first().map_or(0, |s| s.weights.len());
        let mut s = String::from("t");
        for i in 0..n {
            let _ = write!(s, ",w_{i}");
        }
        s.push('\n');
        for step in &self.steps {
            s.push_str(&step.t.to_string());
            for w in &step.weights {
                let _ = write!(s, ",{w}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.schema_version != TRACE_SCHEMA_VERSION {
            return Err(Error::VersionMismatch { found: t.schema_version.to_string(), expected: TRACE_SCHEMA_VERSION.to_string() });
        }
        Ok(t)
    }
}

pub const DUMP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    /// Heap index; the root is 1.
    pub index: usize,
    pub level: usize,
    pub bias: f64,
    /// Filter weights, one list per feature group in group order.
    pub filters: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDumpEntry {
    pub depth: usize,
    pub nodes: Vec<NodeDump>,
    pub leaves: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerDump {
    pub feature_groups: Vec<FeatureGroup>,
    pub trees: Vec<TreeDumpEntry>,
    /// Weight of each tree in the mixing logit.
    pub combination: Vec<f64>,
}

/// Human-readable structure of a whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub feature_groups: Vec<FeatureGroup>,
    pub agent_trees: Vec<TreeDumpEntry>,
    /// Output combination `trees x actions`; empty for single-tree agents.
    pub agent_combination: Vec<Vec<f64>>,
    pub mixer: Option<MixerDump>,
}

fn agent_groups(net: &AgentNet) -> Vec<FeatureGroup> {
    let names = net.layout.feature_names();
    let l = net.layout;
    let mut groups = vec![
        FeatureGroup { name: "obs".into(), features: names[l.obs_range()].to_vec() },
        FeatureGroup { name: "prev_action".into(), features: names[l.prev_action_range()].to_vec() },
        FeatureGroup { name: "role".into(), features: names[l.role_range()].to_vec() },
    ];
    if net.kind == AgentKind::Rtc {
        groups.push(FeatureGroup { name: "hidden".into(), features: vec!["h_prev".into()] });
    }
    groups
}

fn mixer_groups(state_dim: usize) -> Vec<FeatureGroup> {
    vec![
        FeatureGroup { name: "q".into(), features: vec!["q_i".into()] },
        FeatureGroup { name: "state".into(), features: (0..state_dim).map(|i| format!("state_{i}")).collect() },
    ]
}

fn dump_one(tree: &TreeParams, groups: &[FeatureGroup]) -> TreeDumpEntry {
    let nodes = (1..=tree.topology.n_inner())
        .map(|j| {
            let mut full = tree.w_o_row(j).to_vec();
            full.extend_from_slice(tree.w_h_row(j));
            let mut filters = Vec::with_capacity(groups.len());
            let mut at = 0;
            for g in groups {
                filters.push(full[at..at + g.features.len()].to_vec());
                at += g.features.len();
            }
            NodeDump { index: j, level: TreeTopology::level(j), bias: tree.bias[j - 1], filters }
        })
        .collect();
    let leaves = (0..tree.topology.n_leaves()).map(|l| tree.leaf(l).to_vec()).collect();
    TreeDumpEntry { depth: tree.topology.depth(), nodes, leaves }
}

fn load_one(entry: &TreeDumpEntry, tree: &mut TreeParams) -> Result<()> {
    let n_inner = tree.topology.n_inner();
    check_dim("dumped node count", n_inner, entry.nodes.len())?;
    check_dim("dumped leaf count", tree.topology.n_leaves(), entry.leaves.len())?;
    let (d, hd) = (tree.input_dim, tree.hidden_dim);
    for (j0, node) in entry.nodes.iter().enumerate() {
        check_dim("dumped node index", j0 + 1, node.index)?;
        let full: Vec<f64> = node.filters.concat();
        check_dim("dumped filter length", d + hd, full.len())?;
        tree.w_o[j0 * d..(j0 + 1) * d].copy_from_slice(&full[..d]);
        tree.w_h[j0 * hd..(j0 + 1) * hd].copy_from_slice(&full[d..]);
        tree.bias[j0] = node.bias;
    }
    let ld = tree.leaf_dim;
    for (l, leaf) in entry.leaves.iter().enumerate() {
        check_dim("dumped leaf length", ld, leaf.len())?;
        tree.leaves[l * ld..(l + 1) * ld].copy_from_slice(leaf);
    }
    Ok(())
}

pub fn dump_tree(model: &Model) -> TreeDump {
    let net = &model.agent;
    let groups = agent_groups(net);
    TreeDump {
        schema_version: DUMP_SCHEMA_VERSION,
        model: model.spec,
        agent_trees: net.trees.iter().map(|t| dump_one(t, &groups)).collect(),
        agent_combination: (0..net.ensemble()).map(|k| net.w_q_row(k).to_vec()).collect(),
        feature_groups: groups,
        mixer: model.mixer.as_ref().map(|m| {
            let groups = mixer_groups(m.state_dim);
            MixerDump {
                trees: m.trees.iter().map(|t| dump_one(t, &groups)).collect(),
                combination: m.w_phi.clone(),
                feature_groups: groups,
            }
        }),
    }
}

/// Rebuilds the model a dump was taken from.
pub fn load_dump(dump: &TreeDump) -> Result<Model> {
    if dump.schema_version != DUMP_SCHEMA_VERSION {
        return Err(Error::VersionMismatch {
            found: dump.schema_version.to_string(),
            expected: DUMP_SCHEMA_VERSION.to_string(),
        });
    }
    let mut model = Model::new(dump.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    check_dim("dumped agent trees", model.agent.trees.len(), dump.agent_trees.len())?;
    for (entry, tree) in dump.agent_trees.iter().zip(model.agent.trees.iter_mut()) {
        load_one(entry, tree)?;
    }
    let w_q = dump.agent_combination.concat();
    check_dim("dumped agent combination", model.agent.w_q.len(), w_q.len())?;
    model.agent.w_q = w_q;
    match (&mut model.mixer, &dump.mixer) {
        (Some(m), Some(d)) => {
            check_dim("dumped mixer trees", m.trees.len(), d.trees.len())?;
            for (entry, tree) in d.trees.iter().zip(m.trees.iter_mut()) {
                load_one(entry, tree)?;
            }
            check_dim("dumped mixer combination", m.w_phi.len(), d.combination.len())?;
            m.w_phi = d.combination.clone();
        }
        (None, None) => {}
        _ => return Err(Error::Config("dump mixer section does not match its model spec".into())),
    }
    model.validate()?;
    Ok(model)
}

impl TreeDump {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64());
        if found != Some(DUMP_SCHEMA_VERSION as u64) {
            return Err(Error::VersionMismatch {
                found: found.map_or("missing".into(), |v| v.to_string()),
                expected: DUMP_SCHEMA_VERSION.to_string(),
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}
