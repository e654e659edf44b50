//! Binary soft decision trees and recurrent tree cells.
//!
//! Nodes use heap numbering: the root is node 1 and the children of node `j`
//! are `2j` (left) and `2j + 1` (right). Inner nodes occupy `1..=n_inner`,
//! leaf `l` (0-based, left to right) is heap node `n_leaves + l`.
//!
//! Every inner node owns one linear filter over the whole input and, for
//! recurrent cells, over the previous hidden value. The filter output passed
//! through a sigmoid is the probability of branching left. A leaf's path
//! probability is the product of branch probabilities along its route, and the
//! tree output is the path-probability-weighted sum of leaf parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::params::{Parameters, Tensor};

/// Largest supported depth. Deeper trees are not interpretable anyway.
pub const MAX_DEPTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    depth: usize,
}

impl TreeTopology {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::Config(format!(
                "tree depth must be in 1..={MAX_DEPTH}, got {depth}"
            )));
        }
        Ok(Self { depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_inner(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    /// Total heap slots including the unused index 0.
    fn n_slots(&self) -> usize {
        2 << self.depth
    }

    pub fn left(j: usize) -> usize {
        2 * j
    }

    pub fn right(j: usize) -> usize {
        2 * j + 1
    }

    pub fn parent(j: usize) -> usize {
        j / 2
    }

    /// Level of heap node `j`; the root is level 0.
    pub fn level(j: usize) -> usize {
        debug_assert!(j >= 1);
        (usize::BITS - 1 - j.leading_zeros()) as usize
    }

    /// Heap indices of the nodes at `level`.
    pub fn nodes_at_level(level: usize) -> std::ops::Range<usize> {
        (1 << level)..(2 << level)
    }

    pub fn leaf_node(&self, leaf: usize) -> usize {
        self.n_leaves() + leaf
    }

    /// Leaves below heap node `j`, as a range of leaf indices.
    pub fn leaves_under(&self, j: usize) -> std::ops::Range<usize> {
        let span = 1 << (self.depth - Self::level(j));
        let first = j * span - self.n_leaves();
        first..first + span
    }

    /// Inner nodes on the root-to-leaf route, each paired with whether the
    /// route takes the left branch there.
    pub fn route(&self, leaf: usize) -> Vec<(usize, bool)> {
        let mut node = self.leaf_node(leaf);
        let mut out = Vec::with_capacity(self.depth);
        while node > 1 {
            let parent = Self::parent(node);
            out.push((parent, node == Self::left(parent)));
            node = parent;
        }
        out.reverse();
        out
    }
}

/// Learnable parameters of one tree.
///
/// `w_o` is `n_inner x input_dim`, `w_h` is `n_inner x hidden_dim` (empty for
/// non-recurrent trees), `bias` has one entry per inner node and `leaves` is
/// `n_leaves x leaf_dim`. Row `j - 1` belongs to heap node `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub topology: TreeTopology,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub leaf_dim: usize,
    pub w_o: Vec<f64>,
    pub w_h: Vec<f64>,
    pub bias: Vec<f64>,
    pub leaves: Vec<f64>,
}

impl TreeParams {
    pub fn zeros(
        topology: TreeTopology,
        input_dim: usize,
        hidden_dim: usize,
        leaf_dim: usize,
    ) -> Self {
        let n_inner = topology.n_inner();
        Self {
            topology,
            input_dim,
            hidden_dim,
            leaf_dim,
            w_o: vec![0.0; n_inner * input_dim],
            w_h: vec![0.0; n_inner * hidden_dim],
            bias: vec![0.0; n_inner],
            leaves: vec![0.0; topology.n_leaves() * leaf_dim],
        }
    }

    /// Filters and biases uniform in `±1/sqrt(fan_in)` with
    /// `fan_in = input_dim + hidden_dim + 1`; leaves start at zero.
    pub fn init<R: Rng + ?Sized>(
        topology: TreeTopology,
        input_dim: usize,
        hidden_dim: usize,
        leaf_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(topology, input_dim, hidden_dim, leaf_dim);
        let bound = 1.0 / ((input_dim + hidden_dim + 1) as f64).sqrt();
        for v in p.w_o.iter_mut().chain(p.w_h.iter_mut()).chain(p.bias.iter_mut()) {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn is_recurrent(&self) -> bool {
        self.hidden_dim > 0
    }

    /// Closed-form parameter count.
    pub fn param_count(topology: TreeTopology, input_dim: usize, hidden_dim: usize, leaf_dim: usize) -> usize {
        topology.n_inner() * (input_dim + hidden_dim + 1) + topology.n_leaves() * leaf_dim
    }

    /// Filter over the input for heap node `j`.
    pub fn w_o_row(&self, j: usize) -> &[f64] {
        &self.w_o[(j - 1) * self.input_dim..j * self.input_dim]
    }

    pub fn w_h_row(&self, j: usize) -> &[f64] {
        &self.w_h[(j - 1) * self.hidden_dim..j * self.hidden_dim]
    }

    pub fn leaf(&self, l: usize) -> &[f64] {
        &self.leaves[l * self.leaf_dim..(l + 1) * self.leaf_dim]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.topology;
        check_dim("tree w_o", t.n_inner() * self.input_dim, self.w_o.len())?;
        check_dim("tree w_h", t.n_inner() * self.hidden_dim, self.w_h.len())?;
        check_dim("tree bias", t.n_inner(), self.bias.len())?;
        check_dim("tree leaves", t.n_leaves() * self.leaf_dim, self.leaves.len())?;
        check_finite("tree w_o", &self.w_o)?;
        check_finite("tree w_h", &self.w_h)?;
        check_finite("tree bias", &self.bias)?;
        check_finite("tree leaves", &self.leaves)
    }

    fn check_inputs(&self, x: &[f64], h: &[f64]) -> Result<()> {
        check_dim("tree input", self.input_dim, x.len())?;
        check_dim("tree hidden input", self.hidden_dim, h.len())?;
        check_finite("tree input", x)?;
        check_finite("tree hidden input", h)
    }

    /// Forward pass with dimension and finiteness checks.
    pub fn forward(&self, x: &[f64], h: &[f64]) -> Result<TreeForward> {
        self.check_inputs(x, h)?;
        Ok(self.forward_unchecked(x, h))
    }

    /// Forward pass for hot loops whose inputs are already validated.
    pub fn forward_unchecked(&self, x: &[f64], h: &[f64]) -> TreeForward {
        let topo = self.topology;
        let n_inner = topo.n_inner();
        let mut node_probs = Vec::with_capacity(n_inner);
        for j in 1..=n_inner {
            let z = dot(self.w_o_row(j), x) + dot(self.w_h_row(j), h) + self.bias[j - 1];
            node_probs.push(sigmoid(z));
        }
        let mut reach = vec![0.0; topo.n_slots()];
        reach[1] = 1.0;
        for j in 1..=n_inner {
            let p = node_probs[j - 1];
            reach[TreeTopology::left(j)] = reach[j] * p;
            reach[TreeTopology::right(j)] = reach[j] * (1.0 - p);
        }
        let mut output = vec![0.0; self.leaf_dim];
        let first_leaf = topo.n_leaves();
        for l in 0..topo.n_leaves() {
            let pl = reach[first_leaf + l];
            for (o, th) in output.iter_mut().zip(self.leaf(l)) {
                *o += pl * th;
            }
        }
        TreeForward {
            x: x.to_vec(),
            h: h.to_vec(),
            node_probs,
            reach,
            output,
        }
    }

    /// Accumulates `upstream`-weighted gradients of the tree output into
    /// `grads`, `dx` and `dh`.
    pub fn backward_into(
        &self,
        fwd: &TreeForward,
        upstream: &[f64],
        grads: &mut TreeParams,
        dx: &mut [f64],
        dh: &mut [f64],
    ) -> Result<()> {
        let topo = self.topology;
        if fwd.node_probs.len() != topo.n_inner()
            || fwd.x.len() != self.input_dim
            || fwd.h.len() != self.hidden_dim
        {
            return Err(Error::Usage("forward cache does not belong to this tree"));
        }
        check_dim("tree upstream gradient", self.leaf_dim, upstream.len())?;
        check_dim("tree input gradient", self.input_dim, dx.len())?;
        check_dim("tree hidden gradient", self.hidden_dim, dh.len())?;
        self.backward_unchecked(fwd, upstream, grads, dx, dh);
        Ok(())
    }

    pub(crate) fn backward_unchecked(
        &self,
        fwd: &TreeForward,
        upstream: &[f64],
        grads: &mut TreeParams,
        dx: &mut [f64],
        dh: &mut [f64],
    ) {
        let topo = self.topology;
        let n_inner = topo.n_inner();
        let first_leaf = topo.n_leaves();
        // v[j]: gradient of the output w.r.t. the reach probability of node j,
        // divided out of the reach of j itself.
        let mut v = vec![0.0; topo.n_slots()];
        for l in 0..topo.n_leaves() {
            let pl = fwd.reach[first_leaf + l];
            let off = l * self.leaf_dim;
            let mut d_pl = 0.0;
            for m in 0..self.leaf_dim {
                d_pl += self.leaves[off + m] * upstream[m];
                grads.leaves[off + m] += pl * upstream[m];
            }
            v[first_leaf + l] = d_pl;
        }
        for j in (1..=n_inner).rev() {
            let p = fwd.node_probs[j - 1];
            let vl = v[TreeTopology::left(j)];
            let vr = v[TreeTopology::right(j)];
            v[j] = p * vl + (1.0 - p) * vr;
            let dz = fwd.reach[j] * (vl - vr) * p * (1.0 - p);
            if dz == 0.0 {
                continue;
            }
            grads.bias[j - 1] += dz;
            let row = (j - 1) * self.input_dim;
            for i in 0..self.input_dim {
                grads.w_o[row + i] += dz * fwd.x[i];
                dx[i] += dz * self.w_o[row + i];
            }
            let row = (j - 1) * self.hidden_dim;
            for i in 0..self.hidden_dim {
                grads.w_h[row + i] += dz * fwd.h[i];
                dh[i] += dz * self.w_h[row + i];
            }
        }
    }
}

impl Parameters for TreeParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let n_inner = self.topology.n_inner();
        vec![
            Tensor { name: "w_o".into(), shape: vec![n_inner, self.input_dim], data: &self.w_o },
            Tensor { name: "w_h".into(), shape: vec![n_inner, self.hidden_dim], data: &self.w_h },
            Tensor { name: "bias".into(), shape: vec![n_inner], data: &self.bias },
            Tensor {
                name: "leaves".into(),
                shape: vec![self.topology.n_leaves(), self.leaf_dim],
                data: &self.leaves,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w_o, &mut self.w_h, &mut self.bias, &mut self.leaves]
    }
}

/// Cached forward pass of one tree: inputs, branch probabilities, reach
/// probabilities for every heap node and the output.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeForward {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    /// Left-branch probability of inner node `j` at index `j - 1`.
    pub node_probs: Vec<f64>,
    /// Probability of reaching heap node `j`, at index `j` (index 0 unused).
    pub reach: Vec<f64>,
    pub output: Vec<f64>,
}

impl TreeForward {
    pub fn leaf_probs(&self) -> &[f64] {
        let n_leaves = self.reach.len() / 2;
        &self.reach[n_leaves..]
    }
}

/// Gradients of a tree output with respect to everything it depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeGradients {
    pub params: TreeParams,
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Left-branch probability of a single inner node:
/// `sigmoid(w_o . obs + w_h . hidden + b)`.
pub fn node_probability(
    w_o: &[f64],
    w_h: Option<&[f64]>,
    b: f64,
    obs: &[f64],
    hidden: Option<&[f64]>,
) -> Result<f64> {
    check_dim("node filter", w_o.len(), obs.len())?;
    check_finite("node input", obs)?;
    check_finite("node filter", w_o)?;
    if !b.is_finite() {
        return Err(Error::NonFinite("node bias"));
    }
    let recurrent = match (w_h, hidden) {
        (Some(w), Some(h)) => {
            check_dim("node hidden filter", w.len(), h.len())?;
            check_finite("node hidden input", h)?;
            check_finite("node hidden filter", w)?;
            dot(w, h)
        }
        (None, None) => 0.0,
        _ => {
            return Err(Error::Config(
                "hidden input must be given exactly when a hidden filter is".into(),
            ))
        }
    };
    Ok(sigmoid(dot(w_o, obs) + recurrent + b))
}

/// Path probability of every leaf, left to right.
pub fn leaf_path_probabilities(params: &TreeParams, obs: &[f64], hidden: &[f64]) -> Result<Vec<f64>> {
    Ok(params.forward(obs, hidden)?.leaf_probs().to_vec())
}

/// One recurrent tree cell update: `h_new = sum_l P^l(obs, h_prev) theta_h^l`.
pub fn rtc_step(params: &TreeParams, obs: &[f64], h_prev: f64) -> Result<f64> {
    if params.hidden_dim != 1 || params.leaf_dim != 1 {
        return Err(Error::Config(
            "recurrent tree cell needs one hidden input and scalar leaves".into(),
        ));
    }
    Ok(params.forward(obs, &[h_prev])?.output[0])
}

/// Hard decision of a soft decision tree with action-vector leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct SdtDecision {
    pub leaf: usize,
    pub distribution: Vec<f64>,
    pub action: usize,
}

/// Picks the most probable leaf (lowest index on ties) and returns the softmax
/// of its parameters together with the greedy action.
pub fn sdt_forward(params: &TreeParams, obs: &[f64]) -> Result<SdtDecision> {
    if params.is_recurrent() {
        return Err(Error::Config("soft decision tree must be non-recurrent".into()));
    }
    let fwd = params.forward(obs, &[])?;
    let leaf = argmax(fwd.leaf_probs());
    let distribution = softmax(params.leaf(leaf));
    let action = argmax(&distribution);
    Ok(SdtDecision {
        leaf,
        distribution,
        action,
    })
}

/// Exact gradients of the tree output, contracted with `upstream`.
pub fn tree_backward(params: &TreeParams, fwd: &TreeForward, upstream: &[f64]) -> Result<TreeGradients> {
    let mut g = TreeGradients {
        params: TreeParams::zeros(params.topology, params.input_dim, params.hidden_dim, params.leaf_dim),
        input: vec![0.0; params.input_dim],
        hidden: vec![0.0; params.hidden_dim],
    };
    params.backward_into(fwd, upstream, &mut g.params, &mut g.input, &mut g.hidden)?;
    Ok(g)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
