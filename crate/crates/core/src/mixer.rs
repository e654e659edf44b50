//! Mixing trees: positive, state-conditioned weights over per-agent values.
//!
//! Each agent's chosen-action value `q_i` and the global state feed a shared
//! ensemble of non-recurrent trees with scalar leaves. The tree outputs
//! `phi_{i,k}` are combined with `w_phi` into one logit per agent, and a
//! softmax across agents gives the mixing weights `W`. The joint value is
//! `Q_tot = sum_i W_i q_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::params::{Parameters, Tensor};
use crate::tree::{softmax, TreeForward, TreeParams, TreeTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerMode {
    Mixrts,
    /// Plain sum of agent values.
    Vdn,
    /// No mixing; every agent learns from its own TD error.
    Independent,
}

impl MixerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MixerMode::Mixrts => "mixrts",
            MixerMode::Vdn => "vdn",
            MixerMode::Independent => "independent",
        }
    }
}

impl std::str::FromStr for MixerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixrts" => Ok(MixerMode::Mixrts),
            "vdn" | "vdn_sum" => Ok(MixerMode::Vdn),
            "independent" => Ok(MixerMode::Independent),
            _ => Err(Error::Config(format!(
                "unknown mixer `{s}` (expected mixrts, vdn or independent)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerNet {
    pub state_dim: usize,
    /// Trees over `[q_i | state]`, shared by all agents.
    pub trees: Vec<TreeParams>,
    pub w_phi: Vec<f64>,
}

/// Cached forward pass of the mixer for one timestep.
#[derive(Debug, Clone)]
pub struct MixForward {
    /// `trees[i][k]`: tree `k` evaluated for agent `i`.
    pub trees: Vec<Vec<TreeForward>>,
    pub phi: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub q: Vec<f64>,
    pub q_tot: f64,
}

impl MixerNet {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, depth: usize, ensemble: usize, rng: &mut R) -> Result<Self> {
        let topology = TreeTopology::new(depth)?;
        if ensemble == 0 {
            return Err(Error::Config("mixing ensemble size must be positive".into()));
        }
        let trees = (0..ensemble)
            .map(|_| TreeParams::init(topology, 1 + state_dim, 0, 1, rng))
            .collect();
        let bound = 1.0 / (ensemble as f64).sqrt();
        let w_phi = (0..ensemble).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(Self { state_dim, trees, w_phi })
    }

    pub fn depth(&self) -> usize {
        self.trees[0].topology.depth()
    }

    pub fn ensemble(&self) -> usize {
        self.trees.len()
    }

    pub fn param_count(state_dim: usize, depth: usize, ensemble: usize) -> Result<usize> {
        let t = TreeTopology::new(depth)?;
        Ok(ensemble * (TreeParams::param_count(t, 1 + state_dim, 0, 1) + 1))
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trees {
            t.validate()?;
            check_dim("mixer tree input", 1 + self.state_dim, t.input_dim)?;
        }
        check_dim("mixer w_phi", self.trees.len(), self.w_phi.len())?;
        check_finite("mixer w_phi", &self.w_phi)
    }

    /// Forward pass on inputs already known to be well formed.
    pub fn forward_unchecked(&self, q: &[f64], state: &[f64]) -> MixForward {
        let mut x = Vec::with_capacity(1 + state.len());
        x.push(0.0);
        x.extend_from_slice(state);
        let mut trees = Vec::with_capacity(q.len());
        let mut phi = Vec::with_capacity(q.len());
        let mut logits = Vec::with_capacity(q.len());
        for &qi in q {
            x[0] = qi;
            let fwds: Vec<TreeForward> = self.trees.iter().map(|t| t.forward_unchecked(&x, &[])).collect();
            let phis: Vec<f64> = fwds.iter().map(|f| f.output[0]).collect();
            logits.push(phis.iter().zip(&self.w_phi).map(|(p, w)| p * w).sum());
            phi.push(phis);
            trees.push(fwds);
        }
        let weights = softmax(&logits);
        let q_tot = q_tot_weighted(&weights, q);
        MixForward {
            trees,
            phi,
            logits,
            weights,
            q: q.to_vec(),
            q_tot,
        }
    }

    pub fn forward(&self, q: &[f64], state: &[f64]) -> Result<MixForward> {
        if q.is_empty() {
            return Err(Error::Config("mixing needs at least one agent".into()));
        }
        check_dim("mixer state", self.state_dim, state.len())?;
        check_finite("mixer q input", q)?;
        check_finite("mixer state", state)?;
        Ok(self.forward_unchecked(q, state))
    }

    /// Accumulates parameter gradients of `dq_tot * Q_tot` and returns the
    /// gradient w.r.t. each agent value, through both the direct term and the
    /// weight path.
    pub fn backward(&self, fwd: &MixForward, dq_tot: f64, grads: &mut MixerNet) -> Vec<f64> {
        let n = fwd.q.len();
        let mut dq: Vec<f64> = fwd.weights.iter().map(|w| w * dq_tot).collect();
        let mut dx = vec![0.0; 1 + self.state_dim];
        for i in 0..n {
            // softmax backward with dW_j = dq_tot * q_j
            let dlogit = dq_tot * fwd.weights[i] * (fwd.q[i] - fwd.q_tot);
            if dlogit == 0.0 {
                continue;
            }
            dx.fill(0.0);
            for (k, tree) in self.trees.iter().enumerate() {
                grads.w_phi[k] += dlogit * fwd.phi[i][k];
                let dphi = dlogit * self.w_phi[k];
                tree.backward_unchecked(&fwd.trees[i][k], &[dphi], &mut grads.trees[k], &mut dx, &mut []);
            }
            dq[i] += dx[0];
        }
        dq
    }
}

impl Parameters for MixerNet {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        for (k, tree) in self.trees.iter().enumerate() {
            for t in tree.tensors() {
                out.push(Tensor {
                    name: format!("mixer.tree{k}.{}", t.name),
                    ..t
                });
            }
        }
        out.push(Tensor {
            name: "mixer.w_phi".into(),
            shape: vec![self.trees.len()],
            data: &self.w_phi,
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for tree in self.trees.iter_mut() {
            out.extend(tree.tensors_mut());
        }
        out.push(&mut self.w_phi);
        out
    }
}

/// Softmax mixing weights, one per agent, for the chosen-action values.
pub fn mixing_weights(mixer: &MixerNet, q_chosen: &[f64], state: &[f64]) -> Result<Vec<f64>> {
    Ok(mixer.forward(q_chosen, state)?.weights)
}

fn q_tot_weighted(w: &[f64], q: &[f64]) -> f64 {
    w.iter().zip(q).map(|(a, b)| a * b).sum()
}

/// Joint value `sum_i W_i q_i`.
pub fn q_tot(weights: &[f64], q_chosen: &[f64]) -> Result<f64> {
    check_dim("mixing weights", q_chosen.len(), weights.len())?;
    Ok(q_tot_weighted(weights, q_chosen))
}

/// Joint value of the unweighted sum baseline.
pub fn q_tot_vdn(q_chosen: &[f64]) -> f64 {
    q_chosen.iter().sum()
}

/// Partial derivatives of `Q_tot` w.r.t. each `q_i` with the weights held
/// fixed, which are the weights themselves.
pub fn monotonicity_gradient(mixer: &MixerNet, q_chosen: &[f64], state: &[f64]) -> Result<Vec<f64>> {
    mixing_weights(mixer, q_chosen, state)
}

/// Joint action maximizing `sum_i w_i q_i[u_i]` by exhaustive enumeration.
/// Ties go to the lexicographically smallest joint action.
pub fn joint_argmax_frozen(weights: &[f64], q_tables: &[Vec<f64>]) -> (f64, Vec<usize>) {
    joint_argmax_by(q_tables, |u| {
        u.iter().enumerate().map(|(i, &a)| weights[i] * q_tables[i][a]).sum()
    })
}

/// Exhaustive maximization of an arbitrary joint value over all joint actions.
pub fn joint_argmax_by<F: FnMut(&[usize]) -> f64>(q_tables: &[Vec<f64>], mut value: F) -> (f64, Vec<usize>) {
    let n = q_tables.len();
    let mut u = vec![0usize; n];
    let mut best = (f64::NEG_INFINITY, u.clone());
    loop {
        let v = value(&u);
        if v > best.0 {
            best = (v, u.clone());
        }
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            u[i] += 1;
            if u[i] < q_tables[i].len() {
                break;
            }
            u[i] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mixer(rng: &mut ChaCha8Rng, state_dim: usize, depth: usize, h: usize) -> MixerNet {
        let mut m = MixerNet::new(state_dim, depth, h, rng).unwrap();
        for t in m.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        m
    }

    /// Recomputes the weights from the raw path products, without the cached
    /// forward machinery.
    fn oracle_weights(m: &MixerNet, q: &[f64], s: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = q
            .iter()
            .map(|&qi| {
                let mut x = vec![qi];
                x.extend_from_slice(s);
                let mut logit = 0.0;
                for (k, tree) in m.trees.iter().enumerate() {
                    let topo = tree.topology;
                    let mut phi = 0.0;
                    for l in 0..topo.n_leaves() {
                        let mut p = 1.0;
                        for (j, left) in topo.route(l) {
                            let z: f64 = tree.w_o_row(j).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                                + tree.bias[j - 1];
                            let pj = 1.0 / (1.0 + (-z).exp());
                            p *= if left { pj } else { 1.0 - pj };
                        }
                        phi += p * tree.leaves[l];
                    }
                    logit += phi * m.w_phi[k];
                }
                logit
            })
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        logits.iter().map(|v| v.exp() / z).collect()
    }

    #[test]
    fn equal_leaves_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = random_mixer(&mut rng, 3, 2, 4);
        for t in &mut m.trees {
            t.leaves.fill(0.7);
        }
        let w = mixing_weights(&m, &[1.0, -3.0, 8.0, 0.5], &[0.1, 0.2, 0.3]).unwrap();
        for wi in &w {
            assert!((wi - 0.25).abs() < 1e-15);
        }
        assert_eq!(monotonicity_gradient(&m, &[1.0, -3.0, 8.0, 0.5], &[0.1, 0.2, 0.3]).unwrap(), w);
    }

    #[test]
    fn single_agent_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mixer(&mut rng, 2, 3, 3);
        assert_eq!(mixing_weights(&m, &[4.2], &[0.5, 0.5]).unwrap(), vec![1.0]);
    }

    #[test]
    fn weights_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let m = random_mixer(&mut rng, 4, 2, 2);
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let w = mixing_weights(&m, &q, &s).unwrap();
            let want = oracle_weights(&m, &q, &s);
            for (a, b) in w.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            let qt = q_tot(&w, &q).unwrap();
            let want_qt = want[0] * q[0] + want[1] * q[1] + want[2] * q[2];
            assert!((qt - want_qt).abs() < 1e-12);
            assert!(monotonicity_gradient(&m, &q, &s).unwrap().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn q_tot_examples() {
        assert_eq!(q_tot(&[0.25; 4], &[4.0; 4]).unwrap(), 4.0);
        assert_eq!(q_tot_vdn(&[1.0, 2.0, 3.0]), 6.0);
        assert!(q_tot(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn equal_logits_reproduce_scaled_vdn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = random_mixer(&mut rng, 2, 2, 3);
        for t in &mut m.trees {
            t.leaves.fill(-1.3);
        }
        let q = [1.5, -0.25, 3.0];
        let w = mixing_weights(&m, &q, &[0.2, 0.9]).unwrap();
        let ratio = q_tot_vdn(&q) / q_tot(&w, &q).unwrap();
        assert!((ratio - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mixer(&mut rng, 2, 2, 3);
        assert!(matches!(mixing_weights(&m, &[1.0], &[0.0]), Err(Error::Dimension { .. })));
        assert!(mixing_weights(&m, &[], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mixer(&mut rng, 3, 2, 2);
        let q = vec![0.4, -1.1, 0.8];
        let s = vec![0.3, 0.6, 0.1];
        let fwd = m.forward(&q, &s).unwrap();
        let mut g = m.zeroed();
        let dq = m.backward(&fwd, 1.0, &mut g);
        let f = |m: &MixerNet, q: &[f64]| m.forward(q, &s).unwrap().q_tot;
        let eps = 1e-6;
        let base = m.flatten();
        let analytic = g.flatten();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] += eps;
            let mut mp = m.clone();
            mp.load_flat(&v);
            v[i] -= 2.0 * eps;
            let mut mm = m.clone();
            mm.load_flat(&v);
            let num = (f(&mp, &q) - f(&mm, &q)) / (2.0 * eps);
            assert!((num - analytic[i]).abs() < 1e-8 || (num - analytic[i]).abs() / num.abs() < 1e-4);
        }
        for i in 0..3 {
            let mut qp = q.clone();
            qp[i] += eps;
            let mut qm = q.clone();
            qm[i] -= eps;
            let num = (f(&m, &qp) - f(&m, &qm)) / (2.0 * eps);
            assert!((num - dq[i]).abs() / num.abs() < 1e-4);
        }
    }

    #[test]
    fn joint_argmax_enumeration() {
        let tables = vec![vec![0.0, 2.0], vec![1.0, 0.0, 3.0]];
        let (v, u) = joint_argmax_frozen(&[0.5, 0.5], &tables);
        assert_eq!(u, vec![1, 2]);
        assert!((v - 2.5).abs() < 1e-15);
        let (_, u) = joint_argmax_frozen(&[1.0, 1.0], &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(u, vec![0, 0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn weights_on_simplex(seed in any::<u64>(), n in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_mixer(&mut rng, 3, 2, 3);
                let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let s: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let w = mixing_weights(&m, &q, &s).unwrap();
                prop_assert!(w.iter().all(|&v| v > 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn frozen_weights_strictly_monotone(
                w in proptest::collection::vec(0.01f64..1.0, 3),
                q in proptest::collection::vec(-5.0f64..5.0, 3),
                i in 0usize..3,
                delta in 1e-3f64..1.0,
            ) {
                let before = q_tot(&w, &q).unwrap();
                let mut bumped = q.clone();
                bumped[i] += delta;
                prop_assert!(q_tot(&w, &bumped).unwrap() > before);
            }
        }
    }
}
