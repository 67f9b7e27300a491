//! Value-decomposition mixers and their closed-form per-agent credits.
//!
//! VDN sums the agent values. QMIX mixes them through a two-layer network
//! whose weights are produced from the global state by hypernetworks:
//!
//! ```text
//! pre   = q W1 + b1            W1 = |hyper_w1(s)|  (K x M)
//! Qtot  = elu(pre) . w2 + b2   w2 = |hyper_w2(s)|  (M)
//! ```
//!
//! Since the mixer is a closed-form function of `q`, the credit
//! `dQtot/dq_k = sum_m W1[k, m] * elu'(pre_m) * w2[m]` is built as an ordinary
//! forward expression, so a first-order backward pass reaches the mixer
//! parameters through it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{linear_specs, Linear, ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Vdn,
    Qmix,
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vdn" => Ok(Self::Vdn),
            "qmix" => Ok(Self::Qmix),
            other => Err(Error::InvalidArgument(format!("unknown mixer {other}"))),
        }
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vdn => "vdn",
            Self::Qmix => "qmix",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mixer {
    pub kind: MixerKind,
    pub n_agents: usize,
    pub state_dim: usize,
    /// QMIX embedding width `M`.
    pub embed: usize,
}

/// Mixer parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub enum BoundMixer {
    Vdn,
    Qmix {
        w1: Linear,
        b1: Linear,
        w2: Linear,
        b2_hidden: Linear,
        b2_out: Linear,
    },
}

/// State-conditioned mixing weights for a stack of rows.
#[derive(Clone, Copy, Debug)]
pub enum MixWeights {
    Vdn,
    Qmix {
        /// `[rows, K*M]`, nonnegative.
        w1: NodeId,
        /// `[rows, M]`.
        b1: NodeId,
        /// `[rows, M]`, nonnegative.
        w2: NodeId,
        /// `[rows, 1]`.
        b2: NodeId,
    },
}

impl Mixer {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self.kind {
            MixerKind::Vdn => Vec::new(),
            MixerKind::Qmix => {
                let (s, k, m) = (self.state_dim, self.n_agents, self.embed);
                let mut specs = Vec::new();
                specs.extend(linear_specs("mixer.hyper_w1", s, k * m));
                specs.extend(linear_specs("mixer.hyper_b1", s, m));
                specs.extend(linear_specs("mixer.hyper_w2", s, m));
                specs.extend(linear_specs("mixer.hyper_b2.0", s, m));
                specs.extend(linear_specs("mixer.hyper_b2.1", m, 1));
                specs
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore, frozen: bool) -> Result<BoundMixer> {
        Ok(match self.kind {
            MixerKind::Vdn => BoundMixer::Vdn,
            MixerKind::Qmix => BoundMixer::Qmix {
                w1: Linear::bind(g, store, "mixer.hyper_w1", frozen)?,
                b1: Linear::bind(g, store, "mixer.hyper_b1", frozen)?,
                w2: Linear::bind(g, store, "mixer.hyper_w2", frozen)?,
                b2_hidden: Linear::bind(g, store, "mixer.hyper_b2.0", frozen)?,
                b2_out: Linear::bind(g, store, "mixer.hyper_b2.1", frozen)?,
            },
        })
    }

    /// Runs the hypernetworks on states `[rows, state_dim]`.
    pub fn weights(&self, g: &mut Graph, p: &BoundMixer, states: NodeId) -> Result<MixWeights> {
        let s = g.shape(states);
        if s.cols != self.state_dim {
            return Err(Error::Shape(format!(
                "state {s} but mixer expects {} features",
                self.state_dim
            )));
        }
        Ok(match p {
            BoundMixer::Vdn => MixWeights::Vdn,
            BoundMixer::Qmix {
                w1,
                b1,
                w2,
                b2_hidden,
                b2_out,
            } => {
                let w1_raw = w1.forward(g, states)?;
                let w1 = g.abs(w1_raw);
                let b1 = b1.forward(g, states)?;
                let w2_raw = w2.forward(g, states)?;
                let w2 = g.abs(w2_raw);
                let hid = b2_hidden.forward(g, states)?;
                let hid = g.relu(hid);
                let b2 = b2_out.forward(g, hid)?;
                MixWeights::Qmix { w1, b1, w2, b2 }
            }
        })
    }

    fn check_q(&self, g: &Graph, q: NodeId, w: &MixWeights) -> Result<()> {
        let sq = g.shape(q);
        if sq.cols != self.n_agents {
            return Err(Error::Shape(format!(
                "agent values {sq} for a mixer over {} agents",
                self.n_agents
            )));
        }
        if let MixWeights::Qmix { b1, .. } = w {
            if g.shape(*b1).rows != sq.rows {
                return Err(Error::Shape(format!(
                    "agent values {sq} against mixing weights {}",
                    g.shape(*b1)
                )));
            }
        }
        Ok(())
    }

    /// `Qtot` for each row of agent values `q [rows, K]`; returns `[rows, 1]`.
    pub fn mix(&self, g: &mut Graph, w: &MixWeights, q: NodeId) -> Result<NodeId> {
        self.check_q(g, q, w)?;
        match *w {
            MixWeights::Vdn => Ok(g.sum_cols_ordered(q)),
            MixWeights::Qmix { w1, b1, w2, b2 } => {
                let pre = g.row_vecmat(q, w1)?;
                let pre = g.add(pre, b1)?;
                let hidden = g.elu(pre);
                let weighted = g.mul(hidden, w2)?;
                let out = g.sum_cols(weighted);
                g.add(out, b2)
            }
        }
    }

    /// Closed-form `dQtot/dq` for each row; returns `[rows, K]`.
    pub fn credits(&self, g: &mut Graph, w: &MixWeights, q: NodeId) -> Result<NodeId> {
        self.check_q(g, q, w)?;
        match *w {
            MixWeights::Vdn => {
                let s = g.shape(q);
                Ok(g.constant(Tensor::full(s.rows, s.cols, 1.0)))
            }
            MixWeights::Qmix { w1, b1, w2, .. } => {
                let pre = g.row_vecmat(q, w1)?;
                let pre = g.add(pre, b1)?;
                let slope = g.elu_deriv(pre);
                let v = g.mul(slope, w2)?;
                g.row_matvec(w1, v)
            }
        }
    }

    /// `mix(P q)`: agent values are permuted before mixing.
    pub fn shuffle_mix(
        &self,
        g: &mut Graph,
        w: &MixWeights,
        q: NodeId,
        perm: &Permutation,
    ) -> Result<NodeId> {
        let pq = perm.apply(g, q)?;
        self.mix(g, w, pq)
    }
}

/// Evaluates `Qtot` for one joint value vector and state.
pub fn mix(mixer: &Mixer, store: &ParamStore, q: &[f64], state: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let (w, qn) = single_row(mixer, store, &mut g, q, state)?;
    let out = mixer.mix(&mut g, &w, qn)?;
    Ok(g.value(out).item())
}

/// Closed-form credits for one joint value vector and state.
pub fn analytic_credits(mixer: &Mixer, store: &ParamStore, q: &[f64], state: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (w, qn) = single_row(mixer, store, &mut g, q, state)?;
    let x = mixer.credits(&mut g, &w, qn)?;
    Ok(g.value(x).data().to_vec())
}

/// `Qtot` of the permuted value vector.
pub fn shuffle_mix(
    mixer: &Mixer,
    store: &ParamStore,
    q: &[f64],
    state: &[f64],
    perm: &Permutation,
) -> Result<f64> {
    let mut g = Graph::new();
    let (w, qn) = single_row(mixer, store, &mut g, q, state)?;
    let out = mixer.shuffle_mix(&mut g, &w, qn, perm)?;
    Ok(g.value(out).item())
}

fn single_row(
    mixer: &Mixer,
    store: &ParamStore,
    g: &mut Graph,
    q: &[f64],
    state: &[f64],
) -> Result<(MixWeights, NodeId)> {
    let p = mixer.bind(g, store, true)?;
    let s = g.constant(Tensor::row(state));
    let w = mixer.weights(g, &p, s)?;
    let qn = g.constant(Tensor::row(q));
    Ok((w, qn))
}

/// A permutation of `K` agents; `P[i][order[i]] = 1`, so `(P q)_i = q[order[i]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Self {
            order: (0..k).collect(),
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "{order:?} is not a permutation"
                )));
            }
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn matrix(&self) -> Tensor {
        let k = self.order.len();
        let mut p = Tensor::zeros(k, k);
        for (i, &j) in self.order.iter().enumerate() {
            p.set(i, j, 1.0);
        }
        p
    }

    /// `P q` for each row of `q [rows, K]`, i.e. `q P^T`.
    pub fn apply(&self, g: &mut Graph, q: NodeId) -> Result<NodeId> {
        let pt = g.constant(self.matrix().transpose());
        g.matmul(q, pt)
    }

    pub fn apply_slice(&self, q: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&j| q[j]).collect()
    }
}

/// Uniformly random permutation of `k` agents (Fisher-Yates).
pub fn sample_permutation<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Permutation> {
    if k == 0 {
        return Err(Error::InvalidArgument("permutation of zero agents".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    Ok(Permutation { order })
}

/// Every permutation of `k` items in lexicographic order.
pub fn all_permutations(k: usize) -> Vec<Permutation> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
        if prefix.len() == used.len() {
            out.push(Permutation {
                order: prefix.clone(),
            });
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}
