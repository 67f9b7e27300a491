//! Contrastive identity-aware credit learning.
//!
//! Per episode, the credits `x^k_t = dQtot_t/dq^k_t` of every agent over the
//! horizon form a `K x N` matrix `X`. Each agent also owns a learnable identity
//! row `w^k` of the `K x N` matrix `W`. With `G = X W^T`
//! (`G[k'][k] = x^{k'} . w^k`):
//!
//! * the identity-wise loss transposes `G` so that every identity is a query
//!   scored against all `K` credit rows, and applies cross-entropy with the
//!   diagonal as targets;
//! * the credit-classification ablation skips the transpose and classifies
//!   identities from credit rows instead.
//!
//! Both reduce with a mean over all `B * K` rows of the batch.

use crate::autodiff::{Graph, NodeId};
use crate::episode::EpisodeBatch;
use crate::error::{Error, Result};
use crate::mixer::Mixer;
use crate::nn::{AgentNet, ParamSpec, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Parameter name of the identity matrix `W`.
pub const IDENTITY_PARAM: &str = "cia.identity";

/// Spec of the `K x N` identity matrix, initialized like a layer with fan-in `N`.
pub fn identity_spec(n_agents: usize, horizon: usize) -> ParamSpec {
    ParamSpec {
        name: IDENTITY_PARAM.to_string(),
        shape: Shape::new(n_agents, horizon),
        init: crate::nn::Init::Uniform { fan_in: horizon },
    }
}

/// Which contrastive objective to apply to the similarity matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Contrast {
    /// Identities query credits (transposed `G`).
    IdentityWise,
    /// Credits classify identities (no transpose).
    CreditClassification,
}

/// Temporal credits of one episode: `K x N`, zero past the episode's length.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalCredits {
    x: Tensor,
    len: usize,
}

impl TemporalCredits {
    /// Builds `X` from per-step credit vectors, zero-padding to `horizon`.
    pub fn from_steps(steps: &[Vec<f64>], horizon: usize) -> Result<Self> {
        if steps.len() > horizon {
            return Err(Error::InvalidArgument(format!(
                "{} steps exceed horizon {horizon}",
                steps.len()
            )));
        }
        let k = steps.first().map_or(0, Vec::len);
        let mut x = Tensor::zeros(k, horizon);
        for (t, step) in steps.iter().enumerate() {
            if step.len() != k {
                return Err(Error::Shape("ragged credit steps".into()));
            }
            for (a, &v) in step.iter().enumerate() {
                x.set(a, t, v);
            }
        }
        Ok(Self {
            x,
            len: steps.len(),
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_agents(&self) -> usize {
        self.x.rows()
    }

    pub fn horizon(&self) -> usize {
        self.x.cols()
    }

    /// Credit vector of all agents at step `t`.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.x.rows()).map(|k| self.x.get(k, t)).collect()
    }
}

/// Masks per-transition credits `[N*B, K]` and lays them out as `[N, B*K]`,
/// i.e. column `b*K + k` is agent `k`'s temporal credit in episode `b`.
pub fn temporal_credit_node(g: &mut Graph, credits: NodeId, batch: &EpisodeBatch) -> Result<NodeId> {
    let mask = g.constant(batch.mask.clone());
    let masked = g.mul(credits, mask)?;
    g.reshape(masked, Shape::new(batch.horizon, batch.batch * batch.n_agents))
}

/// Stacked similarity matrices `[B*K, K]`: row `b*K + k'` holds
/// `x^{k'}_b . w^k` for every identity `k`.
pub fn similarity(g: &mut Graph, temporal: NodeId, identity: NodeId) -> Result<NodeId> {
    let (st, si) = (g.shape(temporal), g.shape(identity));
    if st.rows != si.cols {
        return Err(Error::Shape(format!(
            "temporal credits {st} against identities {si}"
        )));
    }
    let xt = g.transpose(temporal);
    let wt = g.transpose(identity);
    g.matmul(xt, wt)
}

/// Sum over rows of the cross-entropy of stacked `K x K` blocks against
/// diagonal labels. Returns the sum node (callers normalize).
pub fn contrastive_sum(g: &mut Graph, sims: NodeId, contrast: Contrast) -> Result<NodeId> {
    let s = g.shape(sims);
    let k = s.cols;
    if k == 0 || s.rows % k != 0 {
        return Err(Error::Shape(format!("similarity stack {s} is not K x K blocks")));
    }
    if !g.value(sims).is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let logits = match contrast {
        Contrast::CreditClassification => sims,
        Contrast::IdentityWise => {
            let blocks = s.rows / k;
            let index: Vec<usize> = (0..blocks)
                .flat_map(|b| (0..k).flat_map(move |i| (0..k).map(move |j| b * k * k + j * k + i)))
                .collect();
            g.gather(sims, s, &index)?
        }
    };
    let logp = g.log_softmax_rows(logits);
    let labels: Vec<usize> = (0..s.rows).map(|r| r % k).collect();
    let picked = g.gather_cols(logp, &labels)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// Mean contrastive loss over the stacked blocks.
pub fn contrastive_loss(g: &mut Graph, sims: NodeId, contrast: Contrast) -> Result<NodeId> {
    let rows = g.shape(sims).rows;
    let total = contrastive_sum(g, sims, contrast)?;
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// Identity-wise InfoNCE loss of similarity matrices `G` (one `K x K` per episode).
pub fn infonce_loss(sims: &[Tensor]) -> Result<f64> {
    loss_from_similarities(sims, Contrast::IdentityWise)
}

/// Credit-classification loss of similarity matrices `G`.
pub fn cc_loss(sims: &[Tensor]) -> Result<f64> {
    loss_from_similarities(sims, Contrast::CreditClassification)
}

fn loss_from_similarities(sims: &[Tensor], contrast: Contrast) -> Result<f64> {
    let first = sims
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty similarity batch".into()))?;
    let k = first.rows();
    let mut data = Vec::with_capacity(sims.len() * k * k);
    for s in sims {
        if s.shape() != Shape::new(k, k) {
            return Err(Error::Shape(format!("similarity {} is not {k} x {k}", s.shape())));
        }
        data.extend_from_slice(s.data());
    }
    let mut g = Graph::new();
    let stacked = g.constant(Tensor::new(Shape::new(sims.len() * k, k), data)?);
    let loss = contrastive_loss(&mut g, stacked, contrast)?;
    Ok(g.value(loss).item())
}

/// Loss of a batch of temporal credits against identities `W`.
pub fn credit_loss(credits: &[TemporalCredits], identity: &Tensor, contrast: Contrast) -> Result<f64> {
    let sims = credits
        .iter()
        .map(|c| {
            if c.n_agents() != identity.rows() || c.horizon() != identity.cols() {
                return Err(Error::Shape(format!(
                    "credits {} against identities {}",
                    c.matrix().shape(),
                    identity.shape()
                )));
            }
            c.matrix().matmul(&identity.transpose())
        })
        .collect::<Result<Vec<_>>>()?;
    loss_from_similarities(&sims, contrast)
}

/// `log(K) - L`, the mutual-information lower bound implied by a contrastive loss.
pub fn mi_lower_bound(loss: f64, n_agents: usize) -> f64 {
    (n_agents as f64).ln() - loss
}

/// `L_TD + alpha * L_CL`.
pub fn total_loss(g: &mut Graph, td: NodeId, cl: NodeId, alpha: f64) -> Result<NodeId> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let weighted = g.scale(cl, alpha);
    g.add(td, weighted)
}

/// Replays one episode through `agent` and `mixer` and returns its temporal
/// credits, padded to `horizon`.
pub fn temporal_credits(
    episode: &crate::episode::Episode,
    agent: &AgentNet,
    mixer: &Mixer,
    store: &ParamStore,
    horizon: usize,
) -> Result<TemporalCredits> {
    let steps = crate::diagnostics::replay_credits(episode, agent, mixer, store)?;
    TemporalCredits::from_steps(&steps, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cross-entropy over rows of the transposed matrix, written out directly.
    fn reference_infonce(gs: &[Tensor]) -> f64 {
        let mut total = 0.0;
        let mut rows = 0;
        for gm in gs {
            let k = gm.rows();
            for id in 0..k {
                // row `id` of G^T is column `id` of G
                let logits: Vec<f64> = (0..k).map(|c| gm.get(c, id)).collect();
                let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += lse - logits[id];
                rows += 1;
            }
        }
        total / rows as f64
    }

    #[test]
    fn zero_similarity_gives_log_k() {
        assert!((infonce_loss(&[Tensor::zeros(3, 3)]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((cc_loss(&[Tensor::zeros(3, 3)]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scaled_identity_closed_form() {
        let g = Tensor::identity(2).scale(10.0);
        let expected = (1.0 + (-10f64).exp()).ln();
        assert!((infonce_loss(&[g]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_cross_entropy() {
        let gs = vec![
            Tensor::from_rows(&[&[0.3, -1.2, 2.0], &[0.5, 0.1, -0.7], &[1.5, 2.5, 0.0]]).unwrap(),
            Tensor::from_rows(&[&[-0.2, 0.9, 0.4], &[3.0, -2.0, 1.0], &[0.0, 0.0, 0.8]]).unwrap(),
        ];
        let a = infonce_loss(&gs).unwrap();
        assert!((a - reference_infonce(&gs)).abs() < 1e-12);
    }

    #[test]
    fn transpose_matters_only_for_asymmetric_g() {
        let sym = Tensor::from_rows(&[&[1.0, 0.5], &[0.5, -2.0]]).unwrap();
        assert_eq!(infonce_loss(&[sym.clone()]).unwrap(), cc_loss(&[sym]).unwrap());
        let asym = Tensor::from_rows(&[&[0.0, 5.0], &[0.0, 0.0]]).unwrap();
        let a = infonce_loss(&[asym.clone()]).unwrap();
        let c = cc_loss(&[asym]).unwrap();
        // identity-wise: rows of G^T are [0,0] and [5,0]
        let expected_a = 0.5 * (2f64.ln() + (1.0 + 5f64.exp()).ln());
        // classification: rows of G are [0,5] and [0,0]
        let expected_c = 0.5 * ((1.0 + 5f64.exp()).ln() + 2f64.ln());
        assert!((a - expected_a).abs() < 1e-12);
        assert!((c - expected_c).abs() < 1e-12);
        // this particular G has the same multiset of rows as its transpose
        assert!((a - c).abs() < 1e-12);
        let asym2 = Tensor::from_rows(&[&[1.0, 5.0], &[0.0, 0.0]]).unwrap();
        assert_ne!(infonce_loss(&[asym2.clone()]).unwrap(), cc_loss(&[asym2]).unwrap());
    }

    #[test]
    fn non_finite_similarity_is_rejected() {
        let bad = Tensor::from_rows(&[&[f64::NAN, 0.0], &[0.0, 0.0]]).unwrap();
        assert!(infonce_loss(&[bad]).is_err());
    }

    #[test]
    fn mi_bound_values() {
        assert_eq!(mi_lower_bound(2f64.ln(), 2), 0.0);
        assert_eq!(mi_lower_bound(0.0, 4), 4f64.ln());
    }

    #[test]
    fn total_loss_combines_terms() {
        let mut g = Graph::new();
        let td = g.constant(Tensor::scalar(1.0));
        let cl = g.constant(Tensor::scalar(2.0));
        let all = total_loss(&mut g, td, cl, 0.02).unwrap();
        assert!((g.value(all).item() - 1.04).abs() < 1e-15);
        let plain = total_loss(&mut g, td, cl, 0.0).unwrap();
        assert_eq!(g.value(plain).item(), 1.0);
        assert!(total_loss(&mut g, td, cl, -1.0).is_err());
    }

    #[test]
    fn temporal_credits_are_zero_padded() {
        let steps = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let tc = TemporalCredits::from_steps(&steps, 5).unwrap();
        assert_eq!(tc.column(1), vec![3.0, 4.0]);
        assert_eq!(tc.column(3), vec![0.0, 0.0]);
        assert_eq!(tc.column(4), vec![0.0, 0.0]);
        assert!(TemporalCredits::from_steps(&steps, 2).is_err());
    }

    #[test]
    fn credit_loss_uses_g_equals_x_w_transpose() {
        let steps = vec![vec![1.0, 0.0], vec![0.5, 2.0]];
        let tc = TemporalCredits::from_steps(&steps, 3).unwrap();
        let w = Tensor::from_rows(&[&[0.2, -0.4, 9.0], &[1.0, 0.3, -9.0]]).unwrap();
        let g = tc.matrix().matmul(&w.transpose()).unwrap();
        let direct = infonce_loss(&[g]).unwrap();
        let via = credit_loss(&[tc], &w, Contrast::IdentityWise).unwrap();
        assert_eq!(direct, via);
    }
}
