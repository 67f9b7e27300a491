//! Recorded trajectories, padded batches and the replay buffer.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::env::{StepLog, TurnState};
use crate::error::{Error, Result};
use crate::nn::{AgentNet, BoundAgent};
use crate::tensor::{Shape, Tensor};

/// One trajectory: `len + 1` observations/states around `len` joint actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    n_agents: usize,
    obs_dim: usize,
    state_dim: usize,
    obs: Vec<f64>,
    states: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    owners: Vec<usize>,
    terminated: bool,
}

impl Episode {
    pub fn new(first_obs: &[Vec<f64>], first_state: &[f64], owner: Option<usize>) -> Self {
        let obs_dim = first_obs.first().map_or(0, Vec::len);
        Self {
            n_agents: first_obs.len(),
            obs_dim,
            state_dim: first_state.len(),
            obs: first_obs.concat(),
            states: first_state.to_vec(),
            actions: Vec::new(),
            rewards: Vec::new(),
            owners: owner.into_iter().collect(),
            terminated: false,
        }
    }

    /// Appends one transition.
    pub fn push(
        &mut self,
        actions: &[usize],
        reward: f64,
        next_obs: &[Vec<f64>],
        next_state: &[f64],
        next_owner: Option<usize>,
        done: bool,
    ) -> Result<()> {
        if self.terminated {
            return Err(Error::InvalidArgument("episode already terminated".into()));
        }
        if actions.len() != self.n_agents
            || next_obs.len() != self.n_agents
            || next_obs.iter().any(|o| o.len() != self.obs_dim)
            || next_state.len() != self.state_dim
        {
            return Err(Error::Shape("transition does not match episode schema".into()));
        }
        self.actions.extend_from_slice(actions);
        self.rewards.push(reward);
        for o in next_obs {
            self.obs.extend_from_slice(o);
        }
        self.states.extend_from_slice(next_state);
        if let Some(owner) = next_owner {
            self.owners.push(owner);
        }
        self.terminated = done;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Observation of `agent` at step `t` (`t <= len`).
    pub fn obs(&self, t: usize, agent: usize) -> &[f64] {
        let start = (t * self.n_agents + agent) * self.obs_dim;
        &self.obs[start..start + self.obs_dim]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn actions(&self, t: usize) -> &[usize] {
        &self.actions[t * self.n_agents..(t + 1) * self.n_agents]
    }

    pub fn reward(&self, t: usize) -> f64 {
        self.rewards[t]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Round owner at each of the `len + 1` states, when the game has one.
    pub fn owners(&self) -> &[usize] {
        &self.owners
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }

    /// Per-step records for a Turn episode, decoded from the stored states.
    pub fn turn_log(&self) -> Result<Vec<StepLog>> {
        (0..self.len())
            .map(|t| {
                let s = TurnState::from_state_vector(self.state(t))?;
                Ok(StepLog {
                    t,
                    positions: s.positions,
                    owner: s.owner,
                    actions: self.actions(t).to_vec(),
                    reward: self.reward(t),
                    done: self.terminated && t + 1 == self.len(),
                })
            })
            .collect()
    }
}

/// `B` episodes padded to a common horizon `N`, laid out for batched graphs.
///
/// Agent rows at one step are ordered `b * K + k`; per-transition rows are
/// ordered `t * B + b`.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub batch: usize,
    pub n_agents: usize,
    pub horizon: usize,
    /// `horizon + 1` agent-input matrices `[B*K, input_dim]`.
    pub inputs: Vec<Tensor>,
    /// `horizon` action lists of length `B*K` (0 on padding).
    pub actions: Vec<Vec<usize>>,
    /// `[N*B, S]`, state at `t`.
    pub states: Tensor,
    /// `[N*B, S]`, state at `t + 1`.
    pub next_states: Tensor,
    pub rewards: Tensor,
    /// 1 on valid transitions, 0 on padding.
    pub mask: Tensor,
    /// 0 where the transition ends the episode.
    pub not_terminal: Tensor,
    pub lengths: Vec<usize>,
}

impl EpisodeBatch {
    pub fn new(episodes: &[&Episode], horizon: usize, agent: &AgentNet) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty episode batch".into()))?;
        let (b, k, sd) = (episodes.len(), first.n_agents, first.state_dim);
        if k != agent.n_agents || first.obs_dim != agent.obs_dim {
            return Err(Error::Schema("episodes do not match the agent network".into()));
        }
        for e in episodes {
            if e.len() > horizon {
                return Err(Error::InvalidArgument(format!(
                    "episode of length {} exceeds horizon {horizon}",
                    e.len()
                )));
            }
            if e.n_agents != k || e.state_dim != sd || e.obs_dim != first.obs_dim {
                return Err(Error::Schema("episodes in a batch differ in schema".into()));
            }
        }
        let in_dim = agent.input_dim();
        let mut inputs = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let mut data = vec![0.0; b * k * in_dim];
            for (bi, e) in episodes.iter().enumerate() {
                if t > e.len() {
                    continue;
                }
                for ki in 0..k {
                    let last = (t > 0).then(|| e.actions(t - 1)[ki]);
                    let row = agent.input_row(e.obs(t, ki), last, ki)?;
                    let at = (bi * k + ki) * in_dim;
                    data[at..at + in_dim].copy_from_slice(&row);
                }
            }
            inputs.push(Tensor::new(Shape::new(b * k, in_dim), data)?);
        }

        let rows = horizon * b;
        let mut actions = vec![vec![0; b * k]; horizon];
        let mut states = vec![0.0; rows * sd];
        let mut next_states = vec![0.0; rows * sd];
        let mut rewards = vec![0.0; rows];
        let mut mask = vec![0.0; rows];
        let mut not_terminal = vec![1.0; rows];
        for (bi, e) in episodes.iter().enumerate() {
            for t in 0..e.len() {
                let r = t * b + bi;
                actions[t][bi * k..(bi + 1) * k].copy_from_slice(e.actions(t));
                states[r * sd..(r + 1) * sd].copy_from_slice(e.state(t));
                next_states[r * sd..(r + 1) * sd].copy_from_slice(e.state(t + 1));
                rewards[r] = e.reward(t);
                mask[r] = 1.0;
                if e.terminated && t + 1 == e.len() {
                    not_terminal[r] = 0.0;
                }
            }
        }
        Ok(Self {
            batch: b,
            n_agents: k,
            horizon,
            inputs,
            actions,
            states: Tensor::new(Shape::new(rows, sd), states)?,
            next_states: Tensor::new(Shape::new(rows, sd), next_states)?,
            rewards: Tensor::new(Shape::new(rows, 1), rewards)?,
            mask: Tensor::new(Shape::new(rows, 1), mask)?,
            not_terminal: Tensor::new(Shape::new(rows, 1), not_terminal)?,
            lengths: episodes.iter().map(|e| e.len()).collect(),
        })
    }

    pub fn valid_steps(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Runs the shared agent network over every step of the batch from a zero
/// hidden state; returns `horizon + 1` action-value nodes `[B*K, A]`.
pub fn unroll_agents(
    g: &mut Graph,
    agent: &AgentNet,
    bound: &BoundAgent,
    batch: &EpisodeBatch,
) -> Result<Vec<NodeId>> {
    let rows = batch.batch * batch.n_agents;
    let mut hidden = g.constant(Tensor::zeros(rows, agent.hidden));
    let mut out = Vec::with_capacity(batch.inputs.len());
    for x in &batch.inputs {
        let xn = g.constant(x.clone());
        let (q, h) = agent.step(g, bound, xn, hidden)?;
        out.push(q);
        hidden = h;
    }
    Ok(out)
}

/// Values of the taken actions, stacked as `[N*B, K]`.
pub fn chosen_values(g: &mut Graph, q_steps: &[NodeId], batch: &EpisodeBatch) -> Result<NodeId> {
    let mut per_step = Vec::with_capacity(batch.horizon);
    for t in 0..batch.horizon {
        let picked = g.gather_cols(q_steps[t], &batch.actions[t])?;
        per_step.push(g.reshape(picked, Shape::new(batch.batch, batch.n_agents))?);
    }
    g.concat_rows(&per_step)
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    /// `n` distinct episodes chosen uniformly, or `None` if too few are stored.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Vec<&Episode>> {
        if n == 0 || self.episodes.len() < n {
            return None;
        }
        let idx = rand::seq::index::sample(rng, self.episodes.len(), n);
        Some(idx.iter().map(|i| &self.episodes[i]).collect())
    }
}
