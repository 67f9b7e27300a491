//! A complete learner: agent network, mixer and their parameters.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::cia::identity_spec;
use crate::error::{Error, Result};
use crate::mixer::{Mixer, MixerKind};
use crate::nn::{init_params, AgentNet, BoundAgent, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Model {
    pub agent: AgentNet,
    pub mixer: Mixer,
    /// Agent, mixer and identity parameters in one store.
    pub params: ParamStore,
    /// Length the identity rows are padded to.
    pub horizon: usize,
}

/// Network sizes needed to rebuild a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub hidden: usize,
    pub mixer: MixerKind,
    pub embed: usize,
    pub horizon: usize,
}

impl Architecture {
    pub fn agent(&self) -> AgentNet {
        AgentNet {
            obs_dim: self.obs_dim,
            n_actions: self.n_actions,
            n_agents: self.n_agents,
            hidden: self.hidden,
        }
    }

    pub fn mixer(&self) -> Mixer {
        Mixer {
            kind: self.mixer,
            n_agents: self.n_agents,
            state_dim: self.state_dim,
            embed: self.embed,
        }
    }
}

impl Model {
    /// Fresh parameters: agent, then mixer, then identities, from one stream.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let agent = arch.agent();
        let mixer = arch.mixer();
        let mut specs = agent.param_specs();
        specs.extend(mixer.param_specs());
        specs.push(identity_spec(arch.n_agents, arch.horizon));
        let params = init_params(&specs, rng)?;
        Ok(Self {
            agent,
            mixer,
            params,
            horizon: arch.horizon,
        })
    }

    /// Wraps an existing store, checking it carries every expected parameter.
    pub fn from_params(arch: &Architecture, params: ParamStore) -> Result<Self> {
        let agent = arch.agent();
        let mixer = arch.mixer();
        let mut specs = agent.param_specs();
        specs.extend(mixer.param_specs());
        specs.push(identity_spec(arch.n_agents, arch.horizon));
        if specs.len() != params.len() {
            return Err(Error::Schema(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let have = params.get(&s.name)?.shape();
            if have != s.shape {
                return Err(Error::Schema(format!(
                    "parameter {} is {have}, expected {}",
                    s.name, s.shape
                )));
            }
        }
        Ok(Self {
            agent,
            mixer,
            params,
            horizon: arch.horizon,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            n_agents: self.agent.n_agents,
            n_actions: self.agent.n_actions,
            obs_dim: self.agent.obs_dim,
            state_dim: self.mixer.state_dim,
            hidden: self.agent.hidden,
            mixer: self.mixer.kind,
            embed: self.mixer.embed,
            horizon: self.horizon,
        }
    }

    /// Agents, observations and states agree, so the two models can replay
    /// each other's trajectories.
    pub fn compatible_with(&self, other: &Model) -> bool {
        let (a, b) = (self.architecture(), other.architecture());
        a.n_agents == b.n_agents
            && a.n_actions == b.n_actions
            && a.obs_dim == b.obs_dim
            && a.state_dim == b.state_dim
    }

    pub fn runner(&self) -> Result<AgentRunner<'_>> {
        AgentRunner::new(&self.agent, &self.params)
    }
}

/// Steps the shared agent network for all agents of one episode, carrying the
/// hidden state between calls.
pub struct AgentRunner<'a> {
    net: &'a AgentNet,
    g: Graph,
    bound: BoundAgent,
    hidden: NodeId,
    last: Option<Vec<usize>>,
}

impl<'a> AgentRunner<'a> {
    pub fn new(net: &'a AgentNet, store: &ParamStore) -> Result<Self> {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, store, true)?;
        let hidden = g.constant(Tensor::zeros(net.n_agents, net.hidden));
        Ok(Self {
            net,
            g,
            bound,
            hidden,
            last: None,
        })
    }

    /// Action values `[K, A]` for the current observations of all agents.
    pub fn q_values(&mut self, observations: &[Vec<f64>]) -> Result<Tensor> {
        let k = self.net.n_agents;
        if observations.len() != k {
            return Err(Error::Shape(format!(
                "{} observations for {k} agents",
                observations.len()
            )));
        }
        let mut data = Vec::with_capacity(k * self.net.input_dim());
        for (a, obs) in observations.iter().enumerate() {
            let last = self.last.as_ref().map(|l| l[a]);
            data.extend(self.net.input_row(obs, last, a)?);
        }
        let x = self
            .g
            .constant(Tensor::new(Shape::new(k, self.net.input_dim()), data)?);
        let (q, h) = self.net.step(&mut self.g, &self.bound, x, self.hidden)?;
        self.hidden = h;
        Ok(self.g.value(q).clone())
    }

    /// Records the joint action fed back as input on the next step.
    pub fn record_actions(&mut self, actions: &[usize]) {
        self.last = Some(actions.to_vec());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn arch() -> Architecture {
        Architecture {
            n_agents: 2,
            n_actions: 3,
            obs_dim: 4,
            state_dim: 5,
            hidden: 6,
            mixer: MixerKind::Qmix,
            embed: 4,
            horizon: 7,
        }
    }

    #[test]
    fn runner_matches_single_agent_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(&arch(), &mut rng).unwrap();
        let obs = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 1.0, 0.5]];
        let mut r = m.runner().unwrap();
        let q0 = r.q_values(&obs).unwrap();
        r.record_actions(&[2, 0]);
        let q1 = r.q_values(&obs).unwrap();

        for a in 0..2 {
            let h0 = Tensor::zeros(1, 6);
            let (qa, h1) = m.agent.agent_forward(&m.params, &obs[a], None, a, &h0).unwrap();
            assert!((qa[0] - q0.get(a, 0)).abs() < 1e-12);
            let (qb, _) = m
                .agent
                .agent_forward(&m.params, &obs[a], Some([2, 0][a]), a, &h1)
                .unwrap();
            for j in 0..3 {
                assert!((qb[j] - q1.get(a, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_params_checks_schema() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(&arch(), &mut rng).unwrap();
        assert!(Model::from_params(&arch(), m.params.clone()).is_ok());
        let mut other = arch();
        other.hidden = 7;
        assert!(Model::from_params(&other, m.params).is_err());
    }
}
