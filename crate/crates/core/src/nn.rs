//! Parameters, layers, the recurrent agent network and the RMSprop optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Named learnable tensors plus the optimizer's running mean-square state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    sq_avg: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a parameter and resets its accumulator.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.sq_avg
            .insert(name.clone(), Tensor::zeros(value.rows(), value.cols()));
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Schema(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn accumulators(&self) -> &BTreeMap<String, Tensor> {
        &self.sq_avg
    }

    /// Rebuilds a store from saved parameters and (optionally) accumulators.
    pub fn from_parts(
        params: BTreeMap<String, Tensor>,
        accumulators: Option<BTreeMap<String, Tensor>>,
    ) -> Result<Self> {
        let sq_avg = match accumulators {
            Some(acc) => {
                for (name, p) in &params {
                    match acc.get(name) {
                        Some(a) if a.shape() == p.shape() => {}
                        _ => {
                            return Err(Error::Schema(format!(
                                "accumulator for {name} missing or mis-shaped"
                            )))
                        }
                    }
                }
                if acc.len() != params.len() {
                    return Err(Error::Schema("accumulators name unknown parameters".into()));
                }
                acc
            }
            None => params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        };
        Ok(Self { params, sq_avg })
    }

    /// Adds every parameter of `other`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for name in other.params.keys() {
            if self.params.contains_key(name) {
                return Err(Error::Schema(format!("duplicate parameter {name}")));
            }
        }
        self.params.extend(other.params);
        self.sq_avg.extend(other.sq_avg);
        Ok(())
    }

    /// Names and shapes, used to check that two stores are interchangeable.
    pub fn schema(&self) -> Vec<(String, Shape)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape()))
            .collect()
    }

    /// Registers `name` as a learnable leaf of `g`.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        Ok(g.param(name, self.get(name)?))
    }

    /// Registers `name` as a constant of `g` (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        Ok(g.constant(self.get(name)?.clone()))
    }
}

/// How a parameter is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            shape: Shape::new(fan_in, fan_out),
            init: Init::Uniform { fan_in },
        }
    }

    pub fn bias(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            shape: Shape::new(1, width),
            init: Init::Zeros,
        }
    }
}

/// Draws a fresh store for `specs`, in order.
pub fn init_params<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in specs {
        if store.contains(&spec.name) {
            return Err(Error::Schema(format!("duplicate parameter {}", spec.name)));
        }
        let data = match spec.init {
            Init::Zeros => vec![0.0; spec.shape.len()],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..spec.shape.len())
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape, data)?);
    }
    Ok(store)
}

/// Specs for a fully connected layer `x W + b` named `prefix.weight`/`prefix.bias`.
pub fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::weight(format!("{prefix}.weight"), fan_in, fan_out),
        ParamSpec::bias(format!("{prefix}.bias"), fan_out),
    ]
}

/// A bound linear layer.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Linear {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str, frozen: bool) -> Result<Self> {
        let w = format!("{prefix}.weight");
        let b = format!("{prefix}.bias");
        Ok(if frozen {
            Self {
                weight: store.bind_frozen(g, &w)?,
                bias: store.bind_frozen(g, &b)?,
            }
        } else {
            Self {
                weight: store.bind(g, &w)?,
                bias: store.bind(g, &b)?,
            }
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, self.weight)?;
        g.add(xw, self.bias)
    }
}

/// Recurrent per-agent utility network shared by all agents:
/// `relu(fc1) -> GRU cell -> fc2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentNet {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub hidden: usize,
}

/// Parameter nodes of an [`AgentNet`] bound into one graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundAgent {
    fc1: Linear,
    w_ih: NodeId,
    b_ih: NodeId,
    w_hh: NodeId,
    b_hh: NodeId,
    fc2: Linear,
}

impl AgentNet {
    /// Width of one input row: observation, last-action one-hot, agent-id one-hot.
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (i, h, a) = (self.input_dim(), self.hidden, self.n_actions);
        let mut specs = Vec::new();
        specs.extend(linear_specs("agent.fc1", i, h));
        specs.push(ParamSpec::weight("agent.gru.w_ih", h, 3 * h));
        specs.push(ParamSpec::bias("agent.gru.b_ih", 3 * h));
        specs.push(ParamSpec::weight("agent.gru.w_hh", h, 3 * h));
        specs.push(ParamSpec::bias("agent.gru.b_hh", 3 * h));
        specs.extend(linear_specs("agent.fc2", h, a));
        specs
    }

    /// Assembles one agent's input row.
    pub fn input_row(&self, obs: &[f64], last_action: Option<usize>, agent: usize) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape(format!(
                "observation has {} features, network expects {}",
                obs.len(),
                self.obs_dim
            )));
        }
        if agent >= self.n_agents {
            return Err(Error::InvalidArgument(format!("agent index {agent}")));
        }
        let mut row = Vec::with_capacity(self.input_dim());
        row.extend_from_slice(obs);
        let mut act = vec![0.0; self.n_actions];
        if let Some(a) = last_action {
            *act
                .get_mut(a)
                .ok_or_else(|| Error::InvalidArgument(format!("action {a}")))? = 1.0;
        }
        row.extend(act);
        let mut id = vec![0.0; self.n_agents];
        id[agent] = 1.0;
        row.extend(id);
        Ok(row)
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore, frozen: bool) -> Result<BoundAgent> {
        let get = |g: &mut Graph, name: &str| {
            if frozen {
                store.bind_frozen(g, name)
            } else {
                store.bind(g, name)
            }
        };
        Ok(BoundAgent {
            fc1: Linear::bind(g, store, "agent.fc1", frozen)?,
            w_ih: get(g, "agent.gru.w_ih")?,
            b_ih: get(g, "agent.gru.b_ih")?,
            w_hh: get(g, "agent.gru.w_hh")?,
            b_hh: get(g, "agent.gru.b_hh")?,
            fc2: Linear::bind(g, store, "agent.fc2", frozen)?,
        })
    }

    /// One recurrent step for a stack of agent rows.
    ///
    /// `inputs` is `[rows, input_dim]`, `hidden` is `[rows, hidden]`; returns
    /// the action values `[rows, n_actions]` and the next hidden state.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &BoundAgent,
        inputs: NodeId,
        hidden: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (si, sh) = (g.shape(inputs), g.shape(hidden));
        if si.cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "agent input {si} but network expects {} features",
                self.input_dim()
            )));
        }
        if sh != Shape::new(si.rows, self.hidden) {
            return Err(Error::Shape(format!("hidden state {sh} for input {si}")));
        }
        let h = self.hidden;
        let pre = p.fc1.forward(g, inputs)?;
        let x = g.relu(pre);

        let gi = g.matmul(x, p.w_ih)?;
        let gi = g.add(gi, p.b_ih)?;
        let gh = g.matmul(hidden, p.w_hh)?;
        let gh = g.add(gh, p.b_hh)?;

        let gi_rz = g.slice_cols(gi, 0, 2 * h)?;
        let gh_rz = g.slice_cols(gh, 0, 2 * h)?;
        let rz_pre = g.add(gi_rz, gh_rz)?;
        let rz = g.sigmoid(rz_pre);
        let r = g.slice_cols(rz, 0, h)?;
        let z = g.slice_cols(rz, h, 2 * h)?;

        let gi_n = g.slice_cols(gi, 2 * h, 3 * h)?;
        let gh_n = g.slice_cols(gh, 2 * h, 3 * h)?;
        let gated = g.mul(r, gh_n)?;
        let n_pre = g.add(gi_n, gated)?;
        let n = g.tanh(n_pre);

        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(hidden, n)?;
        let zd = g.mul(z, diff)?;
        let next = g.add(n, zd)?;

        let q = p.fc2.forward(g, next)?;
        Ok((q, next))
    }

    /// Single-agent convenience wrapper over [`AgentNet::step`].
    pub fn agent_forward(
        &self,
        store: &ParamStore,
        obs: &[f64],
        last_action: Option<usize>,
        agent: usize,
        hidden: &Tensor,
    ) -> Result<(Vec<f64>, Tensor)> {
        let row = self.input_row(obs, last_action, agent)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, store, true)?;
        let x = g.constant(Tensor::row(&row));
        let h = g.constant(hidden.clone());
        let (q, h2) = self.step(&mut g, &p, x, h)?;
        Ok((g.value(q).data().to_vec(), g.value(h2).clone()))
    }
}

/// One RMSprop update (no momentum, no weight decay):
/// `ms = smoothing * ms + (1 - smoothing) * g^2; p -= lr * g / (sqrt(ms) + eps)`.
///
/// Parameters without an entry in `grads` are treated as having zero gradient.
pub fn rmsprop_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    smoothing: f64,
    eps: f64,
) -> Result<()> {
    for (name, p) in store.params.iter_mut() {
        let ms = store.sq_avg.get_mut(name).expect("accumulator per parameter");
        match grads.get(name) {
            Some(gr) => {
                if gr.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for {name} is {}, parameter is {}",
                        gr.shape(),
                        p.shape()
                    )));
                }
                for ((pv, mv), &gv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(ms.data_mut().iter_mut())
                    .zip(gr.data())
                {
                    *mv = smoothing * *mv + (1.0 - smoothing) * gv * gv;
                    *pv -= lr * gv / (mv.sqrt() + eps);
                }
            }
            None => {
                for mv in ms.data_mut() {
                    *mv *= smoothing;
                }
            }
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
    norm
}

/// Overwrites `target`'s parameters with deep copies of `online`'s.
pub fn sync_target(online: &ParamStore, target: &mut ParamStore) -> Result<()> {
    if online.schema() != target.schema() {
        return Err(Error::Schema(
            "target store does not match online store".into(),
        ));
    }
    target.params = online.params.clone();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> AgentNet {
        AgentNet {
            obs_dim: 5,
            n_actions: 3,
            n_agents: 2,
            hidden: 4,
        }
    }

    fn zero_store(net: &AgentNet) -> ParamStore {
        let mut s = ParamStore::new();
        for spec in net.param_specs() {
            s.insert(spec.name, Tensor::zeros(spec.shape.rows, spec.shape.cols));
        }
        s
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let specs = vec![
            ParamSpec::weight("w", 4, 7),
            ParamSpec::bias("b", 7),
            ParamSpec::weight("v", 9, 2),
        ];
        let s = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        assert!(s.get("v").unwrap().data().iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert!(s.get("b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let specs = net().param_specs();
        let a = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_parameters_halve_the_hidden_state() {
        let n = net();
        let store = zero_store(&n);
        let h = Tensor::row(&[1.0, -2.0, 0.5, 4.0]);
        let (q, h2) = n
            .agent_forward(&store, &[1.0, 0.0, 1.0, 1.0, 0.0], Some(2), 1, &h)
            .unwrap();
        assert_eq!(h2, h.scale(0.5));
        assert_eq!(q, vec![0.0; 3]);

        let (q, h2) = n
            .agent_forward(&store, &[0.0; 5], None, 0, &Tensor::zeros(1, 4))
            .unwrap();
        assert_eq!(q, vec![0.0; 3]);
        assert_eq!(h2, Tensor::zeros(1, 4));
    }

    #[test]
    fn agent_identity_changes_values() {
        let n = net();
        let store = init_params(&n.param_specs(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let obs = [1.0, 0.0, 0.0, 1.0, 1.0];
        let h = Tensor::zeros(1, 4);
        let (q0, _) = n.agent_forward(&store, &obs, None, 0, &h).unwrap();
        let (q1, _) = n.agent_forward(&store, &obs, None, 1, &h).unwrap();
        assert_ne!(q0, q1);
    }

    #[test]
    fn feature_length_mismatch_is_rejected() {
        let n = net();
        let store = zero_store(&n);
        assert!(n
            .agent_forward(&store, &[0.0; 4], None, 0, &Tensor::zeros(1, 4))
            .is_err());
    }

    #[test]
    fn rmsprop_first_step_by_hand() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.0));
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        rmsprop_step(&mut s, &grads, 5e-4, 0.99, 1e-5).unwrap();
        // ms = 0.01, sqrt(ms) = 0.1
        assert!((s.accumulators()["p"].item() - 0.01).abs() < 1e-17);
        let expected = -5e-4 / (0.1 + 1e-5);
        assert!((s.get("p").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_zero_or_missing_gradient_keeps_parameter() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.25));
        s.insert("q", Tensor::scalar(-3.0));
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
        rmsprop_step(&mut s, &grads, 5e-4, 0.99, 1e-5).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 1.25);
        assert_eq!(s.get("q").unwrap().item(), -3.0);
    }

    #[test]
    fn rmsprop_steps_shrink_under_constant_gradient() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.0));
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        let mut last = 0.0;
        let mut steps = Vec::new();
        for _ in 0..3 {
            rmsprop_step(&mut s, &grads, 5e-4, 0.99, 1e-5).unwrap();
            let now = s.get("p").unwrap().item();
            steps.push((now - last).abs());
            last = now;
        }
        assert!(steps[1] < steps[0] && steps[2] < steps[1]);
    }

    #[test]
    fn sync_is_a_deep_idempotent_copy() {
        let n = net();
        let mut online = init_params(&n.param_specs(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut target = init_params(&n.param_specs(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        sync_target(&online, &mut target).unwrap();
        assert_eq!(online.params(), target.params());
        let obs = [0.0, 1.0, 0.0, 0.0, 1.0];
        let h = Tensor::row(&[0.1, 0.2, 0.3, 0.4]);
        let a = n.agent_forward(&online, &obs, Some(1), 0, &h).unwrap();
        let b = n.agent_forward(&target, &obs, Some(1), 0, &h).unwrap();
        assert_eq!(a, b);

        let snapshot = target.clone();
        online.get_mut("agent.fc2.bias").unwrap().data_mut()[0] = 99.0;
        assert_eq!(target, snapshot);

        let mut again = target.clone();
        sync_target(&target, &mut again).unwrap();
        assert_eq!(again.params(), target.params());
    }

    #[test]
    fn sync_rejects_schema_mismatch() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::zeros(1, 2));
        let mut b = ParamStore::new();
        b.insert("x", Tensor::zeros(2, 1));
        assert!(sync_target(&a, &mut b).is_err());
    }
}
