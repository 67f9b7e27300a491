//! Rollouts, the TD / contrastive training step, evaluation and the run loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::cia::{contrastive_sum, similarity, temporal_credit_node, Contrast, IDENTITY_PARAM};
use crate::config::{CiaMode, RlSection, TrainConfig};
use crate::env::{oracle_policy, Environment, TurnEnv, EPISODE_LIMIT, N_ACTIONS, N_AGENTS, OBS_DIM, STATE_DIM};
use crate::episode::{chosen_values, unroll_agents, Episode, EpisodeBatch, ReplayBuffer};
use crate::error::{Error, Result};
use crate::mixer::{analytic_credits, sample_permutation, MixerKind, Permutation};
use crate::model::{Architecture, Model};
use crate::nn::{clip_grad_norm, rmsprop_step, sync_target, ParamStore};
use crate::par::Exec;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Shape, Tensor};

/// Mean return of the scripted oracle over 1000 evaluation episodes (seed 0).
pub const ORACLE_RETURN: f64 = 222.8;

/// Identifier written into checkpoints and manifests.
pub const CODE_ID: &str = concat!("cia-core ", env!("CARGO_PKG_VERSION"));

/// Linear decay from `epsilon_start` to `epsilon_end` over the anneal horizon.
pub fn epsilon_schedule(t: usize, rl: &RlSection) -> f64 {
    if rl.epsilon_anneal_steps == 0 || t >= rl.epsilon_anneal_steps {
        return rl.epsilon_end;
    }
    let frac = t as f64 / rl.epsilon_anneal_steps as f64;
    rl.epsilon_start + (rl.epsilon_end - rl.epsilon_start) * frac
}

fn run_episode<E, R>(
    env: &mut E,
    model: &Model,
    epsilon: f64,
    rng: &mut R,
    mut live_credits: Option<&mut Vec<Vec<f64>>>,
) -> Result<Episode>
where
    E: Environment,
    R: Rng + ?Sized,
{
    if env.n_agents() != model.agent.n_agents
        || env.obs_dim() != model.agent.obs_dim
        || env.n_actions() != model.agent.n_actions
        || env.state_dim() != model.mixer.state_dim
    {
        return Err(Error::Schema("environment does not match the model".into()));
    }
    env.reset(rng);
    let mut obs = env.observations();
    let mut state = env.state_vector();
    let mut ep = Episode::new(&obs, &state, env.round_owner());
    let mut runner = model.runner()?;
    let n_actions = env.n_actions();
    for _ in 0..env.episode_limit() {
        let q = runner.q_values(&obs)?;
        let actions: Vec<usize> = (0..env.n_agents())
            .map(|k| {
                if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                    rng.gen_range(0..n_actions)
                } else {
                    q.argmax_row(k)
                }
            })
            .collect();
        if let Some(out) = live_credits.as_deref_mut() {
            let chosen: Vec<f64> = actions.iter().enumerate().map(|(k, &a)| q.get(k, a)).collect();
            out.push(analytic_credits(&model.mixer, &model.params, &chosen, &state)?);
        }
        runner.record_actions(&actions);
        let step = env.step(&actions, rng)?;
        ep.push(&actions, step.reward, &step.observations, &step.state, env.round_owner(), step.done)?;
        obs = step.observations;
        state = step.state;
        if step.done {
            break;
        }
    }
    Ok(ep)
}

/// Plays one episode with decentralized ε-greedy agents.
pub fn rollout<E, R>(env: &mut E, model: &Model, epsilon: f64, rng: &mut R) -> Result<Episode>
where
    E: Environment,
    R: Rng + ?Sized,
{
    run_episode(env, model, epsilon, rng, None)
}

/// Like [`rollout`], also returning the credits computed while acting.
pub fn rollout_with_credits<E, R>(
    env: &mut E,
    model: &Model,
    epsilon: f64,
    rng: &mut R,
) -> Result<(Episode, Vec<Vec<f64>>)>
where
    E: Environment,
    R: Rng + ?Sized,
{
    let mut credits = Vec::new();
    let ep = run_episode(env, model, epsilon, rng, Some(&mut credits))?;
    Ok((ep, credits))
}

/// How the loss of one batch is assembled.
#[derive(Clone, Debug)]
pub struct LossSpec {
    pub gamma: f64,
    pub double_q: bool,
    pub mode: CiaMode,
    pub alpha: f64,
    /// Applied to agent values before both online and target mixing.
    pub permutation: Option<Permutation>,
    /// Divisor of the squared TD error sum (valid steps of the full batch).
    pub td_norm: f64,
    /// Divisor of the contrastive sum (`B * K` of the full batch).
    pub cl_norm: f64,
}

/// Loss nodes of one batch graph.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub td_sum: NodeId,
    pub cl_sum: Option<NodeId>,
}

/// `r + γ · not_terminal · Q̂tot(s_{t+1})`, with target-network greedy actions
/// (or online ones under double estimation). Returned as `[N*B, 1]`.
fn td_targets(
    g: &mut Graph,
    model: &Model,
    target: &ParamStore,
    batch: &EpisodeBatch,
    online_q: &[NodeId],
    spec: &LossSpec,
) -> Result<Tensor> {
    let agent = &model.agent;
    let tb = agent.bind(g, target, true)?;
    let tq = unroll_agents(g, agent, &tb, batch)?;
    let mut per_step = Vec::with_capacity(batch.horizon);
    for t in 0..batch.horizon {
        let chooser = if spec.double_q { online_q[t + 1] } else { tq[t + 1] };
        let v = g.value(chooser);
        let greedy: Vec<usize> = (0..v.rows()).map(|r| v.argmax_row(r)).collect();
        let picked = g.gather_cols(tq[t + 1], &greedy)?;
        per_step.push(g.reshape(picked, Shape::new(batch.batch, batch.n_agents))?);
    }
    let next_q = g.concat_rows(&per_step)?;
    let next_q = match &spec.permutation {
        Some(p) => p.apply(g, next_q)?,
        None => next_q,
    };
    let tm = model.mixer.bind(g, target, true)?;
    let ns = g.constant(batch.next_states.clone());
    let tw = model.mixer.weights(g, &tm, ns)?;
    let q_next = model.mixer.mix(g, &tw, next_q)?;
    let qn = g.value(q_next);
    let y: Vec<f64> = (0..qn.rows())
        .map(|r| {
            batch.rewards.data()[r] + spec.gamma * batch.not_terminal.data()[r] * qn.data()[r]
        })
        .collect();
    Tensor::new(Shape::new(qn.rows(), 1), y)
}

/// Builds the training loss of `batch` with gradients flowing into `model`'s
/// parameters only.
pub fn build_loss(model: &Model, target: &ParamStore, batch: &EpisodeBatch, spec: &LossSpec) -> Result<LossGraph> {
    let mut g = Graph::new();
    let agent = &model.agent;
    let ob = agent.bind(&mut g, &model.params, false)?;
    let q_steps = unroll_agents(&mut g, agent, &ob, batch)?;
    let chosen = chosen_values(&mut g, &q_steps, batch)?;

    let y = td_targets(&mut g, model, target, batch, &q_steps, spec)?;

    let om = model.mixer.bind(&mut g, &model.params, false)?;
    let states = g.constant(batch.states.clone());
    let w = model.mixer.weights(&mut g, &om, states)?;
    let q_mix = match &spec.permutation {
        Some(p) => model.mixer.shuffle_mix(&mut g, &w, chosen, p)?,
        None => model.mixer.mix(&mut g, &w, chosen)?,
    };
    let y = g.constant(y);
    let diff = g.sub(q_mix, y)?;
    let mask = g.constant(batch.mask.clone());
    let masked = g.mul(diff, mask)?;
    let sq = g.square(masked);
    let td_sum = g.sum(sq);
    let td = g.scale(td_sum, 1.0 / spec.td_norm);

    let contrast = match spec.mode {
        CiaMode::Cia => Some(Contrast::IdentityWise),
        CiaMode::Cc => Some(Contrast::CreditClassification),
        CiaMode::Off | CiaMode::Rs => None,
    };
    let (loss, cl_sum) = match contrast {
        Some(c) => {
            let x = model.mixer.credits(&mut g, &w, chosen)?;
            let temporal = temporal_credit_node(&mut g, x, batch)?;
            let ident = model.params.bind(&mut g, IDENTITY_PARAM)?;
            let sims = similarity(&mut g, temporal, ident)?;
            let cl_sum = contrastive_sum(&mut g, sims, c)?;
            let cl = g.scale(cl_sum, spec.alpha / spec.cl_norm);
            (g.add(td, cl)?, Some(cl_sum))
        }
        None => (td, None),
    };
    Ok(LossGraph {
        graph: g,
        loss,
        td_sum,
        cl_sum,
    })
}

/// Mean squared TD error over the valid steps of `batch`.
pub fn td_loss(
    batch: &EpisodeBatch,
    model: &Model,
    target: &ParamStore,
    gamma: f64,
    double_q: bool,
) -> Result<f64> {
    let valid = batch.valid_steps();
    if valid == 0 {
        return Err(Error::InvalidArgument("batch has no valid steps".into()));
    }
    let spec = LossSpec {
        gamma,
        double_q,
        mode: CiaMode::Off,
        alpha: 0.0,
        permutation: None,
        td_norm: valid as f64,
        cl_norm: 1.0,
    };
    let lg = build_loss(model, target, batch, &spec)?;
    Ok(lg.graph.value(lg.loss).item())
}

/// One record of the metrics stream, written after every collected episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub env_steps: usize,
    pub train_steps: usize,
    pub epsilon: f64,
    pub episode_return: f64,
    pub discounted_return: f64,
    pub td_loss: Option<f64>,
    pub cl_loss: Option<f64>,
    pub total_loss: Option<f64>,
    pub mi_lower_bound: Option<f64>,
    pub grad_norm: Option<f64>,
    pub eval_return: Option<f64>,
}

/// Loss terms of one gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub td_loss: f64,
    pub cl_loss: Option<f64>,
    pub total_loss: f64,
    pub mi_lower_bound: Option<f64>,
    pub grad_norm: f64,
}

/// Greedy evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

impl EvalSummary {
    fn from_returns(returns: Vec<f64>, seed: u64) -> Self {
        Self {
            episodes: returns.len(),
            seed,
            mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
            returns,
        }
    }
}

/// Greedy returns of `model` on `n` Turn episodes; episode `i` is seeded by `(seed, i)`.
pub fn evaluate(model: &Model, n: usize, seed: u64, exec: Exec) -> Result<EvalSummary> {
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let returns = exec.try_map(n, |i| {
        let mut rng = stream_rng(seed, Stream::Eval, i as u64);
        rollout(&mut TurnEnv::new(), model, 0.0, &mut rng).map(|e| e.total_return())
    })?;
    Ok(EvalSummary::from_returns(returns, seed))
}

/// Returns of the scripted oracle on the same episodes [`evaluate`] would use.
pub fn evaluate_oracle(n: usize, seed: u64, exec: Exec) -> Result<EvalSummary> {
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let returns = exec.try_map(n, |i| -> Result<f64> {
        let mut rng = stream_rng(seed, Stream::Eval, i as u64);
        let mut env = TurnEnv::new();
        env.reset(&mut rng);
        let mut total = 0.0;
        loop {
            let actions = oracle_policy(env.state());
            let step = env.step(&actions, &mut rng)?;
            total += step.reward;
            if step.done {
                break;
            }
        }
        Ok(total)
    })?;
    Ok(EvalSummary::from_returns(returns, seed))
}

/// Env steps, episodes and gradient steps taken so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub env_steps: usize,
    pub episodes: usize,
    pub train_steps: usize,
}

/// Everything needed to reproduce or inspect a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_id: String,
    pub seed: u64,
    pub config: String,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub env_steps: usize,
    pub episodes: usize,
    pub train_steps: usize,
    pub final_eval_return: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Turn architecture for a configuration.
pub fn turn_architecture(cfg: &TrainConfig) -> Architecture {
    Architecture {
        n_agents: N_AGENTS,
        n_actions: N_ACTIONS,
        obs_dim: OBS_DIM,
        state_dim: STATE_DIM,
        hidden: cfg.net.hidden,
        mixer: cfg.run.mixer,
        embed: cfg.net.mixing_embed,
        horizon: EPISODE_LIMIT,
    }
}

/// Owns the online and target parameters, the replay buffer and the counters.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub target: ParamStore,
    pub buffer: ReplayBuffer,
    pub counters: Counters,
    pub metrics: Vec<MetricsRow>,
    exec: Exec,
    progress: Option<Box<dyn FnMut(&MetricsRow)>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.run.seed, Stream::Init, 0);
        let model = Model::init(&turn_architecture(&cfg), &mut rng)?;
        let target = model.params.clone();
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.rl.buffer_capacity),
            cfg,
            model,
            target,
            counters: Counters::default(),
            metrics: Vec::new(),
            exec,
            progress: None,
        })
    }

    /// Called with every metrics row as it is produced.
    pub fn on_progress(&mut self, f: impl FnMut(&MetricsRow) + 'static) {
        self.progress = Some(Box::new(f));
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    /// Collects one training episode with the scheduled ε.
    pub fn collect_episode(&self) -> Result<Episode> {
        let eps = epsilon_schedule(self.counters.env_steps, &self.cfg.rl);
        let mut rng = stream_rng(self.cfg.run.seed, Stream::TrainEpisode, self.counters.episodes as u64);
        rollout(&mut TurnEnv::new(), &self.model, eps, &mut rng)
    }

    /// One gradient step on a fresh batch; `None` while the buffer holds
    /// fewer than `batch_size` episodes.
    pub fn train_step(&mut self) -> Result<Option<StepStats>> {
        let cfg = &self.cfg;
        let step = self.counters.train_steps as u64;
        let mut rng = stream_rng(cfg.run.seed, Stream::BatchSample, step);
        let Some(episodes) = self.buffer.sample(cfg.rl.batch_size, &mut rng) else {
            return Ok(None);
        };
        let k = self.model.agent.n_agents;
        let permutation = match cfg.run.mode {
            CiaMode::Rs => Some(sample_permutation(
                k,
                &mut stream_rng(cfg.run.seed, Stream::Permutation, step),
            )?),
            _ => None,
        };
        let valid: usize = episodes.iter().map(|e| e.len()).sum();
        if valid == 0 {
            return Err(Error::InvalidArgument("sampled batch has no valid steps".into()));
        }
        let spec = LossSpec {
            gamma: cfg.rl.gamma,
            double_q: cfg.rl.double_q,
            mode: cfg.run.mode,
            alpha: cfg.run.alpha,
            permutation,
            td_norm: valid as f64,
            cl_norm: (episodes.len() * k) as f64,
        };
        let shards = cfg.optim.grad_shards.min(episodes.len());
        let per = episodes.len().div_ceil(shards);
        let chunks: Vec<&[&Episode]> = episodes.chunks(per).collect();
        let (model, target, horizon) = (&self.model, &self.target, self.model.horizon);
        let parts = self.exec.try_map(chunks.len(), |s| -> Result<_> {
            let batch = EpisodeBatch::new(chunks[s], horizon, &model.agent)?;
            let lg = build_loss(model, target, &batch, &spec)?;
            let grads = lg.graph.backward(lg.loss)?;
            let td = lg.graph.value(lg.td_sum).item();
            let cl = lg.cl_sum.map(|c| lg.graph.value(c).item());
            Ok((grads, td, cl))
        })?;

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut td_sum, mut cl_sum) = (0.0, None::<f64>);
        for (g, td, cl) in parts {
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
            td_sum += td;
            if let Some(c) = cl {
                *cl_sum.get_or_insert(0.0) += c;
            }
        }
        for (name, p) in self.model.params.iter() {
            if !grads.contains_key(name) {
                grads.insert(name.to_string(), Tensor::zeros(p.rows(), p.cols()));
            }
        }
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradients at train step {step}")));
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.optim.grad_norm_clip);
        rmsprop_step(
            &mut self.model.params,
            &grads,
            cfg.optim.lr,
            cfg.optim.smoothing,
            cfg.optim.eps,
        )?;
        self.counters.train_steps += 1;
        if self.counters.train_steps % cfg.rl.target_update_interval == 0 {
            sync_target(&self.model.params, &mut self.target)?;
        }
        let td_loss = td_sum / spec.td_norm;
        let cl_loss = cl_sum.map(|c| c / spec.cl_norm);
        Ok(Some(StepStats {
            td_loss,
            cl_loss,
            total_loss: td_loss + cl_loss.map_or(0.0, |c| cfg.run.alpha * c),
            mi_lower_bound: cl_loss.map(|c| (k as f64).ln() - c),
            grad_norm,
        }))
    }

    /// Collects one episode, stores it and trains once if the buffer allows.
    pub fn iteration(&mut self) -> Result<MetricsRow> {
        let epsilon = epsilon_schedule(self.counters.env_steps, &self.cfg.rl);
        let ep = self.collect_episode()?;
        let before = self.counters.env_steps;
        self.counters.env_steps += ep.len();
        self.counters.episodes += 1;
        let episode_return = ep.total_return();
        let discounted_return = ep.discounted_return(self.cfg.rl.gamma);
        self.buffer.push(ep);
        let stats = self.train_step()?;
        let interval = self.cfg.log.eval_interval;
        let eval_return = if interval > 0 && before / interval != self.counters.env_steps / interval {
            Some(self.evaluate(self.cfg.log.eval_episodes)?.mean_return)
        } else {
            None
        };
        let row = MetricsRow {
            episode: self.counters.episodes,
            env_steps: self.counters.env_steps,
            train_steps: self.counters.train_steps,
            epsilon,
            episode_return,
            discounted_return,
            td_loss: stats.as_ref().map(|s| s.td_loss),
            cl_loss: stats.as_ref().and_then(|s| s.cl_loss),
            total_loss: stats.as_ref().map(|s| s.total_loss),
            mi_lower_bound: stats.as_ref().and_then(|s| s.mi_lower_bound),
            grad_norm: stats.as_ref().map(|s| s.grad_norm),
            eval_return,
        };
        if let Some(f) = self.progress.as_mut() {
            f(&row);
        }
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Greedy evaluation on the run's fixed evaluation episodes.
    pub fn evaluate(&self, n: usize) -> Result<EvalSummary> {
        evaluate(&self.model, n, self.cfg.run.seed, self.exec)
    }

    /// Trains until `total_env_steps`, without touching the filesystem.
    pub fn run_in_memory(&mut self) -> Result<()> {
        while self.counters.env_steps < self.cfg.run.total_env_steps {
            self.iteration()?;
        }
        Ok(())
    }

    /// Trains until `env_steps` reaches `limit`, streaming metrics and
    /// checkpoints into `out`. Returns the manifest once the configured total
    /// has been reached.
    pub fn run_until(&mut self, out: &Path, limit: usize) -> Result<Option<RunManifest>> {
        let ck_dir = out.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ck_dir)?;
        let metrics_path = out.join(METRICS_FILE);
        let mut writer = {
            let file = fs::File::create(&metrics_path)?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(std::io::BufWriter::new(file));
            write_metrics_header(&mut w)?;
            for row in &self.metrics {
                w.serialize(row)?;
            }
            w.flush()?;
            w
        };
        let total = self.cfg.run.total_env_steps;
        let interval = self.cfg.log.checkpoint_interval;
        while self.counters.env_steps < total.min(limit) {
            let before = self.counters.env_steps;
            let row = self.iteration()?;
            writer.serialize(&row)?;
            if interval > 0 && before / interval != self.counters.env_steps / interval {
                writer.flush()?;
                let path = ck_dir.join(format!("step_{:08}.ckpt", self.counters.env_steps));
                let ck = self.checkpoint();
                ck.save(&path)?;
                ck.save(&ck_dir.join(LATEST_CHECKPOINT))?;
            }
        }
        writer.flush()?;
        if self.counters.env_steps < total {
            let ck = self.checkpoint();
            ck.save(&ck_dir.join(LATEST_CHECKPOINT))?;
            return Ok(None);
        }
        let final_path = out.join(FINAL_CHECKPOINT);
        self.checkpoint().save(&final_path)?;
        let final_eval_return = match self.cfg.log.eval_episodes {
            0 => None,
            n => Some(self.evaluate(n)?.mean_return),
        };
        let mut checkpoints: Vec<PathBuf> = fs::read_dir(&ck_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("step_") && n.ends_with(".ckpt"))
            })
            .collect();
        checkpoints.sort();
        let manifest = RunManifest {
            code_id: CODE_ID.to_string(),
            seed: self.cfg.run.seed,
            config: self.cfg.to_toml_string(),
            metrics: metrics_path,
            checkpoints,
            final_checkpoint: final_path,
            env_steps: self.counters.env_steps,
            episodes: self.counters.episodes,
            train_steps: self.counters.train_steps,
            final_eval_return,
        };
        let mut f = fs::File::create(out.join(MANIFEST_FILE))?;
        f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(Some(manifest))
    }

    /// Trains to completion, writing outputs into `out`.
    pub fn run(&mut self, out: &Path) -> Result<RunManifest> {
        let manifest = self.run_until(out, usize::MAX)?;
        Ok(manifest.expect("run reaches its total"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model);
        let meta = &mut ck.meta;
        meta.insert("config".into(), self.cfg.to_toml_string());
        meta.insert("env_steps".into(), self.counters.env_steps.to_string());
        meta.insert("episodes".into(), self.counters.episodes.to_string());
        meta.insert("train_steps".into(), self.counters.train_steps.to_string());
        ck.groups
            .insert("online.ms".into(), self.model.params.accumulators().clone());
        ck.groups.insert("target".into(), self.target.params().clone());
        ck
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    ///
    /// Parameters, optimizer state, target network, counters and metrics
    /// rows up to the checkpoint are restored; the replay buffer starts empty.
    pub fn resume(ck: &Checkpoint, metrics: Vec<MetricsRow>, exec: Exec) -> Result<Self> {
        let cfg = TrainConfig::from_toml_str(ck.meta("config")?)?;
        let counter = |k: &str| -> Result<usize> {
            ck.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad counter {k}")))
        };
        let counters = Counters {
            env_steps: counter("env_steps")?,
            episodes: counter("episodes")?,
            train_steps: counter("train_steps")?,
        };
        let params = ParamStore::from_parts(
            ck.group("online")?.clone(),
            Some(ck.group("online.ms")?.clone()),
        )?;
        let model = Model::from_params(&turn_architecture(&cfg), params)?;
        let target = ParamStore::from_parts(ck.group("target")?.clone(), None)?;
        if target.schema() != model.params.schema() {
            return Err(Error::Schema("target parameters do not match online parameters".into()));
        }
        let metrics = metrics
            .into_iter()
            .filter(|r| r.episode <= counters.episodes)
            .collect();
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.rl.buffer_capacity),
            cfg,
            model,
            target,
            counters,
            metrics,
            exec,
            progress: None,
        })
    }

    /// Resumes the run in `out` from its latest checkpoint.
    pub fn resume_dir(out: &Path, exec: Exec) -> Result<Self> {
        let ck = Checkpoint::load(&out.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT))?;
        let metrics = read_metrics(&out.join(METRICS_FILE))?;
        Self::resume(&ck, metrics, exec)
    }
}

fn write_metrics_header<W: Write>(w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record([
        "episode",
        "env_steps",
        "train_steps",
        "epsilon",
        "episode_return",
        "discounted_return",
        "td_loss",
        "cl_loss",
        "total_loss",
        "mi_lower_bound",
        "grad_norm",
        "eval_return",
    ])?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

/// Checkpoint holding just a model's parameters and architecture.
pub fn model_checkpoint(model: &Model) -> Checkpoint {
    let mut ck = Checkpoint::new();
    let a = model.architecture();
    let meta = &mut ck.meta;
    meta.insert("code_id".into(), CODE_ID.into());
    for (k, v) in [
        ("n_agents", a.n_agents),
        ("n_actions", a.n_actions),
        ("obs_dim", a.obs_dim),
        ("state_dim", a.state_dim),
        ("hidden", a.hidden),
        ("embed", a.embed),
        ("horizon", a.horizon),
    ] {
        meta.insert(k.into(), v.to_string());
    }
    meta.insert("mixer".into(), a.mixer.to_string());
    ck.groups.insert("online".into(), model.params.params().clone());
    ck
}

/// The online model stored in a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<Model> {
    let num = |k: &str| -> Result<usize> {
        ck.meta(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
    };
    let arch = Architecture {
        n_agents: num("n_agents")?,
        n_actions: num("n_actions")?,
        obs_dim: num("obs_dim")?,
        state_dim: num("state_dim")?,
        hidden: num("hidden")?,
        mixer: ck
            .meta("mixer")?
            .parse::<MixerKind>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        embed: num("embed")?,
        horizon: num("horizon")?,
    };
    let params = ParamStore::from_parts(ck.group("online")?.clone(), None)?;
    Model::from_params(&arch, params)
}
