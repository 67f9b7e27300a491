//! Credit analysis: softmax credit distributions, pairwise KL divergence, the
//! cross-model matrix Λ, alternation scoring and credit time series.

use std::io::Write;

use crate::autodiff::Graph;
use crate::env::TurnEnv;
use crate::episode::{chosen_values, unroll_agents, Episode, EpisodeBatch};
use crate::error::{Error, Result};
use crate::mixer::Mixer;
use crate::model::Model;
use crate::nn::{AgentNet, ParamStore};
use crate::par::Exec;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{argmax, Tensor};
use crate::trainer::rollout;

/// Chosen-action values and credits of every step of a replayed episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    /// `len` vectors of length `K`.
    pub q: Vec<Vec<f64>>,
    pub credits: Vec<Vec<f64>>,
}

/// Feeds the recorded observations and actions through `agent` and the
/// recorded states through `mixer`.
pub fn replay(episode: &Episode, agent: &AgentNet, mixer: &Mixer, store: &ParamStore) -> Result<Replay> {
    let n = episode.len();
    if n == 0 {
        return Ok(Replay {
            q: Vec::new(),
            credits: Vec::new(),
        });
    }
    let batch = EpisodeBatch::new(&[episode], n, agent)?;
    let mut g = Graph::new();
    let bound = agent.bind(&mut g, store, true)?;
    let q_steps = unroll_agents(&mut g, agent, &bound, &batch)?;
    let chosen = chosen_values(&mut g, &q_steps, &batch)?;
    let mb = mixer.bind(&mut g, store, true)?;
    let states = g.constant(batch.states.clone());
    let w = mixer.weights(&mut g, &mb, states)?;
    let x = mixer.credits(&mut g, &w, chosen)?;
    let rows = |t: &Tensor| (0..n).map(|r| t.row_slice(r).to_vec()).collect();
    Ok(Replay {
        q: rows(g.value(chosen)),
        credits: rows(g.value(x)),
    })
}

/// Per-step credit vectors of a recorded episode.
pub fn replay_credits(
    episode: &Episode,
    agent: &AgentNet,
    mixer: &Mixer,
    store: &ParamStore,
) -> Result<Vec<Vec<f64>>> {
    Ok(replay(episode, agent, mixer, store)?.credits)
}

/// `softmax(x)`.
pub fn credit_distribution(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty credit vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("credit vector {x:?}")));
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `KL(p || q) = sum_k p_k ln(p_k / q_k)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    if let Some(v) = q.iter().find(|v| **v <= 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "reference distribution has non-positive entry {v}"
        )));
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum())
}

/// Average KL distances between models over a pooled trajectory set.
#[derive(Clone, Debug, PartialEq)]
pub struct KlMatrix {
    /// `M x M`; entry `(i, j)` is the mean of `KL(d^i || d^j)`.
    pub lambda: Tensor,
    pub pooled_episodes: usize,
    pub pooled_steps: usize,
}

/// Λ over `models`, each sampling `episodes_per_model` greedy Turn episodes.
///
/// Every model replays every pooled episode through its own networks.
pub fn kl_matrix(models: &[Model], episodes_per_model: usize, seed: u64, exec: Exec) -> Result<KlMatrix> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("need at least two models".into()));
    }
    if let Some(m) = models.iter().find(|m| !m.compatible_with(&models[0])) {
        return Err(Error::Schema(format!(
            "model architectures differ: {:?} vs {:?}",
            m.architecture(),
            models[0].architecture()
        )));
    }
    let per = episodes_per_model;
    let episodes = exec.try_map(models.len() * per, |i| {
        let mut rng = stream_rng(seed, Stream::Analysis, i as u64);
        rollout(&mut TurnEnv::new(), &models[i / per], 0.0, &mut rng)
    })?;
    kl_matrix_on(models, &episodes, exec)
}

/// Λ over an explicit pooled episode set.
pub fn kl_matrix_on(models: &[Model], episodes: &[Episode], exec: Exec) -> Result<KlMatrix> {
    let m = models.len();
    let partial = exec.try_map(episodes.len(), |e| -> Result<(Vec<f64>, usize)> {
        let dists = models
            .iter()
            .map(|model| {
                replay_credits(&episodes[e], &model.agent, &model.mixer, &model.params)?
                    .iter()
                    .map(|x| credit_distribution(x))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = episodes[e].len();
        let mut sums = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                for t in 0..steps {
                    sums[i * m + j] += kl_divergence(&dists[i][t], &dists[j][t])?;
                }
            }
        }
        Ok((sums, steps))
    })?;
    let mut total = vec![0.0; m * m];
    let mut steps = 0;
    for (sums, n) in &partial {
        for (acc, v) in total.iter_mut().zip(sums) {
            *acc += v;
        }
        steps += n;
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("no valid steps to compare".into()));
    }
    let lambda = Tensor::new(
        crate::tensor::Shape::new(m, m),
        total.into_iter().map(|v| v / steps as f64).collect(),
    )?;
    Ok(KlMatrix {
        lambda,
        pooled_episodes: episodes.len(),
        pooled_steps: steps,
    })
}

/// Fraction of steps whose largest credit (lowest index on ties) belongs to
/// the round owner. `credits` holds one vector per step.
pub fn alternation_score(credits: &[Vec<f64>], owners: &[usize]) -> Result<f64> {
    if owners.len() < credits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} owners for {} steps",
            owners.len(),
            credits.len()
        )));
    }
    if credits.is_empty() {
        return Ok(0.0);
    }
    let hits = credits
        .iter()
        .zip(owners)
        .filter(|(x, &o)| argmax(x) == o)
        .count();
    Ok(hits as f64 / credits.len() as f64)
}

/// Mean alternation score of `model` over `n` greedy episodes, together with
/// the episodes' mean return.
pub fn greedy_alternation(model: &Model, n: usize, seed: u64, exec: Exec) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let scores = exec.try_map(n, |i| -> Result<(f64, f64)> {
        let mut rng = stream_rng(seed, Stream::Analysis, i as u64);
        let ep = rollout(&mut TurnEnv::new(), model, 0.0, &mut rng)?;
        let x = replay_credits(&ep, &model.agent, &model.mixer, &model.params)?;
        Ok((alternation_score(&x, ep.owners())?, ep.total_return()))
    })?;
    let k = n as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / k,
        scores.iter().map(|s| s.1).sum::<f64>() / k,
    ))
}

/// One row of a credit time series.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CreditRow {
    pub t: usize,
    pub k: usize,
    pub credit: f64,
    pub share: f64,
    pub owner: Option<usize>,
}

/// `(t, k, x, d, owner)` for every step and agent of `episode` under `model`.
pub fn export_credit_timeseries(episode: &Episode, model: &Model) -> Result<Vec<CreditRow>> {
    let x = replay_credits(episode, &model.agent, &model.mixer, &model.params)?;
    let mut rows = Vec::with_capacity(x.len() * model.agent.n_agents);
    for (t, xt) in x.iter().enumerate() {
        let d = credit_distribution(xt)?;
        for (k, (&credit, &share)) in xt.iter().zip(&d).enumerate() {
            rows.push(CreditRow {
                t,
                k,
                credit,
                share,
                owner: episode.owners().get(t).copied(),
            });
        }
    }
    Ok(rows)
}

fn write_header<W: Write>(out: &mut W, header: &[String]) -> Result<()> {
    for line in header {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

/// Writes rows as CSV after `#`-prefixed header lines.
pub fn write_credit_csv<W: Write>(mut out: W, header: &[String], rows: &[CreditRow]) -> Result<()> {
    write_header(&mut out, header)?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes Λ as a labelled CSV matrix (rows are `i`, columns `j`).
pub fn write_kl_csv<W: Write>(mut out: W, header: &[String], names: &[String], kl: &KlMatrix) -> Result<()> {
    if names.len() != kl.lambda.rows() {
        return Err(Error::Shape(format!(
            "{} names for a {} matrix",
            names.len(),
            kl.lambda.shape()
        )));
    }
    write_header(&mut out, header)?;
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["model".to_string()];
    head.extend(names.iter().cloned());
    w.write_record(&head)?;
    for (i, name) in names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(kl.lambda.row_slice(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::MixerKind;
    use crate::model::Architecture;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn turn_model(kind: MixerKind, seed: u64) -> Model {
        let arch = Architecture {
            n_agents: 2,
            n_actions: crate::env::N_ACTIONS,
            obs_dim: crate::env::OBS_DIM,
            state_dim: crate::env::STATE_DIM,
            hidden: 8,
            mixer: kind,
            embed: 4,
            horizon: crate::env::EPISODE_LIMIT,
        };
        Model::init(&arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(credit_distribution(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let d = credit_distribution(&[1.0, 1.0, 1.0]).unwrap();
        assert!(d.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(credit_distribution(&[f64::NAN, 0.0]).is_err());
        assert!(credit_distribution(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.14384).abs() < 1e-5);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(x in proptest::collection::vec(-20.0f64..20.0, 1..6), c in -50.0f64..50.0) {
            let a = credit_distribution(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = credit_distribution(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_is_nonnegative(x in proptest::collection::vec(-5.0f64..5.0, 3), y in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let p = credit_distribution(&x).unwrap();
            let q = credit_distribution(&y).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn alternation_examples() {
        let owners = vec![0, 1, 1, 0, 0];
        let perfect: Vec<Vec<f64>> = owners[..4]
            .iter()
            .map(|&o| if o == 0 { vec![2.0, 1.0] } else { vec![1.0, 2.0] })
            .collect();
        assert_eq!(alternation_score(&perfect, &owners).unwrap(), 1.0);
        // ties go to agent 0, so the score is the share of steps agent 0 owns
        let ones = vec![vec![1.0, 1.0]; 4];
        assert_eq!(alternation_score(&ones, &owners).unwrap(), 0.5);
        assert!(alternation_score(&ones, &owners[..2]).is_err());
    }

    #[test]
    fn duplicated_model_gives_zero_matrix() {
        let a = turn_model(MixerKind::Qmix, 3);
        let kl = kl_matrix(&[a.clone(), a], 2, 0, Exec::Sequential).unwrap();
        assert!(kl.lambda.data().iter().all(|&v| v == 0.0));
        assert_eq!(kl.pooled_episodes, 4);
        assert_eq!(kl.pooled_steps, 400);
    }

    #[test]
    fn matrix_has_zero_diagonal_and_is_order_invariant() {
        let models = [
            turn_model(MixerKind::Qmix, 1),
            turn_model(MixerKind::Qmix, 2),
            turn_model(MixerKind::Vdn, 3),
        ];
        let kl = kl_matrix(&models, 1, 5, Exec::Sequential).unwrap();
        for i in 0..3 {
            assert_eq!(kl.lambda.get(i, i), 0.0);
            for j in 0..3 {
                assert!(kl.lambda.get(i, j) >= 0.0);
            }
        }
        assert!(kl.lambda.get(0, 1) > 0.0);

        let mut eps: Vec<Episode> = (0..3)
            .map(|i| {
                let mut rng = stream_rng(5, Stream::Analysis, i);
                rollout(&mut TurnEnv::new(), &models[i as usize], 0.0, &mut rng).unwrap()
            })
            .collect();
        let fwd = kl_matrix_on(&models, &eps, Exec::Sequential).unwrap();
        eps.reverse();
        let rev = kl_matrix_on(&models, &eps, Exec::Sequential).unwrap();
        assert!(fwd.lambda.max_abs_diff(&rev.lambda) < 1e-12);
        assert!(fwd.lambda.max_abs_diff(&kl.lambda) < 1e-12);
    }

    #[test]
    fn incompatible_models_are_rejected() {
        let a = turn_model(MixerKind::Qmix, 1);
        let mut b = a.clone();
        b.agent.n_actions = 5;
        b.mixer.state_dim = 3;
        assert!(matches!(kl_matrix(&[a, b], 1, 0, Exec::Sequential), Err(Error::Schema(_))));
    }

    #[test]
    fn vdn_credits_are_uniform_and_export_is_well_formed() {
        let m = turn_model(MixerKind::Vdn, 4);
        let mut rng = stream_rng(0, Stream::Analysis, 0);
        let ep = rollout(&mut TurnEnv::new(), &m, 0.3, &mut rng).unwrap();
        let rows = export_credit_timeseries(&ep, &m).unwrap();
        assert_eq!(rows.len(), ep.len() * 2);
        assert!(rows.iter().all(|r| r.credit == 1.0 && r.share == 0.5));
        assert_eq!(rows, export_credit_timeseries(&ep, &m).unwrap());

        let q = turn_model(MixerKind::Qmix, 4);
        let rows = export_credit_timeseries(&ep, &q).unwrap();
        for pair in rows.chunks(2) {
            assert!((pair[0].share + pair[1].share - 1.0).abs() < 1e-12);
            assert_eq!(pair[0].t, pair[1].t);
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_credit_csv(&mut a, &["model q".into()], &rows).unwrap();
        write_credit_csv(&mut b, &["model q".into()], &rows).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("# model q\nt,k,credit,share,owner\n"));
    }
}
