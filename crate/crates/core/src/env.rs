//! The Turn game: two agents on a 5x5 grid take turns eating apples of their
//! own color. The agent whose round it is ("free") may move and eat; the other
//! one is fenced in and costs the team -1 for every movement action it takes.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID: usize = 5;
pub const N_AGENTS: usize = 2;
pub const N_ACTIONS: usize = 6;
pub const EPISODE_LIMIT: usize = 100;
pub const EAT_REWARD: f64 = 10.0;
pub const MOVE_PENALTY: f64 = -1.0;
/// Observation channels per window cell.
pub const OBS_CHANNELS: usize = 6;
pub const OBS_DIM: usize = 9 * OBS_CHANNELS;
pub const STATE_DIM: usize = 3 * GRID * GRID + 2;

/// A multi-agent environment with a shared reward and a fixed horizon.
pub trait Environment {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn episode_limit(&self) -> usize;
    /// Starts a new episode.
    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R);
    fn step<R: Rng + ?Sized>(&mut self, actions: &[usize], rng: &mut R) -> Result<StepResult>;
    /// Per-agent local observations of the current state.
    fn observations(&self) -> Vec<Vec<f64>>;
    /// Centralized state for the mixer.
    fn state_vector(&self) -> Vec<f64>;
    /// The agent that currently holds the round, when the game has one.
    fn round_owner(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
    Eat,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
        Action::Eat,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action {i} out of range 0..{N_ACTIONS}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> Option<(isize, isize)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Right => Some((0, 1)),
            Action::Stay | Action::Eat => None,
        }
    }

    pub fn is_move(self) -> bool {
        self.delta().is_some()
    }
}

/// `(row, col)` on the grid.
pub type Cell = (usize, usize);

fn offset(cell: Cell, (dr, dc): (isize, isize)) -> Option<Cell> {
    let r = cell.0 as isize + dr;
    let c = cell.1 as isize + dc;
    if (0..GRID as isize).contains(&r) && (0..GRID as isize).contains(&c) {
        Some((r as usize, c as usize))
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnState {
    pub positions: [Cell; N_AGENTS],
    /// Agent whose round it is; the apple has this agent's color.
    pub owner: usize,
    pub apple: Cell,
    pub t: usize,
}

impl TurnState {
    pub fn free_agent(&self) -> usize {
        self.owner
    }

    pub fn trapped_agent(&self) -> usize {
        1 - self.owner
    }

    pub fn apple_color(&self) -> usize {
        self.owner
    }

    /// Checks the game invariants.
    pub fn validate(&self) -> Result<()> {
        let in_grid = |c: Cell| c.0 < GRID && c.1 < GRID;
        if !self.positions.iter().all(|&p| in_grid(p)) || !in_grid(self.apple) {
            return Err(Error::InvalidArgument("cell outside the grid".into()));
        }
        if self.positions[0] == self.positions[1] {
            return Err(Error::InvalidArgument("agents share a cell".into()));
        }
        if self.owner >= N_AGENTS || self.t > EPISODE_LIMIT {
            return Err(Error::InvalidArgument("bad owner or step counter".into()));
        }
        Ok(())
    }

    /// Flattened `3x3x6` window around `agent`, cell-major.
    pub fn encode_obs(&self, agent: usize) -> Vec<f64> {
        let me = self.positions[agent];
        let other = self.positions[1 - agent];
        let trapped = agent != self.owner;
        let mut out = vec![0.0; OBS_DIM];
        for (w, (dr, dc)) in (-1..=1isize)
            .flat_map(|dr| (-1..=1isize).map(move |dc| (dr, dc)))
            .enumerate()
        {
            let base = w * OBS_CHANNELS;
            match offset(me, (dr, dc)) {
                None => out[base + 4] = 1.0,
                Some(cell) => {
                    if cell == me {
                        out[base] = 1.0;
                    }
                    if cell == other {
                        out[base + 1] = 1.0;
                    }
                    if cell == self.apple {
                        if self.apple_color() == agent {
                            out[base + 2] = 1.0;
                        } else {
                            out[base + 3] = 1.0;
                        }
                    }
                    if trapped {
                        out[base + 5] = 1.0;
                    }
                }
            }
        }
        out
    }

    /// One-hot grids of agent 1, agent 2 and the apple, then the owner bit and `t / N`.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut s = vec![0.0; STATE_DIM];
        let idx = |c: Cell| c.0 * GRID + c.1;
        s[idx(self.positions[0])] = 1.0;
        s[GRID * GRID + idx(self.positions[1])] = 1.0;
        s[2 * GRID * GRID + idx(self.apple)] = 1.0;
        s[3 * GRID * GRID] = self.owner as f64;
        s[3 * GRID * GRID + 1] = self.t as f64 / EPISODE_LIMIT as f64;
        s
    }

    /// Inverse of [`TurnState::state_vector`].
    pub fn from_state_vector(s: &[f64]) -> Result<Self> {
        if s.len() != STATE_DIM {
            return Err(Error::Shape(format!(
                "state vector has {} entries, expected {STATE_DIM}",
                s.len()
            )));
        }
        let one_hot = |plane: usize| -> Result<Cell> {
            let block = &s[plane * GRID * GRID..(plane + 1) * GRID * GRID];
            let mut hits = block.iter().enumerate().filter(|(_, &v)| v == 1.0);
            match (hits.next(), hits.next()) {
                (Some((i, _)), None) => Ok((i / GRID, i % GRID)),
                _ => Err(Error::InvalidArgument(format!("plane {plane} is not one-hot"))),
            }
        };
        let state = TurnState {
            positions: [one_hot(0)?, one_hot(1)?],
            apple: one_hot(2)?,
            owner: s[3 * GRID * GRID] as usize,
            t: (s[3 * GRID * GRID + 1] * EPISODE_LIMIT as f64).round() as usize,
        };
        state.validate()?;
        Ok(state)
    }
}

/// What happened in one step, for reward bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub ate: bool,
    pub penalties: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub events: StepEvents,
}

#[derive(Clone, Debug)]
pub struct TurnEnv {
    state: TurnState,
}

impl Default for TurnEnv {
    fn default() -> Self {
        Self {
            state: TurnState {
                positions: [(0, 0), (GRID - 1, GRID - 1)],
                owner: 0,
                apple: (GRID / 2, GRID / 2),
                t: 0,
            },
        }
    }
}

fn spawn_apple<R: Rng + ?Sized>(positions: &[Cell; N_AGENTS], rng: &mut R) -> Cell {
    let free: Vec<Cell> = (0..GRID)
        .flat_map(|r| (0..GRID).map(move |c| (r, c)))
        .filter(|c| !positions.contains(c))
        .collect();
    free[rng.gen_range(0..free.len())]
}

impl TurnEnv {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from an explicit state, e.g. for replay or tests.
    pub fn from_state(state: TurnState) -> Result<Self> {
        state.validate()?;
        Ok(Self { state })
    }

    pub fn state(&self) -> &TurnState {
        &self.state
    }
}

impl Environment for TurnEnv {
    fn n_agents(&self) -> usize {
        N_AGENTS
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn episode_limit(&self) -> usize {
        EPISODE_LIMIT
    }

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let positions = [(0, 0), (GRID - 1, GRID - 1)];
        self.state = TurnState {
            positions,
            owner: 0,
            apple: spawn_apple(&positions, rng),
            t: 0,
        };
    }

    fn step<R: Rng + ?Sized>(&mut self, actions: &[usize], rng: &mut R) -> Result<StepResult> {
        if actions.len() != N_AGENTS {
            return Err(Error::InvalidArgument(format!(
                "expected {N_AGENTS} actions, got {}",
                actions.len()
            )));
        }
        if self.state.t >= EPISODE_LIMIT {
            return Err(Error::InvalidArgument("episode already finished".into()));
        }
        let acts = [Action::from_index(actions[0])?, Action::from_index(actions[1])?];
        let s = &mut self.state;
        let free = s.free_agent();
        let trapped = s.trapped_agent();
        let mut events = StepEvents::default();

        if acts[trapped].is_move() {
            events.penalties += 1;
        }
        match acts[free] {
            Action::Eat => {
                if s.positions[free] == s.apple {
                    events.ate = true;
                }
            }
            a => {
                if let Some(d) = a.delta() {
                    match offset(s.positions[free], d) {
                        None => events.penalties += 1,
                        Some(cell) if cell == s.positions[trapped] => {}
                        Some(cell) => s.positions[free] = cell,
                    }
                }
            }
        }
        if events.ate {
            s.owner = trapped;
            s.apple = spawn_apple(&s.positions, rng);
        }
        s.t += 1;

        let reward = if events.ate { EAT_REWARD } else { 0.0 }
            + MOVE_PENALTY * events.penalties as f64;
        Ok(StepResult {
            observations: self.observations(),
            state: self.state_vector(),
            reward,
            done: self.state.t >= EPISODE_LIMIT,
            events,
        })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..N_AGENTS).map(|a| self.state.encode_obs(a)).collect()
    }

    fn state_vector(&self) -> Vec<f64> {
        self.state.state_vector()
    }

    fn round_owner(&self) -> Option<usize> {
        Some(self.state.owner)
    }
}

/// Centralized scripted policy: the free agent walks a shortest path to the
/// apple (around the trapped agent) and eats; the trapped agent stays.
pub fn oracle_policy(state: &TurnState) -> [usize; N_AGENTS] {
    let free = state.free_agent();
    let mut actions = [Action::Stay.index(); N_AGENTS];
    actions[free] = oracle_move(state).index();
    actions
}

fn oracle_move(state: &TurnState) -> Action {
    let start = state.positions[state.free_agent()];
    let blocked = state.positions[state.trapped_agent()];
    if start == state.apple {
        return Action::Eat;
    }
    // BFS backwards from the apple gives distances to it from every cell.
    let mut dist = [[usize::MAX; GRID]; GRID];
    let mut queue = VecDeque::from([state.apple]);
    dist[state.apple.0][state.apple.1] = 0;
    while let Some(cell) = queue.pop_front() {
        for a in &Action::ALL[..4] {
            if let Some(next) = offset(cell, a.delta().unwrap()) {
                if next != blocked && dist[next.0][next.1] == usize::MAX {
                    dist[next.0][next.1] = dist[cell.0][cell.1] + 1;
                    queue.push_back(next);
                }
            }
        }
    }
    Action::ALL[..4]
        .iter()
        .copied()
        .filter_map(|a| {
            offset(start, a.delta().unwrap())
                .filter(|&c| c != blocked)
                .map(|c| (dist[c.0][c.1], a))
        })
        .min_by_key(|&(d, a)| (d, a.index()))
        .map_or(Action::Stay, |(_, a)| a)
}

/// One line of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub positions: [Cell; N_AGENTS],
    pub owner: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub done: bool,
}

pub fn write_episode_log<W: Write>(mut out: W, steps: &[StepLog]) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episode_log<R: BufRead>(input: R) -> Result<Vec<StepLog>> {
    let mut steps = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            steps.push(serde_json::from_str(&line)?);
        }
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const UP: usize = 0;
    const RIGHT: usize = 3;
    const STAY: usize = 4;
    const EAT: usize = 5;

    fn env_with(state: TurnState) -> TurnEnv {
        TurnEnv::from_state(state).unwrap()
    }

    fn state(p0: Cell, p1: Cell, owner: usize, apple: Cell) -> TurnState {
        TurnState {
            positions: [p0, p1],
            owner,
            apple,
            t: 0,
        }
    }

    #[test]
    fn reset_is_seeded_and_starts_with_agent_one() {
        let mut a = TurnEnv::new();
        let mut b = TurnEnv::new();
        a.reset(&mut ChaCha8Rng::seed_from_u64(4));
        b.reset(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.state(), b.state());
        assert_eq!(a.state().owner, 0);
        assert_eq!(a.state().positions, [(0, 0), (4, 4)]);
        assert!(!a.state().positions.contains(&a.state().apple));
        assert_eq!(a.state().t, 0);
    }

    #[test]
    fn eating_own_apple_scores_and_flips_round() {
        let mut env = env_with(state((2, 2), (4, 4), 0, (2, 2)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = env.step(&[EAT, STAY], &mut rng).unwrap();
        assert_eq!(r.reward, 10.0);
        assert_eq!(env.state().owner, 1);
        assert!(!env.state().positions.contains(&env.state().apple));
    }

    #[test]
    fn trapped_agent_moving_is_penalized_and_stays_put() {
        let mut env = env_with(state((2, 2), (3, 3), 0, (0, 4)));
        let r = env
            .step(&[STAY, UP], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(r.reward, -1.0);
        assert_eq!(env.state().positions[1], (3, 3));
    }

    #[test]
    fn staying_is_free() {
        let mut env = env_with(state((2, 2), (3, 3), 0, (0, 4)));
        let r = env
            .step(&[STAY, STAY], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn border_hit_is_penalized_and_clamped() {
        let mut env = env_with(state((0, 2), (3, 3), 0, (4, 0)));
        let r = env
            .step(&[UP, STAY], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(r.reward, -1.0);
        assert_eq!(env.state().positions[0], (0, 2));
    }

    #[test]
    fn eating_without_apple_is_a_no_op() {
        let mut env = env_with(state((0, 2), (3, 3), 0, (4, 0)));
        let r = env
            .step(&[EAT, EAT], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(env.state().owner, 0);
    }

    #[test]
    fn free_agent_cannot_walk_into_trapped_agent() {
        let mut env = env_with(state((2, 2), (2, 3), 0, (0, 0)));
        let r = env
            .step(&[RIGHT, STAY], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(env.state().positions[0], (2, 2));
    }

    #[test]
    fn invalid_action_is_rejected() {
        let mut env = TurnEnv::new();
        assert!(env.step(&[6, 0], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn episode_ends_at_the_limit() {
        let mut env = TurnEnv::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        for t in 1..=EPISODE_LIMIT {
            let r = env.step(&[STAY, STAY], &mut rng).unwrap();
            assert_eq!(r.done, t == EPISODE_LIMIT);
        }
        assert!(env.step(&[STAY, STAY], &mut rng).is_err());
    }

    #[test]
    fn corner_observation_has_five_out_of_bounds_cells() {
        let s = state((0, 0), (4, 4), 0, (3, 3));
        let obs = s.encode_obs(0);
        let oob = (0..9).filter(|w| obs[w * OBS_CHANNELS + 4] == 1.0).count();
        assert_eq!(oob, 5);
        // out-of-bounds cells carry nothing else
        for w in 0..9 {
            if obs[w * OBS_CHANNELS + 4] == 1.0 {
                let others: f64 = (0..OBS_CHANNELS)
                    .filter(|&c| c != 4)
                    .map(|c| obs[w * OBS_CHANNELS + c])
                    .sum();
                assert_eq!(others, 0.0);
            }
        }
        assert_eq!(obs[4 * OBS_CHANNELS], 1.0, "self at window center");
    }

    #[test]
    fn trapped_agent_sees_fence_everywhere() {
        let s = state((0, 0), (2, 2), 0, (0, 4));
        let obs = s.encode_obs(1);
        assert!((0..9).all(|w| obs[w * OBS_CHANNELS + 5] == 1.0));
        let free = s.encode_obs(0);
        assert!((0..9).all(|w| free[w * OBS_CHANNELS + 5] == 0.0));
    }

    #[test]
    fn apple_outside_window_is_invisible() {
        let s = state((0, 0), (4, 4), 0, (3, 3));
        let obs = s.encode_obs(0);
        assert!((0..9).all(|w| obs[w * OBS_CHANNELS + 2] == 0.0 && obs[w * OBS_CHANNELS + 3] == 0.0));
        // an adjacent apple of the other agent's color shows on channel 3
        let s = state((2, 2), (4, 4), 1, (2, 3));
        let obs = s.encode_obs(0);
        assert_eq!(obs[5 * OBS_CHANNELS + 3], 1.0);
        assert_eq!(obs[5 * OBS_CHANNELS + 2], 0.0);
    }

    #[test]
    fn state_vector_round_trips() {
        let mut env = TurnEnv::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        env.reset(&mut rng);
        for _ in 0..EPISODE_LIMIT {
            let s = *env.state();
            assert_eq!(TurnState::from_state_vector(&s.state_vector()).unwrap(), s);
            let a = [rng.gen_range(0..N_ACTIONS), rng.gen_range(0..N_ACTIONS)];
            env.step(&a, &mut rng).unwrap();
        }
    }

    #[test]
    fn oracle_adjacent_apple_moves_then_eats() {
        let s = state((2, 2), (4, 4), 0, (2, 3));
        let a = oracle_policy(&s);
        assert_eq!(a, [RIGHT, STAY]);
        let mut env = env_with(s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.step(&a, &mut rng).unwrap();
        assert_eq!(oracle_policy(env.state()), [EAT, STAY]);
    }

    #[test]
    fn oracle_walks_around_the_trapped_agent() {
        let s = state((2, 0), (2, 1), 0, (2, 2));
        let mut env = env_with(s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for _ in 0..5 {
            let a = oracle_policy(env.state());
            assert_eq!(a[1], STAY);
            total += env.step(&a, &mut rng).unwrap().reward;
        }
        assert_eq!(total, 10.0);
    }

    #[test]
    fn episode_log_round_trips() {
        let steps = vec![StepLog {
            t: 0,
            positions: [(0, 0), (4, 4)],
            owner: 0,
            actions: vec![1, 4],
            reward: -1.0,
            done: false,
        }];
        let mut buf = Vec::new();
        write_episode_log(&mut buf, &steps).unwrap();
        assert_eq!(read_episode_log(buf.as_slice()).unwrap(), steps);
    }
}
