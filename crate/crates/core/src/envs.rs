//! Small enumerable MDPs with analytically checkable optimal values.
//!
//! Both environments are tabular with one-hot observations, so a modest
//! MLP can represent the optimal Q-function exactly and "greedy policy
//! equals the value-iteration policy" is a crisp success signal.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// One possible result of taking an action: probability, successor state,
/// reward, and whether the successor is terminal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub prob: f64,
    pub next: usize,
    pub reward: f64,
    pub done: bool,
}

/// What [`TabularEnv::step`] returns. `done` marks a true terminal
/// transition (no bootstrapping); `truncated` marks the episode cap, after
/// which the caller must reset but may still bootstrap.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

/// Enumerable MDP with explicit transition tables and one-hot observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEnv {
    num_states: usize,
    num_actions: usize,
    /// transitions[s][a] lists outcomes with probabilities summing to 1;
    /// terminal states have no outgoing rows.
    transitions: Vec<Vec<Vec<Outcome>>>,
    terminal: Vec<bool>,
    start: usize,
    episode_cap: usize,
    reward_min: f64,
    reward_max: f64,
    state: usize,
    steps_in_episode: usize,
    needs_reset: bool,
}

/// Linear chain of `n_states` cells. Actions move left or right; with
/// probability `slip_prob` the opposite move happens. The rightmost cell
/// is terminal and entering it pays 1; every other step pays -0.01.
/// The leftmost cell is the start and bounces leftward moves.
pub fn chain_mdp(n_states: usize, slip_prob: f64) -> TabularEnv {
    assert!(n_states >= 3, "chain needs at least 3 states");
    assert!(
        (0.0..=0.5).contains(&slip_prob),
        "slip probability must lie in [0, 0.5]"
    );
    let terminal_state = n_states - 1;
    let step_penalty = -0.01;
    let mut transitions = vec![vec![Vec::new(); 2]; n_states];
    let dest = |s: usize, dir: isize| -> usize {
        let raw = s as isize + dir;
        raw.clamp(0, terminal_state as isize) as usize
    };
    for s in 0..terminal_state {
        for (a, dir) in [(0usize, -1isize), (1usize, 1isize)] {
            let mut outcomes = Vec::new();
            for (d, p) in [(dir, 1.0 - slip_prob), (-dir, slip_prob)] {
                if p == 0.0 {
                    continue;
                }
                let next = dest(s, d);
                let done = next == terminal_state;
                outcomes.push(Outcome {
                    prob: p,
                    next,
                    reward: if done { 1.0 } else { step_penalty },
                    done,
                });
            }
            transitions[s][a] = outcomes;
        }
    }
    let mut terminal = vec![false; n_states];
    terminal[terminal_state] = true;
    TabularEnv {
        num_states: n_states,
        num_actions: 2,
        transitions,
        terminal,
        start: 0,
        episode_cap: 200,
        reward_min: step_penalty,
        reward_max: 1.0,
        state: 0,
        steps_in_episode: 0,
        needs_reset: false,
    }
}

/// Four-action gridworld. Moves off the grid bounce in place; every step
/// pays -1 except entering the goal (+10, terminal) or a trap (-10,
/// terminal). The start is the top-left cell (0, 0).
pub fn gridworld(
    width: usize,
    height: usize,
    goal: (usize, usize),
    traps: &[(usize, usize)],
) -> Result<TabularEnv> {
    assert!(width * height >= 2, "gridworld needs at least two cells");
    assert!(goal.0 < width && goal.1 < height, "goal outside grid");
    assert!(goal != (0, 0), "goal coincides with the start cell");
    for &(x, y) in traps {
        assert!(x < width && y < height, "trap outside grid");
        assert!((x, y) != (0, 0), "trap on the start cell");
    }
    if traps.contains(&goal) {
        return Err(Error::GoalOnTrap(goal.0, goal.1));
    }
    let n = width * height;
    let cell = |x: usize, y: usize| y * width + x;
    let goal_state = cell(goal.0, goal.1);
    let mut terminal = vec![false; n];
    terminal[goal_state] = true;
    for &(x, y) in traps {
        terminal[cell(x, y)] = true;
    }
    let mut transitions = vec![vec![Vec::new(); 4]; n];
    for y in 0..height {
        for x in 0..width {
            let s = cell(x, y);
            if terminal[s] {
                continue;
            }
            // 0: up, 1: down, 2: left, 3: right.
            let moves = [
                (x as isize, y as isize - 1),
                (x as isize, y as isize + 1),
                (x as isize - 1, y as isize),
                (x as isize + 1, y as isize),
            ];
            for (a, &(nx, ny)) in moves.iter().enumerate() {
                let inside = nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height;
                let next = if inside {
                    cell(nx as usize, ny as usize)
                } else {
                    s
                };
                let done = terminal[next];
                let reward = if next == goal_state {
                    10.0
                } else if done {
                    -10.0
                } else {
                    -1.0
                };
                transitions[s][a] = vec![Outcome {
                    prob: 1.0,
                    next,
                    reward,
                    done,
                }];
            }
        }
    }
    Ok(TabularEnv {
        num_states: n,
        num_actions: 4,
        transitions,
        terminal,
        start: 0,
        episode_cap: 200,
        reward_min: -10.0,
        reward_max: 10.0,
        state: 0,
        steps_in_episode: 0,
        needs_reset: false,
    })
}

impl TabularEnv {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Observation width (one-hot over states).
    pub fn obs_dim(&self) -> usize {
        self.num_states
    }

    pub fn episode_cap(&self) -> usize {
        self.episode_cap
    }

    pub fn start_state(&self) -> usize {
        self.start
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward_bounds(&self) -> (f64, f64) {
        (self.reward_min, self.reward_max)
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.transitions[s][a]
    }

    pub fn encode(&self, s: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.num_states];
        obs[s] = 1.0;
        obs
    }

    /// Current dynamic state, for checkpointing.
    pub fn dynamic_state(&self) -> (usize, usize, bool) {
        (self.state, self.steps_in_episode, self.needs_reset)
    }

    pub fn restore_dynamic_state(&mut self, state: usize, steps: usize, needs_reset: bool) {
        assert!(state < self.num_states);
        self.state = state;
        self.steps_in_episode = steps;
        self.needs_reset = needs_reset;
    }

    pub fn reset<R: Rng>(&mut self, _rng: &mut R) -> Vec<f64> {
        self.state = self.start;
        self.steps_in_episode = 0;
        self.needs_reset = false;
        self.encode(self.state)
    }

    /// Advance one step. Exactly one uniform draw is consumed per call, so
    /// trajectories are reproducible from the environment RNG stream alone.
    pub fn step<R: Rng>(&mut self, action: usize, rng: &mut R) -> Result<StepOutcome> {
        assert!(!self.needs_reset, "step called on a finished episode");
        if action >= self.num_actions {
            return Err(Error::OutOfRange {
                context: "action",
                index: action,
                len: self.num_actions,
            });
        }
        let outcomes = &self.transitions[self.state][action];
        debug_assert!(!outcomes.is_empty(), "no outcomes from a live state");
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut chosen = outcomes.len() - 1;
        for (i, o) in outcomes.iter().enumerate() {
            cum += o.prob;
            if u < cum {
                chosen = i;
                break;
            }
        }
        let o = outcomes[chosen];
        self.state = o.next;
        self.steps_in_episode += 1;
        let truncated = !o.done && self.steps_in_episode >= self.episode_cap;
        self.needs_reset = o.done || truncated;
        Ok(StepOutcome {
            obs: self.encode(o.next),
            reward: o.reward,
            done: o.done,
            truncated,
        })
    }
}

/// Tabular state-action values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub q: Vec<Vec<f64>>,
}

impl QTable {
    pub fn value(&self, s: usize, a: usize) -> f64 {
        self.q[s][a]
    }

    pub fn state_value(&self, s: usize) -> f64 {
        self.q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action per state; ties resolve to the lowest action index.
    pub fn greedy(&self) -> Vec<usize> {
        self.q
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(a, _)| a)
                    .unwrap()
            })
            .collect()
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        w.write_record(["state", "action", "q"])
            .map_err(Error::from)?;
        for (s, row) in self.q.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                w.write_record([s.to_string(), a.to_string(), v.to_string()])
                    .map_err(Error::from)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Upper cap on enumerable state-action pairs for exact methods.
pub const ENUMERATION_LIMIT: usize = 10_000;

/// Exact Q-iteration to a sup-norm fixed-point tolerance. Terminal states
/// keep value zero.
pub fn value_iteration(env: &TabularEnv, gamma: f64, tol: f64) -> Result<QTable> {
    assert!((0.0..1.0).contains(&gamma), "discount must lie in [0, 1)");
    assert!(tol > 0.0, "tolerance must be positive");
    let pairs = env.num_states() * env.num_actions();
    if pairs > ENUMERATION_LIMIT {
        return Err(Error::NotEnumerable(pairs, ENUMERATION_LIMIT));
    }
    let mut q = vec![vec![0.0; env.num_actions()]; env.num_states()];
    loop {
        let mut next = vec![vec![0.0; env.num_actions()]; env.num_states()];
        let mut diff = 0.0f64;
        for s in 0..env.num_states() {
            if env.is_terminal(s) {
                continue;
            }
            for a in 0..env.num_actions() {
                let mut v = 0.0;
                for o in env.outcomes(s, a) {
                    let bootstrap = if o.done {
                        0.0
                    } else {
                        q[o.next].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    };
                    v += o.prob * (o.reward + gamma * bootstrap);
                }
                next[s][a] = v;
                diff = diff.max((v - q[s][a]).abs());
            }
        }
        q = next;
        if diff < tol {
            return Ok(QTable { q });
        }
    }
}

/// Sup-norm Bellman residual of a Q table: max over non-terminal (s, a) of
/// |(TQ)(s,a) - Q(s,a)|.
pub fn bellman_residual(env: &TabularEnv, q: &QTable, gamma: f64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..env.num_states() {
        if env.is_terminal(s) {
            continue;
        }
        for a in 0..env.num_actions() {
            let mut v = 0.0;
            for o in env.outcomes(s, a) {
                let bootstrap = if o.done { 0.0 } else { q.state_value(o.next) };
                v += o.prob * (o.reward + gamma * bootstrap);
            }
            worst = worst.max((v - q.value(s, a)).abs());
        }
    }
    worst
}
