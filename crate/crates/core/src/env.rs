//! Deterministic discrete environments.
//!
//! Three MDPs share the [`Environment`] interface: the standard 4x4
//! FrozenLake (non-slippery), an 8x8 empty MiniGrid-style room observed
//! through a 3x7x7 egocentric view, and a small chain used as an
//! analytically solvable test bed. FrozenLake and the chain also expose
//! their full transition model through [`TabularMdp`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    FrozenLake4x4,
    EmptyGrid8x8,
    /// Chain of the given length.
    Chain(usize),
}

pub const DEFAULT_CHAIN_LEN: usize = 5;

impl EnvId {
    pub fn spec(self) -> EnvSpec {
        let max_steps = match self {
            EnvId::FrozenLake4x4 => 100,
            EnvId::EmptyGrid8x8 => 256,
            EnvId::Chain(len) => 4 * len,
        };
        EnvSpec {
            id: self,
            max_steps,
            gamma_default: 0.99,
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvId::FrozenLake4x4 => Box::new(FrozenLake::new()),
            EnvId::EmptyGrid8x8 => Box::new(EmptyGrid::new()),
            EnvId::Chain(len) => Box::new(ChainMdp::new(len)),
        }
    }

    pub fn short_name(self) -> String {
        match self {
            EnvId::FrozenLake4x4 => "frozenlake".into(),
            EnvId::EmptyGrid8x8 => "emptygrid".into(),
            EnvId::Chain(DEFAULT_CHAIN_LEN) => "chain".into(),
            EnvId::Chain(len) => format!("chain:{len}"),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short_name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozenlake" => Ok(EnvId::FrozenLake4x4),
            "emptygrid" => Ok(EnvId::EmptyGrid8x8),
            "chain" => Ok(EnvId::Chain(DEFAULT_CHAIN_LEN)),
            other => {
                if let Some(len) = other.strip_prefix("chain:") {
                    let len: usize = len
                        .parse()
                        .map_err(|_| Error::Config(format!("bad chain length in `{other}`")))?;
                    if len == 0 {
                        return Err(Error::Config("chain length must be positive".into()));
                    }
                    Ok(EnvId::Chain(len))
                } else {
                    Err(Error::Config(format!(
                        "unknown env `{other}` (expected frozenlake|emptygrid|chain)"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub max_steps: usize,
    pub gamma_default: f64,
}

/// Flattened observation vector fed to the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Observation(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Observation,
    pub reward: f64,
    /// Reached a terminal state.
    pub done: bool,
    /// Hit the step limit without terminating.
    pub truncated: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> EnvSpec;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// All built-in environments have a single deterministic start state;
    /// the seed is accepted for interface uniformity.
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    /// Index of the current state for tabular environments.
    fn state_index(&self) -> Option<usize>;
    fn as_tabular(&self) -> Option<&dyn TabularMdp>;
    fn box_clone(&self) -> Box<dyn Environment>;

    fn enumerate_states(&self) -> Result<Vec<usize>> {
        match self.as_tabular() {
            Some(t) => Ok((0..t.n_states()).collect()),
            None => Err(Error::NotTabular(self.name())),
        }
    }

    fn name(&self) -> &'static str;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Full transition model of a small deterministic MDP.
pub trait TabularMdp {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn start_state(&self) -> usize;
    /// `(next_state, reward, done)` for taking `action` in `state`.
    fn transition(&self, state: usize, action: usize) -> (usize, f64, bool);
    fn observation(&self, state: usize) -> Observation;
    /// States in which the agent never acts (episode already over).
    fn is_absorbing(&self, state: usize) -> bool;
}

// ---------------------------------------------------------------------------

pub mod frozen_lake {
    pub const LEFT: usize = 0;
    pub const DOWN: usize = 1;
    pub const RIGHT: usize = 2;
    pub const UP: usize = 3;
    pub const MAP: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];
    pub const HOLES: [usize; 4] = [5, 7, 11, 12];
    pub const GOAL: usize = 15;
}

#[derive(Debug, Clone)]
pub struct FrozenLake {
    pos: usize,
    steps: usize,
    finished: bool,
    max_steps: usize,
}

impl FrozenLake {
    const SIDE: usize = 4;

    pub fn new() -> Self {
        FrozenLake {
            pos: 0,
            steps: 0,
            finished: false,
            max_steps: EnvId::FrozenLake4x4.spec().max_steps,
        }
    }

    fn tile(state: usize) -> u8 {
        frozen_lake::MAP[state / Self::SIDE].as_bytes()[state % Self::SIDE]
    }
}

impl Default for FrozenLake {
    fn default() -> Self {
        Self::new()
    }
}

impl TabularMdp for FrozenLake {
    fn n_states(&self) -> usize {
        Self::SIDE * Self::SIDE
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn start_state(&self) -> usize {
        0
    }

    fn transition(&self, state: usize, action: usize) -> (usize, f64, bool) {
        if self.is_absorbing(state) {
            return (state, 0.0, true);
        }
        let (mut row, mut col) = (state / Self::SIDE, state % Self::SIDE);
        match action {
            frozen_lake::LEFT => col = col.saturating_sub(1),
            frozen_lake::DOWN => row = (row + 1).min(Self::SIDE - 1),
            frozen_lake::RIGHT => col = (col + 1).min(Self::SIDE - 1),
            _ => row = row.saturating_sub(1),
        }
        let next = row * Self::SIDE + col;
        match Self::tile(next) {
            b'G' => (next, 1.0, true),
            b'H' => (next, 0.0, true),
            _ => (next, 0.0, false),
        }
    }

    fn observation(&self, state: usize) -> Observation {
        Observation::one_hot(self.n_states(), state)
    }

    fn is_absorbing(&self, state: usize) -> bool {
        matches!(Self::tile(state), b'H' | b'G')
    }
}

impl Environment for FrozenLake {
    fn spec(&self) -> EnvSpec {
        EnvId::FrozenLake4x4.spec()
    }

    fn obs_dim(&self) -> usize {
        16
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        self.pos = 0;
        self.steps = 0;
        self.finished = false;
        self.observation(0)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.finished {
            return Err(Error::StepAfterDone);
        }
        if action >= 4 {
            return Err(Error::InvalidAction { action, n_actions: 4 });
        }
        let (next, reward, done) = self.transition(self.pos, action);
        self.pos = next;
        self.steps += 1;
        let truncated = !done && self.steps >= self.max_steps;
        self.finished = done || truncated;
        Ok(StepResult {
            next_obs: self.observation(next),
            reward,
            done,
            truncated,
        })
    }

    fn state_index(&self) -> Option<usize> {
        Some(self.pos)
    }

    fn as_tabular(&self) -> Option<&dyn TabularMdp> {
        Some(self)
    }

    fn box_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "frozenlake"
    }
}

// ---------------------------------------------------------------------------

/// States `0..len`, actions `{0: left, 1: right}`. Moving right from the
/// last state leaves the chain with reward 1 and ends the episode.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    len: usize,
    pos: usize,
    steps: usize,
    finished: bool,
}

impl ChainMdp {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;

    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "chain length must be positive");
        ChainMdp {
            len,
            pos: 0,
            steps: 0,
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl TabularMdp for ChainMdp {
    fn n_states(&self) -> usize {
        self.len
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn start_state(&self) -> usize {
        0
    }

    fn transition(&self, state: usize, action: usize) -> (usize, f64, bool) {
        if action == Self::RIGHT {
            if state + 1 == self.len {
                (state, 1.0, true)
            } else {
                (state + 1, 0.0, false)
            }
        } else {
            (state.saturating_sub(1), 0.0, false)
        }
    }

    fn observation(&self, state: usize) -> Observation {
        Observation::one_hot(self.len, state)
    }

    fn is_absorbing(&self, _state: usize) -> bool {
        false
    }
}

impl Environment for ChainMdp {
    fn spec(&self) -> EnvSpec {
        EnvId::Chain(self.len).spec()
    }

    fn obs_dim(&self) -> usize {
        self.len
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        self.pos = 0;
        self.steps = 0;
        self.finished = false;
        self.observation(0)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.finished {
            return Err(Error::StepAfterDone);
        }
        if action >= 2 {
            return Err(Error::InvalidAction { action, n_actions: 2 });
        }
        let (next, reward, done) = self.transition(self.pos, action);
        self.pos = next;
        self.steps += 1;
        let truncated = !done && self.steps >= self.spec().max_steps;
        self.finished = done || truncated;
        Ok(StepResult {
            next_obs: self.observation(next),
            reward,
            done,
            truncated,
        })
    }

    fn state_index(&self) -> Option<usize> {
        Some(self.pos)
    }

    fn as_tabular(&self) -> Option<&dyn TabularMdp> {
        Some(self)
    }

    fn box_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "chain"
    }
}

// ---------------------------------------------------------------------------

pub mod empty_grid {
    pub const TURN_LEFT: usize = 0;
    pub const TURN_RIGHT: usize = 1;
    pub const FORWARD: usize = 2;
    pub const N_ACTIONS: usize = 7;
    pub const VIEW: usize = 7;
    pub const OBS_DIM: usize = 3 * VIEW * VIEW;

    // MiniGrid encoding indices.
    pub const OBJ_EMPTY: f64 = 1.0;
    pub const OBJ_WALL: f64 = 2.0;
    pub const OBJ_GOAL: f64 = 8.0;
    pub const COLOR_GREEN: f64 = 1.0;
    pub const COLOR_GREY: f64 = 5.0;
    pub const OBJ_MAX: f64 = 10.0;
    pub const COLOR_MAX: f64 = 5.0;
}

/// 8x8 room (outer ring is wall), agent starts at (1,1) facing right,
/// goal at (6,6). Actions 3..7 (pickup, drop, toggle, done) are no-ops.
#[derive(Debug, Clone)]
pub struct EmptyGrid {
    x: i64,
    y: i64,
    /// 0 right, 1 down, 2 left, 3 up.
    dir: u8,
    steps: usize,
    finished: bool,
}

impl EmptyGrid {
    const SIZE: i64 = 8;
    const GOAL: (i64, i64) = (6, 6);

    pub fn new() -> Self {
        EmptyGrid {
            x: 1,
            y: 1,
            dir: 0,
            steps: 0,
            finished: false,
        }
    }

    pub fn agent(&self) -> ((i64, i64), u8) {
        ((self.x, self.y), self.dir)
    }

    fn dir_vec(dir: u8) -> (i64, i64) {
        match dir % 4 {
            0 => (1, 0),
            1 => (0, 1),
            2 => (-1, 0),
            _ => (0, -1),
        }
    }

    fn is_wall(x: i64, y: i64) -> bool {
        x <= 0 || y <= 0 || x >= Self::SIZE - 1 || y >= Self::SIZE - 1
    }

    /// Egocentric view, channel-major `[object, color, state] x 7 x 7`,
    /// each channel scaled to [0, 1]. Row 6 of the view is the agent's
    /// row, column 3 the agent's column; cells outside the grid read as
    /// wall. No occlusion is modeled since the room has no inner walls.
    pub fn observe(&self) -> Observation {
        use empty_grid::*;
        let mut v = vec![0.0; OBS_DIM];
        let (fx, fy) = Self::dir_vec(self.dir);
        let (rx, ry) = Self::dir_vec(self.dir + 1);
        for vy in 0..VIEW {
            for vx in 0..VIEW {
                let fwd = (VIEW - 1 - vy) as i64;
                let lat = vx as i64 - (VIEW / 2) as i64;
                let wx = self.x + fwd * fx + lat * rx;
                let wy = self.y + fwd * fy + lat * ry;
                let (obj, color) = if Self::is_wall(wx, wy) {
                    (OBJ_WALL, COLOR_GREY)
                } else if (wx, wy) == Self::GOAL {
                    (OBJ_GOAL, COLOR_GREEN)
                } else {
                    (OBJ_EMPTY, 0.0)
                };
                let cell = vy * VIEW + vx;
                v[cell] = obj / OBJ_MAX;
                v[VIEW * VIEW + cell] = color / COLOR_MAX;
            }
        }
        Observation(v)
    }
}

impl Default for EmptyGrid {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for EmptyGrid {
    fn spec(&self) -> EnvSpec {
        EnvId::EmptyGrid8x8.spec()
    }

    fn obs_dim(&self) -> usize {
        empty_grid::OBS_DIM
    }

    fn n_actions(&self) -> usize {
        empty_grid::N_ACTIONS
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        *self = EmptyGrid::new();
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        use empty_grid::*;
        if self.finished {
            return Err(Error::StepAfterDone);
        }
        if action >= N_ACTIONS {
            return Err(Error::InvalidAction { action, n_actions: N_ACTIONS });
        }
        self.steps += 1;
        let max_steps = self.spec().max_steps;
        let mut done = false;
        let mut reward = 0.0;
        match action {
            TURN_LEFT => self.dir = (self.dir + 3) % 4,
            TURN_RIGHT => self.dir = (self.dir + 1) % 4,
            FORWARD => {
                let (dx, dy) = Self::dir_vec(self.dir);
                let (nx, ny) = (self.x + dx, self.y + dy);
                if !Self::is_wall(nx, ny) {
                    self.x = nx;
                    self.y = ny;
                    if (nx, ny) == Self::GOAL {
                        done = true;
                        reward = 1.0 - 0.9 * (self.steps as f64 / max_steps as f64);
                    }
                }
            }
            _ => {}
        }
        let truncated = !done && self.steps >= max_steps;
        self.finished = done || truncated;
        Ok(StepResult {
            next_obs: self.observe(),
            reward,
            done,
            truncated,
        })
    }

    fn state_index(&self) -> Option<usize> {
        None
    }

    fn as_tabular(&self) -> Option<&dyn TabularMdp> {
        None
    }

    fn box_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "emptygrid"
    }
}
