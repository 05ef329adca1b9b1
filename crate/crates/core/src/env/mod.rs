//! "Skirmish": a cooperative grid-combat Dec-POMDP.
//!
//! `n` allied agents start in the left third of the grid, stationary enemies
//! in the right third. Agents observe nearby units through padded entity
//! slots and share one team reward per step.

mod expert;
mod tasks;

pub use expert::{action_frequencies, greedy_actions, ScriptedExpert};
pub use tasks::{task, RewardMode, TaskConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use rand::SeedableRng;

/// Maximum number of allied agents in any task.
pub const N_MAX: usize = 10;
/// Maximum number of enemies in any task.
pub const E_MAX: usize = 12;
pub const N_ACTIONS: usize = 6;
pub const AGENT_HEALTH: u32 = 3;
const SLOT: usize = 4;
pub const OBS_DIM: usize = 3 + SLOT * (N_MAX + E_MAX);
pub const STATE_DIM: usize = SLOT * (N_MAX + E_MAX);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Stay = 0,
    /// y - 1
    Up = 1,
    /// y + 1
    Down = 2,
    Left = 3,
    Right = 4,
    /// Attack the nearest visible enemy; hits only at Chebyshev distance 1.
    Attack = 5,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Stay, Action::Up, Action::Down, Action::Left, Action::Right, Action::Attack];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Validation(format!("action index {i} out of range")))
    }

    fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::Up => Some((0, -1)),
            Action::Down => Some((0, 1)),
            Action::Left => Some((-1, 0)),
            Action::Right => Some((1, 0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub x: i32,
    pub y: i32,
    pub health: u32,
}

impl Unit {
    pub fn alive(&self) -> bool {
        self.health > 0
    }

    pub fn cheb(&self, other: &Unit) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub agents: Vec<Unit>,
    pub enemies: Vec<Unit>,
    pub t: usize,
}

impl EnvState {
    pub fn won(&self) -> bool {
        self.enemies.iter().all(|e| !e.alive())
    }

    pub fn lost(&self) -> bool {
        self.agents.iter().all(|a| !a.alive())
    }

    pub fn is_terminal(&self, cfg: &TaskConfig) -> bool {
        self.won() || self.lost() || self.t >= cfg.max_steps
    }

    fn occupied(&self, x: i32, y: i32) -> bool {
        self.agents.iter().chain(&self.enemies).any(|u| u.alive() && u.x == x && u.y == y)
    }

    /// Global state vector: per agent slot then per enemy slot,
    /// `(x, y, health fraction, alive)`, absent slots zeroed.
    pub fn state_vector(&self, cfg: &TaskConfig) -> Vec<f64> {
        let mut s = vec![0.0; STATE_DIM];
        let nx = norm_axis(cfg.grid_width);
        let ny = norm_axis(cfg.grid_height);
        let units = self.agents.iter().map(|u| (u, f64::from(AGENT_HEALTH))).enumerate().chain(
            self.enemies
                .iter()
                .map(|u| (u, f64::from(cfg.enemy_health)))
                .enumerate()
                .map(|(j, p)| (N_MAX + j, p)),
        );
        for (slot, (u, max_h)) in units {
            if u.alive() {
                let o = slot * SLOT;
                s[o] = f64::from(u.x) * nx;
                s[o + 1] = f64::from(u.y) * ny;
                s[o + 2] = f64::from(u.health) / max_h;
                s[o + 3] = 1.0;
            }
        }
        s
    }

    /// Local observation of agent `i`.
    ///
    /// Ally slots hold the agent itself first, then every other visible
    /// living ally in index order; enemy slots hold visible living enemies
    /// in index order. Unused slots stay zero.
    pub fn observation(&self, cfg: &TaskConfig, i: usize) -> Vec<f64> {
        let mut o = vec![0.0; OBS_DIM];
        let me = self.agents[i];
        if !me.alive() {
            return o;
        }
        o[0] = f64::from(me.x) * norm_axis(cfg.grid_width);
        o[1] = f64::from(me.y) * norm_axis(cfg.grid_height);
        o[2] = 1.0;
        let r = cfg.view_radius as i32;
        let rf = f64::from(r);
        let mut write = |slot: usize, u: &Unit, max_h: f64| {
            let base = 3 + slot * SLOT;
            o[base] = f64::from(u.x - me.x) / rf;
            o[base + 1] = f64::from(u.y - me.y) / rf;
            o[base + 2] = f64::from(u.health) / max_h;
            o[base + 3] = 1.0;
        };
        let visible = |u: &&Unit| u.alive() && me.cheb(u) <= r;
        let allies = std::iter::once(&me).chain(self.agents.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, u)| u).filter(visible));
        for (slot, u) in allies.enumerate() {
            write(slot, u, f64::from(AGENT_HEALTH));
        }
        for (slot, u) in self.enemies.iter().filter(visible).enumerate() {
            write(N_MAX + slot, u, f64::from(cfg.enemy_health));
        }
        o
    }

    pub fn observations(&self, cfg: &TaskConfig) -> Vec<Vec<f64>> {
        (0..self.agents.len()).map(|i| self.observation(cfg, i)).collect()
    }

    /// Nearest living enemy visible from agent `i`, ties to the lowest index.
    pub fn nearest_visible_enemy(&self, cfg: &TaskConfig, i: usize) -> Option<usize> {
        let me = &self.agents[i];
        self.enemies
            .iter()
            .enumerate()
            .filter(|(_, e)| e.alive() && me.cheb(e) <= cfg.view_radius as i32)
            .min_by_key(|(j, e)| (me.cheb(e), *j))
            .map(|(j, _)| j)
    }
}

fn norm_axis(extent: usize) -> f64 {
    if extent > 1 {
        1.0 / (extent - 1) as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub state: EnvState,
    pub observations: Vec<Vec<f64>>,
    pub done: bool,
    /// Damage dealt by agents this step.
    pub damage: u32,
}

/// Initial state for `(config, episode_seed)`.
pub fn reset(cfg: &TaskConfig, episode_seed: u64) -> Result<(EnvState, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed ^ derive_seed(episode_seed, "episode"), "reset"));
    let third = cfg.grid_width.div_ceil(3);
    let cells =
        |x0: usize, x1: usize| -> Vec<(i32, i32)> { (x0..x1).flat_map(|x| (0..cfg.grid_height).map(move |y| (x as i32, y as i32))).collect() };
    let mut left = cells(0, third);
    let mut right = cells(cfg.grid_width - third, cfg.grid_width);
    if left.len() < cfg.n_agents || right.len() < cfg.n_enemies {
        return Err(Error::Config(format!(
            "{} agents / {} enemies do not fit the {}x{} grid thirds",
            cfg.n_agents, cfg.n_enemies, cfg.grid_width, cfg.grid_height
        )));
    }
    left.shuffle(&mut rng);
    right.shuffle(&mut rng);
    let agents = left[..cfg.n_agents].iter().map(|&(x, y)| Unit { x, y, health: AGENT_HEALTH }).collect();
    let enemies = right[..cfg.n_enemies]
        .iter()
        .map(|&(x, y)| Unit {
            x,
            y,
            health: cfg.enemy_health,
        })
        .collect();
    let state = EnvState { agents, enemies, t: 0 };
    let obs = state.observations(cfg);
    Ok((state, obs))
}

/// Advances one step. Pure: the input state is not modified.
pub fn step(cfg: &TaskConfig, state: &EnvState, actions: &[Action]) -> Result<StepOutcome> {
    if state.is_terminal(cfg) {
        return Err(Error::Validation("step called on a terminal state".into()));
    }
    if actions.len() != state.agents.len() {
        return Err(Error::Validation(format!("{} actions for {} agents", actions.len(), state.agents.len())));
    }
    for (i, (a, u)) in actions.iter().zip(&state.agents).enumerate() {
        if !u.alive() && *a != Action::Stay {
            return Err(Error::Validation(format!("dead agent {i} must stay, got {a:?}")));
        }
    }
    let mut s = state.clone();
    let (w, h) = (cfg.grid_width as i32, cfg.grid_height as i32);

    // Moves resolve sequentially by agent index.
    for (i, a) in actions.iter().enumerate() {
        let Some((dx, dy)) = a.delta() else { continue };
        let u = s.agents[i];
        let (nx, ny) = (u.x + dx, u.y + dy);
        if nx < 0 || ny < 0 || nx >= w || ny >= h || s.occupied(nx, ny) {
            continue;
        }
        s.agents[i].x = nx;
        s.agents[i].y = ny;
    }

    let mut damage = 0;
    for (i, a) in actions.iter().enumerate() {
        if *a != Action::Attack || !s.agents[i].alive() {
            continue;
        }
        if let Some(j) = s.nearest_visible_enemy(cfg, i) {
            if s.agents[i].cheb(&s.enemies[j]) <= 1 {
                s.enemies[j].health -= 1;
                damage += 1;
            }
        }
    }

    // Enemies are passive until damaged; a provoked enemy strikes the
    // nearest agent in range every step until it dies.
    let killed_all = s.won();
    let enemies = s.enemies.clone();
    for e in enemies.iter().filter(|e| e.alive() && e.health < cfg.enemy_health) {
        let target = s
            .agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.alive() && a.cheb(e) <= 1)
            .min_by_key(|(i, a)| (a.cheb(e), *i))
            .map(|(i, _)| i);
        if let Some(i) = target {
            s.agents[i].health -= 1;
        }
    }
    s.t += 1;

    let win_reward = if killed_all { cfg.win_bonus } else { 0.0 };
    let reward = match cfg.reward_mode {
        RewardMode::Dense => f64::from(damage) + win_reward,
        RewardMode::Sparse => win_reward,
    };
    let done = s.is_terminal(cfg);
    let observations = s.observations(cfg);
    Ok(StepOutcome {
        reward,
        state: s,
        observations,
        done,
        damage,
    })
}

/// Stateful convenience wrapper around [`reset`]/[`step`].
#[derive(Debug, Clone)]
pub struct Env {
    pub config: TaskConfig,
    pub state: EnvState,
}

impl Env {
    pub fn new(config: TaskConfig, episode_seed: u64) -> Result<(Self, Vec<Vec<f64>>)> {
        let (state, obs) = reset(&config, episode_seed)?;
        Ok((Self { config, state }, obs))
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        let out = step(&self.config, &self.state, actions)?;
        self.state = out.state.clone();
        Ok(out)
    }

    pub fn done(&self) -> bool {
        self.state.is_terminal(&self.config)
    }
}
