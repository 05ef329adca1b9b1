use serde::{Deserialize, Serialize};

use super::{E_MAX, N_MAX};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_id: String,
    pub grid_width: usize,
    pub grid_height: usize,
    pub n_agents: usize,
    pub n_enemies: usize,
    pub enemy_health: u32,
    pub view_radius: usize,
    pub max_steps: usize,
    pub reward_mode: RewardMode,
    pub win_bonus: f64,
    pub seed: u64,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_agents > N_MAX {
            return Err(Error::Config(format!("n_agents {} outside 1..={N_MAX}", self.n_agents)));
        }
        if self.n_enemies == 0 || self.n_enemies > E_MAX {
            return Err(Error::Config(format!("n_enemies {} outside 1..={E_MAX}", self.n_enemies)));
        }
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(Error::Config("empty grid".into()));
        }
        if self.enemy_health == 0 || self.view_radius == 0 || self.max_steps == 0 {
            return Err(Error::Config("enemy_health, view_radius and max_steps must be positive".into()));
        }
        if !self.win_bonus.is_finite() {
            return Err(Error::Config("win_bonus must be finite".into()));
        }
        Ok(())
    }

    pub fn sparse(mut self) -> Self {
        self.reward_mode = RewardMode::Sparse;
        self
    }
}

fn grid_for(units: usize) -> usize {
    match units {
        0..=3 => 8,
        4..=5 => 10,
        6..=7 => 12,
        _ => 14,
    }
}

/// Looks up a named task: `gN` (N agents against N enemies) or `gNvM`
/// (N agents against M enemies).
pub fn task(id: &str) -> Result<TaskConfig> {
    let bad = || Error::Config(format!("unknown task `{id}` (expected gN or gNvM)"));
    let rest = id.strip_prefix('g').ok_or_else(bad)?;
    let (n, e) = match rest.split_once('v') {
        Some((a, b)) => (a.parse::<usize>().map_err(|_| bad())?, b.parse::<usize>().map_err(|_| bad())?),
        None => {
            let n = rest.parse::<usize>().map_err(|_| bad())?;
            (n, n)
        }
    };
    let size = grid_for(n.max(e));
    let cfg = TaskConfig {
        task_id: id.to_string(),
        grid_width: size,
        grid_height: size,
        n_agents: n,
        n_enemies: e,
        enemy_health: 2,
        view_radius: 4,
        max_steps: 60,
        reward_mode: RewardMode::Dense,
        win_bonus: 20.0,
        seed: 0,
    };
    cfg.validate()?;
    Ok(cfg)
}
