use std::collections::VecDeque;

use rand::Rng as _;

use super::{Action, EnvState, TaskConfig, N_ACTIONS};
use crate::rng::Rng;

/// Focus-fire demonstrator.
///
/// Every agent targets the lowest-index living enemy, attacks it when in
/// range and otherwise takes one step along a shortest path around living
/// enemies, preferring horizontal moves. With probability `epsilon` each
/// living agent's action is replaced by a uniformly random one.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    pub epsilon: f64,
    rng: Rng,
}

impl ScriptedExpert {
    pub fn new(epsilon: f64, rng: Rng) -> Self {
        Self {
            epsilon: epsilon.clamp(0.0, 1.0),
            rng,
        }
    }

    pub fn act(&mut self, cfg: &TaskConfig, state: &EnvState) -> Vec<Action> {
        let mut actions = greedy_actions(cfg, state);
        for (a, u) in actions.iter_mut().zip(&state.agents) {
            if u.alive() && self.epsilon > 0.0 && self.rng.random::<f64>() < self.epsilon {
                *a = Action::ALL[self.rng.random_range(0..N_ACTIONS)];
            }
        }
        actions
    }
}

/// Noise-free expert actions.
pub fn greedy_actions(cfg: &TaskConfig, state: &EnvState) -> Vec<Action> {
    let Some(target) = state.enemies.iter().position(|e| e.alive()) else {
        return vec![Action::Stay; state.agents.len()];
    };
    let dist = distance_to_target(cfg, state, target);
    let (w, h) = (cfg.grid_width as i32, cfg.grid_height as i32);
    let tgt = state.enemies[target];
    state
        .agents
        .iter()
        .map(|u| {
            if !u.alive() {
                return Action::Stay;
            }
            if u.cheb(&tgt) <= 1 {
                return Action::Attack;
            }
            let here = dist[(u.y * w + u.x) as usize];
            if here == u32::MAX {
                return Action::Stay;
            }
            let toward_x = if tgt.x >= u.x { Action::Right } else { Action::Left };
            let away_x = if toward_x == Action::Right { Action::Left } else { Action::Right };
            let toward_y = if tgt.y >= u.y { Action::Down } else { Action::Up };
            let away_y = if toward_y == Action::Down { Action::Up } else { Action::Down };
            for a in [toward_x, away_x, toward_y, away_y] {
                let (dx, dy) = a.delta().unwrap();
                let (nx, ny) = (u.x + dx, u.y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h && dist[(ny * w + nx) as usize].checked_add(1) == Some(here) {
                    return a;
                }
            }
            Action::Stay
        })
        .collect()
}

// BFS distance from every cell to the set of cells within Chebyshev range 1
// of the target, treating living enemies as walls.
fn distance_to_target(cfg: &TaskConfig, state: &EnvState, target: usize) -> Vec<u32> {
    let (w, h) = (cfg.grid_width as i32, cfg.grid_height as i32);
    let mut blocked = vec![false; (w * h) as usize];
    for e in state.enemies.iter().filter(|e| e.alive()) {
        blocked[(e.y * w + e.x) as usize] = true;
    }
    let mut dist = vec![u32::MAX; (w * h) as usize];
    let mut queue = VecDeque::new();
    let t = state.enemies[target];
    for y in (t.y - 1).max(0)..=(t.y + 1).min(h - 1) {
        for x in (t.x - 1).max(0)..=(t.x + 1).min(w - 1) {
            let c = (y * w + x) as usize;
            if !blocked[c] {
                dist[c] = 0;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[(y * w + x) as usize];
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            let c = (ny * w + nx) as usize;
            if !blocked[c] && dist[c] == u32::MAX {
                dist[c] = d + 1;
                queue.push_back((nx, ny));
            }
        }
    }
    dist
}

/// Empirical action distribution of `draws` noisy expert decisions.
pub fn action_frequencies(expert: &mut ScriptedExpert, cfg: &TaskConfig, state: &EnvState, draws: usize) -> [f64; N_ACTIONS] {
    let mut counts = [0usize; N_ACTIONS];
    let mut total = 0;
    while total < draws {
        for (a, u) in expert.act(cfg, state).iter().zip(&state.agents) {
            if u.alive() && total < draws {
                counts[a.index()] += 1;
                total += 1;
            }
        }
    }
    counts.map(|c| c as f64 / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, step, RewardMode, Unit, AGENT_HEALTH};
    use crate::rng::stream;

    fn cfg(n: usize, e: usize, health: u32) -> TaskConfig {
        TaskConfig {
            task_id: "t".into(),
            grid_width: 8,
            grid_height: 8,
            n_agents: n,
            n_enemies: e,
            enemy_health: health,
            view_radius: 4,
            max_steps: 40,
            reward_mode: RewardMode::Dense,
            win_bonus: 20.0,
            seed: 0,
        }
    }

    #[test]
    fn adjacent_expert_attacks() {
        let c = cfg(1, 1, 2);
        let s = EnvState {
            agents: vec![Unit {
                x: 2,
                y: 2,
                health: AGENT_HEALTH,
            }],
            enemies: vec![Unit { x: 3, y: 3, health: 2 }],
            t: 0,
        };
        let mut ex = ScriptedExpert::new(0.0, stream(0, "noise"));
        assert_eq!(ex.act(&c, &s), vec![Action::Attack]);
    }

    #[test]
    fn horizontal_moves_come_first() {
        let c = cfg(1, 1, 2);
        let s = EnvState {
            agents: vec![Unit {
                x: 0,
                y: 0,
                health: AGENT_HEALTH,
            }],
            enemies: vec![Unit { x: 6, y: 6, health: 2 }],
            t: 0,
        };
        assert_eq!(greedy_actions(&c, &s), vec![Action::Right]);
    }

    #[test]
    fn paths_route_around_enemies() {
        let c = cfg(1, 2, 2);
        // enemy 1 sits between the agent and the target on the same row
        let s = EnvState {
            agents: vec![Unit {
                x: 4,
                y: 3,
                health: AGENT_HEALTH,
            }],
            enemies: vec![Unit { x: 7, y: 3, health: 2 }, Unit { x: 5, y: 3, health: 2 }],
            t: 0,
        };
        let a = greedy_actions(&c, &s)[0];
        assert!(matches!(a, Action::Up | Action::Down), "{a:?}");
    }

    #[test]
    fn expert_beats_a_single_tough_enemy() {
        let c = cfg(3, 1, 6);
        for seed in 0..100 {
            let (mut s, _) = reset(&c, seed).unwrap();
            let mut ex = ScriptedExpert::new(0.0, stream(seed, "noise"));
            loop {
                let out = step(&c, &s, &ex.act(&c, &s)).unwrap();
                s = out.state;
                if out.done {
                    break;
                }
            }
            assert!(s.won(), "seed {seed} lost at t={}", s.t);
        }
    }

    #[test]
    fn full_noise_is_uniform() {
        let c = cfg(3, 1, 2);
        let (s, _) = reset(&c, 1).unwrap();
        let mut ex = ScriptedExpert::new(1.0, stream(4, "noise"));
        let f = action_frequencies(&mut ex, &c, &s, 100_000);
        for p in f {
            assert!((p - 1.0 / 6.0).abs() < 0.02, "{f:?}");
        }
    }
}
