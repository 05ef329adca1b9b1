use std::fmt::Write as _;

use super::{evaluate_flat, evaluate_skills, run_flat_episode, run_skill_episode, skill_fingerprint, EvalResult, FlatAgent, RolloutMode, SkillAgent};
use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::mappo::{gae, ppo_update, ActionValue, ActorCritic, PolicySample, PpoConfig, PpoDiagnostics, RolloutBuffer, ValueSample};
use crate::rng::{derive_seed, stream, Rng};

pub const METRICS_HEADER: &str =
    "step,episodes,win_rate,eval_return,train_return,train_win_rate,policy_loss,value_loss,entropy,approx_kl,clip_fraction,explained_variance";

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    /// Environment-step budget.
    pub steps: usize,
    /// Environment steps collected (in whole episodes) per PPO update.
    pub rollout_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub hidden: usize,
    pub ppo: PpoConfig,
    /// Sample decoder actions in training and evaluation rollouts (otherwise argmax).
    pub decoder_sampling: bool,
    /// Stop once an evaluation reaches this win rate.
    pub stop_at_win: Option<f64>,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            steps: 300_000,
            rollout_steps: 2_000,
            eval_every: 10_000,
            eval_episodes: 32,
            hidden: super::DEFAULT_HIDDEN,
            ppo: PpoConfig::default(),
            decoder_sampling: true,
            stop_at_win: None,
            seed: 0,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.rollout_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "steps, rollout_steps, eval_every, eval_episodes and hidden must be positive".into(),
            ));
        }
        if let Some(w) = self.stop_at_win {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("stop_at_win {w} outside [0, 1]")));
            }
        }
        self.ppo.validate()
    }
}

/// Number of high-level decisions in an episode of `max_steps` steps.
pub fn high_level_horizon(max_steps: usize, horizon: usize) -> usize {
    max_steps.div_ceil(horizon)
}

/// One periodic evaluation row of the metrics CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episodes: usize,
    pub win_rate: f64,
    pub eval_return: f64,
    pub train_return: f64,
    pub train_win_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub explained_variance: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.step, self.episodes);
        for v in [
            self.win_rate,
            self.eval_return,
            self.train_return,
            self.train_win_rate,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clip_fraction,
            self.explained_variance,
        ] {
            let _ = write!(s, ",{}", v + 0.0);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub steps: usize,
    pub episodes: usize,
    pub best_win_rate: f64,
    pub final_win_rate: f64,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

/// A high-level decision: the centralized state and, per acting agent,
/// (actor input, action, log-probability).
struct Decision {
    state: Vec<f64>,
    acts: Vec<(Vec<f64>, ActionValue, f64)>,
    reward: f64,
    done: bool,
}

struct Played {
    decisions: Vec<Decision>,
    ret: f64,
    won: bool,
    steps: usize,
}

trait Learner {
    fn play(&self, task: &TaskConfig, episode_seed: u64, rng: &mut Rng) -> Result<Played>;
    fn evaluate(&self, task: &TaskConfig, episodes: usize, seed: u64) -> Result<EvalResult>;
    fn ac_mut(&mut self) -> &mut ActorCritic;
    fn ac(&self) -> &ActorCritic;
}

struct SkillLearner<'a> {
    agent: &'a mut SkillAgent,
    decoder_sampling: bool,
}

impl Learner for SkillLearner<'_> {
    fn play(&self, task: &TaskConfig, episode_seed: u64, rng: &mut Rng) -> Result<Played> {
        let mode = RolloutMode {
            sample_actor: true,
            sample_decoder: self.decoder_sampling,
            trace: false,
        };
        let ep = run_skill_episode(task, episode_seed, self.agent, mode, rng)?;
        let decisions = ep
            .transitions
            .into_iter()
            .map(|tr| Decision {
                acts: (0..tr.alive.len())
                    .filter(|&i| tr.alive[i])
                    .map(|i| (tr.stacked_obs[i].clone(), ActionValue::Continuous(tr.actions[i].clone()), tr.log_probs[i]))
                    .collect(),
                state: tr.state,
                reward: tr.reward,
                done: tr.done,
            })
            .collect();
        Ok(Played {
            decisions,
            ret: ep.ret,
            won: ep.won,
            steps: ep.steps,
        })
    }

    fn evaluate(&self, task: &TaskConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
        evaluate_skills(
            task,
            self.agent,
            episodes,
            seed,
            RolloutMode {
                sample_decoder: self.decoder_sampling,
                ..RolloutMode::GREEDY
            },
        )
    }

    fn ac_mut(&mut self) -> &mut ActorCritic {
        &mut self.agent.ac
    }

    fn ac(&self) -> &ActorCritic {
        &self.agent.ac
    }
}

struct FlatLearner<'a> {
    agent: &'a mut FlatAgent,
}

impl Learner for FlatLearner<'_> {
    fn play(&self, task: &TaskConfig, episode_seed: u64, rng: &mut Rng) -> Result<Played> {
        let mode = RolloutMode {
            sample_actor: true,
            sample_decoder: false,
            trace: false,
        };
        let ep = run_flat_episode(task, episode_seed, self.agent, mode, rng)?;
        let steps = ep.steps.len();
        let decisions = ep
            .steps
            .into_iter()
            .map(|st| Decision {
                acts: (0..st.alive.len())
                    .filter(|&i| st.alive[i])
                    .map(|i| (st.stacked_obs[i].clone(), ActionValue::Discrete(st.actions[i]), st.log_probs[i]))
                    .collect(),
                state: st.state,
                reward: st.reward,
                done: st.done,
            })
            .collect();
        Ok(Played {
            decisions,
            ret: ep.ret,
            won: ep.won,
            steps,
        })
    }

    fn evaluate(&self, task: &TaskConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
        evaluate_flat(task, self.agent, episodes, seed, RolloutMode::GREEDY)
    }

    fn ac_mut(&mut self) -> &mut ActorCritic {
        &mut self.agent.ac
    }

    fn ac(&self) -> &ActorCritic {
        &self.agent.ac
    }
}

fn add_episode(buffer: &mut RolloutBuffer, ac: &ActorCritic, played: Played, ppo: &PpoConfig) -> Result<()> {
    let n = played.decisions.len();
    if n == 0 {
        return Ok(());
    }
    let states: Vec<f64> = played.decisions.iter().flat_map(|d| d.state.iter().copied()).collect();
    let values = ac.value(&states, n)?;
    let rewards: Vec<f64> = played.decisions.iter().map(|d| d.reward).collect();
    let dones: Vec<bool> = played.decisions.iter().map(|d| d.done).collect();
    let (adv, returns) = gae(&rewards, &values, &dones, 0.0, ppo.gamma, ppo.lambda)?;
    for ((d, a), ret) in played.decisions.into_iter().zip(adv).zip(returns) {
        for (input, action, lp) in d.acts {
            buffer.policy.push(PolicySample {
                input,
                action,
                mask: None,
                old_log_prob: lp,
                advantage: a,
            });
        }
        buffer.value.push(ValueSample { input: d.state, target: ret });
    }
    Ok(())
}

fn run<L: Learner, F: FnMut(&MetricsRow)>(learner: &mut L, task: &TaskConfig, cfg: &DownstreamConfig, mut on_row: F) -> Result<TrainOutcome> {
    task.validate()?;
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "downstream-sampling");
    let eval_seed = derive_seed(cfg.seed, "downstream-eval");
    let mut outcome = TrainOutcome {
        rows: Vec::new(),
        steps: 0,
        episodes: 0,
        best_win_rate: 0.0,
        final_win_rate: 0.0,
    };
    let mut window_returns: Vec<f64> = Vec::new();
    let mut window_wins = 0;
    let mut diag = PpoDiagnostics::default();
    let mut next_eval = 0;
    loop {
        if outcome.steps >= next_eval || outcome.steps >= cfg.steps {
            let ev = learner.evaluate(task, cfg.eval_episodes, eval_seed)?;
            let k = window_returns.len().max(1) as f64;
            let row = MetricsRow {
                step: outcome.steps,
                episodes: outcome.episodes,
                win_rate: ev.win_rate(),
                eval_return: ev.mean_return,
                train_return: window_returns.iter().sum::<f64>() / k,
                train_win_rate: window_wins as f64 / k,
                policy_loss: diag.policy_loss,
                value_loss: diag.value_loss,
                entropy: diag.entropy,
                approx_kl: diag.approx_kl,
                clip_fraction: diag.clip_fraction,
                explained_variance: diag.explained_variance,
            };
            on_row(&row);
            outcome.best_win_rate = outcome.best_win_rate.max(row.win_rate);
            outcome.final_win_rate = row.win_rate;
            outcome.rows.push(row);
            window_returns.clear();
            window_wins = 0;
            while next_eval <= outcome.steps {
                next_eval += cfg.eval_every;
            }
            let reached = cfg.stop_at_win.is_some_and(|w| outcome.final_win_rate >= w);
            if outcome.steps >= cfg.steps || reached {
                return Ok(outcome);
            }
        }

        let mut buffer = RolloutBuffer::default();
        let mut collected = 0;
        while collected < cfg.rollout_steps && outcome.steps + collected < cfg.steps {
            let seed = derive_seed(cfg.seed, &format!("downstream-episode/{}", outcome.episodes));
            let played = learner.play(task, seed, &mut rng)?;
            collected += played.steps;
            outcome.episodes += 1;
            window_returns.push(played.ret);
            window_wins += usize::from(played.won);
            add_episode(&mut buffer, learner.ac(), played, &cfg.ppo)?;
        }
        outcome.steps += collected;
        if buffer.is_empty() {
            continue;
        }
        let snapshot = learner.ac().clone();
        diag = ppo_update(learner.ac_mut(), &buffer, &cfg.ppo, &mut rng)?;
        if diag.aborted {
            *learner.ac_mut() = snapshot;
            return Err(Error::Diverged(format!(
                "PPO update after {} environment steps produced a non-finite loss",
                outcome.steps
            )));
        }
    }
}

/// Trains the high-level actor and critic of `agent` on `task`; the skill
/// components stay frozen and are verified byte-identical afterwards.
pub fn train_downstream<F: FnMut(&MetricsRow)>(task: &TaskConfig, agent: &mut SkillAgent, cfg: &DownstreamConfig, on_row: F) -> Result<TrainOutcome> {
    if task.n_agents == 0 {
        return Err(Error::Config("task without agents".into()));
    }
    let before = skill_fingerprint(&agent.skills);
    let outcome = {
        let mut learner = SkillLearner {
            agent: &mut *agent,
            decoder_sampling: cfg.decoder_sampling,
        };
        run(&mut learner, task, cfg, on_row)?
    };
    if skill_fingerprint(&agent.skills) != before {
        return Err(Error::Validation("frozen skill tensors changed during downstream training".into()));
    }
    Ok(outcome)
}

/// Flat MAPPO over primitive actions with the same budget and evaluation protocol.
pub fn train_flat<F: FnMut(&MetricsRow)>(task: &TaskConfig, agent: &mut FlatAgent, cfg: &DownstreamConfig, on_row: F) -> Result<TrainOutcome> {
    run(&mut FlatLearner { agent }, task, cfg, on_row)
}
