//! Downstream use of frozen skills: a high-level actor emits one embedding
//! per agent every `H` steps, the embeddings are mapped to codes, and the
//! frozen decoder acts until the next decision point. A flat MAPPO learner
//! over primitive actions serves as the baseline.

mod assign;
mod train;

pub use assign::{
    assign_3d, assign_3d_with, assign_hier, assign_hier_with, assign_mixed, assign_rule, combinations, rule_candidates, Assignment, CodeRef, Manner,
    RowPool, RuleCandidate,
};
pub use train::{high_level_horizon, train_downstream, train_flat, DownstreamConfig, MetricsRow, TrainOutcome, METRICS_HEADER};

use rand::Rng as _;
use serde::Serialize;

use crate::env::{reset, step, Action, EnvState, TaskConfig, N_ACTIONS, OBS_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::grouper::{GroupingContext, Partition};
use crate::mappo::{argmax, gaussian_log_prob, ActorCritic, Policy, PolicyHead, PpoConfig};
use crate::nn::{log_softmax_rows, Activation, AdamState, Checkpoint, Mlp, ParameterSet, Role};
use crate::rng::{derive_seed, Rng};
use crate::vq::{Codebooks, Discovery, Method};

pub const ACTOR_PREFIX: &str = "actor";
pub const CRITIC_PREFIX: &str = "critic";
pub const DEFAULT_HIDDEN: usize = 64;
/// Observations stacked per actor input: the current and the previous one.
pub const STACK_DEPTH: usize = 2;

/// `[o_t, o_{t-1}]` per agent.
pub fn stack_observations(current: &[Vec<f64>], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    current
        .iter()
        .zip(previous)
        .map(|(c, p)| {
            let mut v = c.clone();
            v.extend_from_slice(p);
            v
        })
        .collect()
}

fn actor_critic(head: PolicyHead, hidden: usize, ppo: &PpoConfig, rng: &mut Rng) -> ActorCritic {
    let policy = Policy::new(ACTOR_PREFIX, STACK_DEPTH * OBS_DIM, hidden, head);
    let critic_net = Mlp::new(CRITIC_PREFIX, &[STATE_DIM, hidden, hidden, 1], Activation::Tanh, true);
    let mut actor = ParameterSet::new(Role::Actor);
    let mut critic = ParameterSet::new(Role::Critic);
    policy.init(&mut actor, rng);
    critic_net.init(&mut critic, rng);
    ActorCritic {
        policy,
        actor,
        actor_opt: AdamState::new(ppo.lr_actor),
        critic_net,
        critic,
        critic_opt: AdamState::new(ppo.lr_critic),
    }
}

fn restore_actor_critic(ac: &mut ActorCritic, ck: &Checkpoint) -> Result<()> {
    let actor = ck
        .extract(ACTOR_PREFIX, Role::Actor)
        .map_err(|_| Error::MissingTensors(format!("{ACTOR_PREFIX}/*")))?;
    let critic = ck
        .extract(CRITIC_PREFIX, Role::Critic)
        .map_err(|_| Error::MissingTensors(format!("{CRITIC_PREFIX}/*")))?;
    for (have, want) in [(&actor, &ac.actor), (&critic, &ac.critic)] {
        for (name, t) in want.iter() {
            if have.get(name).map(|x| x.shape()) != Some(t.shape()) {
                return Err(Error::Structure(format!(
                    "policy tensor `{name}` is missing or has the wrong shape for this environment"
                )));
            }
        }
    }
    ac.actor = actor;
    ac.critic = critic;
    Ok(())
}

fn hidden_of(ck: &Checkpoint) -> Result<usize> {
    ck.require_meta("policy_hidden")?
        .parse()
        .map_err(|_| Error::Config("checkpoint meta `policy_hidden` is not an integer".into()))
}

/// Per-dimension affine map from the actor's output space onto the region
/// spanned by the codebook rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EmbeddingScale {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, d: usize) -> Self {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-3))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.mean).zip(&self.std).map(|((a, m), s)| m + s * a).collect()
    }
}

/// High-level learner over frozen skills.
#[derive(Debug, Clone)]
pub struct SkillAgent {
    pub manner: Manner,
    pub skills: Discovery,
    pub ac: ActorCritic,
    pub scale: EmbeddingScale,
    pool: Option<RowPool>,
}

impl SkillAgent {
    pub fn new(skills: Discovery, manner: Manner, hidden: usize, ppo: &PpoConfig, rng: &mut Rng) -> Result<Self> {
        manner.check(&skills)?;
        if skills.model.obs_dim != OBS_DIM {
            return Err(Error::Structure(format!(
                "skills were trained on {}-wide observations, the environment emits {OBS_DIM}",
                skills.model.obs_dim
            )));
        }
        let d = skills.model.config.d;
        let pool = match (manner, &skills.model.codebooks) {
            (Manner::Mixed, Codebooks::ThreeD(cb)) => Some(RowPool::from_3d(cb)?),
            (Manner::Mixed, Codebooks::Hier(cb)) => Some(RowPool::from_table(cb.btm())),
            _ => None,
        };
        let scale = match &skills.model.codebooks {
            Codebooks::ThreeD(cb) => {
                let all = RowPool::from_3d(cb)?;
                EmbeddingScale::from_rows(all.rows.iter().map(|(_, r)| r.as_slice()), d)
            }
            Codebooks::Hier(cb) => EmbeddingScale::from_rows(cb.btm().data().chunks_exact(d), d),
        };
        let ac = actor_critic(PolicyHead::Gaussian { dim: d }, hidden, ppo, rng);
        Ok(Self {
            manner,
            skills,
            ac,
            scale,
            pool,
        })
    }

    pub fn horizon(&self) -> usize {
        self.skills.model.config.horizon
    }

    pub fn embedding_dim(&self) -> usize {
        self.skills.model.config.d
    }

    /// Maps per-agent embeddings to codes under this agent's manner.
    pub fn assign(&self, z: &[Vec<f64>], ctx: &GroupingContext) -> Result<Assignment> {
        let model = &self.skills.model;
        let grouper = || {
            self.skills
                .grouper
                .as_ref()
                .ok_or_else(|| Error::MissingTensors("grouper/actor/*".into()))
        };
        match (self.manner, &model.codebooks) {
            (Manner::ThreeD, Codebooks::ThreeD(cb)) => assign_3d(z, grouper()?, cb, ctx),
            (Manner::Hier, Codebooks::Hier(cb)) => {
                let agg = model.aggregator.as_ref().zip(model.agg.as_ref());
                let (agg, params) = agg.ok_or_else(|| Error::MissingTensors("agg/*".into()))?;
                assign_hier(z, grouper()?, agg, params, cb, ctx)
            }
            (Manner::Mixed, _) => assign_mixed(z, self.pool.as_ref().expect("pool built for mixed")),
            (Manner::Rule, Codebooks::ThreeD(cb)) => assign_rule(z, cb),
            _ => Err(Error::MissingTensors(format!("codebooks for `{}` assignment", self.manner))),
        }
    }

    /// Skills, actor and critic in one checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.skills.to_checkpoint();
        ck.set_meta("policy", self.manner);
        ck.set_meta("policy_hidden", self.ac.policy.net.sizes()[1]);
        ck.add_set(&self.ac.actor);
        ck.add_set(&self.ac.critic);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let manner: Manner = ck.require_meta("policy")?.parse()?;
        let skills = Discovery::from_checkpoint(ck)?;
        let mut agent = Self::new(
            skills,
            manner,
            hidden_of(ck)?,
            &PpoConfig::default(),
            &mut crate::rng::stream(0, "unused"),
        )?;
        restore_actor_critic(&mut agent.ac, ck)?;
        Ok(agent)
    }
}

/// Flat MAPPO over primitive actions.
#[derive(Debug, Clone)]
pub struct FlatAgent {
    pub ac: ActorCritic,
}

impl FlatAgent {
    pub fn new(hidden: usize, ppo: &PpoConfig, rng: &mut Rng) -> Self {
        Self {
            ac: actor_critic(PolicyHead::Categorical { n: N_ACTIONS }, hidden, ppo, rng),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "policy");
        ck.set_meta("policy", "flat");
        ck.set_meta("policy_hidden", self.ac.policy.net.sizes()[1]);
        ck.add_set(&self.ac.actor);
        ck.add_set(&self.ac.critic);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("policy") != Some("flat") {
            return Err(Error::Config("checkpoint does not hold a flat policy".into()));
        }
        let mut agent = Self::new(hidden_of(ck)?, &PpoConfig::default(), &mut crate::rng::stream(0, "unused"));
        restore_actor_critic(&mut agent.ac, ck)?;
        Ok(agent)
    }
}

/// Any trained downstream policy.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum PolicyAgent {
    Skills(Box<SkillAgent>),
    Flat(FlatAgent),
}

impl PolicyAgent {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta("policy") {
            Some("flat") => Ok(Self::Flat(FlatAgent::from_checkpoint(ck)?)),
            Some(_) => Ok(Self::Skills(Box::new(SkillAgent::from_checkpoint(ck)?))),
            None => Err(Error::Config("checkpoint holds no trained policy".into())),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Self::Skills(a) => a.to_checkpoint(),
            Self::Flat(a) => a.to_checkpoint(),
        }
    }
}

/// Sampling switches for a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutMode {
    /// Sample high-level embeddings (or flat actions) instead of taking the mean/mode.
    pub sample_actor: bool,
    /// Sample decoder actions instead of the argmax.
    pub sample_decoder: bool,
    pub trace: bool,
}

impl RolloutMode {
    /// Mean embeddings (or modal actions) and argmax decoder actions.
    pub const GREEDY: Self = Self {
        sample_actor: false,
        sample_decoder: false,
        trace: false,
    };
    /// Mean embeddings with seeded decoder sampling, the evaluation default.
    pub const EVAL: Self = Self {
        sample_actor: false,
        sample_decoder: true,
        trace: false,
    };
}

/// One high-level decision and the skill execution that followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillTransition {
    pub state: Vec<f64>,
    pub stacked_obs: Vec<Vec<f64>>,
    pub alive: Vec<bool>,
    /// Actor outputs before the embedding scale (the Gaussian's sample space).
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Embeddings handed to the assignment.
    pub z: Vec<Vec<f64>>,
    pub codes: Vec<CodeRef>,
    pub partition: Partition,
    /// Sum of the environment rewards over the executed steps.
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub steps: usize,
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub episode: usize,
    pub t: usize,
    pub positions: Vec<(i32, i32)>,
    pub health: Vec<u32>,
    pub enemies: Vec<(i32, i32, u32)>,
    pub actions: Vec<usize>,
    pub codes: Vec<String>,
    pub partition: String,
    pub reward: f64,
}

impl TraceStep {
    fn new(episode: usize, s: &EnvState, actions: &[Action], codes: Vec<String>, partition: String, reward: f64) -> Self {
        Self {
            episode,
            t: s.t,
            positions: s.agents.iter().map(|a| (a.x, a.y)).collect(),
            health: s.agents.iter().map(|a| a.health).collect(),
            enemies: s.enemies.iter().map(|e| (e.x, e.y, e.health)).collect(),
            actions: actions.iter().map(|a| a.index()).collect(),
            codes,
            partition,
            reward,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace steps serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillEpisode {
    pub transitions: Vec<SkillTransition>,
    pub ret: f64,
    pub won: bool,
    pub steps: usize,
    pub trace: Vec<TraceStep>,
}

fn sample_index(log_probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in log_probs.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    argmax(log_probs)
}

fn gaussian_actions(ac: &ActorCritic, x: &[f64], rows: usize, sample: bool, rng: &mut Rng) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = match ac.policy.head {
        PolicyHead::Gaussian { dim } => dim,
        PolicyHead::Categorical { .. } => return Err(Error::Structure("skill actor needs a Gaussian head".into())),
    };
    let means = ac.policy.outputs(&ac.actor, x, rows)?;
    let log_std = ac.actor.require(&ac.policy.log_std_name())?.data().to_vec();
    let mut acts = Vec::with_capacity(rows);
    let mut lps = Vec::with_capacity(rows);
    for mean in means.chunks_exact(d) {
        let a: Vec<f64> = if sample {
            mean.iter()
                .zip(&log_std)
                .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        } else {
            mean.to_vec()
        };
        lps.push(gaussian_log_prob(&a, mean, &log_std));
        acts.push(a);
    }
    Ok((acts, lps))
}

/// Plays one episode with the hierarchical agent.
///
/// Every `H` steps the actor emits an embedding per agent, the manner maps
/// them to codes, and the decoder acts for up to `H` steps; an episode that
/// ends mid-skill truncates the final transition.
pub fn run_skill_episode(cfg: &TaskConfig, episode_seed: u64, agent: &SkillAgent, mode: RolloutMode, rng: &mut Rng) -> Result<SkillEpisode> {
    run_skill_episode_numbered(cfg, episode_seed, 0, agent, mode, rng)
}

fn run_skill_episode_numbered(
    cfg: &TaskConfig,
    episode_seed: u64,
    number: usize,
    agent: &SkillAgent,
    mode: RolloutMode,
    rng: &mut Rng,
) -> Result<SkillEpisode> {
    let (mut state, mut obs) = reset(cfg, episode_seed)?;
    let model = &agent.skills.model;
    let n = cfg.n_agents;
    let h = agent.horizon();
    let mut prev = obs.clone();
    let mut transitions = Vec::new();
    let mut trace = Vec::new();
    let mut ret = 0.0;
    let mut fallbacks = 0;
    while !state.is_terminal(cfg) {
        let stacked = stack_observations(&obs, &prev);
        let (actions, log_probs) = gaussian_actions(&agent.ac, &stacked.concat(), n, mode.sample_actor, rng)?;
        let z: Vec<Vec<f64>> = actions.iter().map(|a| agent.scale.apply(a)).collect();
        let state_vec = state.state_vector(cfg);
        let ctx = GroupingContext {
            state: state_vec.clone(),
            obs: obs.clone(),
        };
        let assignment = agent.assign(&z, &ctx)?;
        fallbacks += assignment.fallbacks;
        let alive: Vec<bool> = state.agents.iter().map(|a| a.alive()).collect();
        let code_labels: Vec<String> = assignment.codes.iter().map(ToString::to_string).collect();
        let partition_label = assignment.partition.to_string();
        let mut reward = 0.0;
        let mut steps = 0;
        while steps < h && !state.is_terminal(cfg) {
            let live: Vec<usize> = (0..n).filter(|&i| state.agents[i].alive()).collect();
            let mut x = Vec::with_capacity(live.len() * model.decoder.input_dim());
            for &i in &live {
                x.extend_from_slice(&obs[i]);
                x.extend_from_slice(&assignment.cond[i]);
            }
            let mut lp = model.decoder.infer(&model.dec, &x, live.len())?;
            log_softmax_rows(&mut lp, N_ACTIONS);
            let mut acts = vec![Action::Stay; n];
            for (row, &i) in lp.chunks_exact(N_ACTIONS).zip(&live) {
                let a = if mode.sample_decoder { sample_index(row, rng) } else { argmax(row) };
                acts[i] = Action::from_index(a)?;
            }
            let out = step(cfg, &state, &acts)?;
            if mode.trace {
                trace.push(TraceStep::new(
                    number,
                    &state,
                    &acts,
                    code_labels.clone(),
                    partition_label.clone(),
                    out.reward,
                ));
            }
            reward += out.reward;
            steps += 1;
            prev = std::mem::replace(&mut obs, out.observations);
            state = out.state;
        }
        ret += reward;
        transitions.push(SkillTransition {
            state: state_vec,
            stacked_obs: stacked,
            alive,
            actions,
            log_probs,
            z,
            codes: assignment.codes,
            partition: assignment.partition,
            reward,
            next_state: state.state_vector(cfg),
            done: state.is_terminal(cfg),
            steps,
        });
    }
    if fallbacks > 0 && mode.trace {
        eprintln!("warning: {fallbacks} subgroups had no codebook of their size and were split into single-agent codes");
    }
    Ok(SkillEpisode {
        transitions,
        ret,
        won: state.won(),
        steps: state.t,
        trace,
    })
}

/// One flat-policy step: per-agent inputs, actions and log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatStep {
    pub state: Vec<f64>,
    pub stacked_obs: Vec<Vec<f64>>,
    pub alive: Vec<bool>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatEpisode {
    pub steps: Vec<FlatStep>,
    pub ret: f64,
    pub won: bool,
    pub trace: Vec<TraceStep>,
}

pub fn run_flat_episode(cfg: &TaskConfig, episode_seed: u64, agent: &FlatAgent, mode: RolloutMode, rng: &mut Rng) -> Result<FlatEpisode> {
    run_flat_episode_numbered(cfg, episode_seed, 0, agent, mode, rng)
}

fn run_flat_episode_numbered(
    cfg: &TaskConfig,
    episode_seed: u64,
    number: usize,
    agent: &FlatAgent,
    mode: RolloutMode,
    rng: &mut Rng,
) -> Result<FlatEpisode> {
    let (mut state, mut obs) = reset(cfg, episode_seed)?;
    let n = cfg.n_agents;
    let mut prev = obs.clone();
    let mut steps = Vec::new();
    let mut trace = Vec::new();
    let mut ret = 0.0;
    while !state.is_terminal(cfg) {
        let stacked = stack_observations(&obs, &prev);
        let mut lp = agent.ac.policy.outputs(&agent.ac.actor, &stacked.concat(), n)?;
        log_softmax_rows(&mut lp, N_ACTIONS);
        let alive: Vec<bool> = state.agents.iter().map(|a| a.alive()).collect();
        let mut actions = vec![0; n];
        let mut log_probs = vec![0.0; n];
        for (i, row) in lp.chunks_exact(N_ACTIONS).enumerate() {
            if alive[i] {
                actions[i] = if mode.sample_actor { sample_index(row, rng) } else { argmax(row) };
                log_probs[i] = row[actions[i]];
            }
        }
        let acts: Vec<Action> = actions.iter().map(|&a| Action::from_index(a)).collect::<Result<_>>()?;
        let out = step(cfg, &state, &acts)?;
        if mode.trace {
            trace.push(TraceStep::new(number, &state, &acts, Vec::new(), String::new(), out.reward));
        }
        ret += out.reward;
        steps.push(FlatStep {
            state: state.state_vector(cfg),
            stacked_obs: stacked,
            alive,
            actions,
            log_probs,
            reward: out.reward,
            done: out.done,
        });
        prev = std::mem::replace(&mut obs, out.observations);
        state = out.state;
    }
    Ok(FlatEpisode {
        steps,
        ret,
        won: state.won(),
        trace,
    })
}

/// Outcome of a batch of evaluation episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalResult {
    pub episodes: usize,
    pub wins: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    pub trace: Vec<TraceStep>,
}

impl EvalResult {
    pub fn win_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.wins as f64 / self.episodes as f64
        }
    }

    /// 95% Wilson score interval for the win rate.
    pub fn win_interval(&self) -> (f64, f64) {
        wilson_interval(self.wins, self.episodes)
    }

    fn push(&mut self, won: bool, ret: f64, len: usize) {
        let k = self.episodes as f64;
        self.mean_return = (self.mean_return * k + ret) / (k + 1.0);
        self.mean_length = (self.mean_length * k + len as f64) / (k + 1.0);
        self.episodes += 1;
        self.wins += usize::from(won);
    }
}

pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Seed of evaluation episode `i` under root `seed`.
pub fn eval_episode_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &format!("eval/{i}"))
}

/// Evaluation of a skill agent with mean embeddings over `episodes` fixed episode seeds.
pub fn evaluate_skills(cfg: &TaskConfig, agent: &SkillAgent, episodes: usize, seed: u64, mode: RolloutMode) -> Result<EvalResult> {
    let mode = RolloutMode { sample_actor: false, ..mode };
    let mut rng = crate::rng::stream(seed, "eval-sampling");
    let mut res = EvalResult::default();
    for i in 0..episodes {
        let ep = run_skill_episode_numbered(cfg, eval_episode_seed(seed, i), i, agent, mode, &mut rng)?;
        res.push(ep.won, ep.ret, ep.steps);
        res.trace.extend(ep.trace);
    }
    Ok(res)
}

pub fn evaluate_flat(cfg: &TaskConfig, agent: &FlatAgent, episodes: usize, seed: u64, mode: RolloutMode) -> Result<EvalResult> {
    let mode = RolloutMode { sample_actor: false, ..mode };
    let mut rng = crate::rng::stream(seed, "eval-sampling");
    let mut res = EvalResult::default();
    for i in 0..episodes {
        let ep = run_flat_episode_numbered(cfg, eval_episode_seed(seed, i), i, agent, mode, &mut rng)?;
        res.push(ep.won, ep.ret, ep.steps.len());
        res.trace.extend(ep.trace);
    }
    Ok(res)
}

/// Evaluation with the actor's mean (flat: modal) action; `mode` sets
/// decoder sampling and tracing.
pub fn evaluate(cfg: &TaskConfig, agent: &PolicyAgent, episodes: usize, seed: u64, mode: RolloutMode) -> Result<EvalResult> {
    match agent {
        PolicyAgent::Skills(a) => evaluate_skills(cfg, a, episodes, seed, mode),
        PolicyAgent::Flat(a) => evaluate_flat(cfg, a, episodes, seed, mode),
    }
}

/// Greedy evaluation of the scripted expert (with `epsilon`-random actions).
pub fn evaluate_expert(cfg: &TaskConfig, epsilon: f64, episodes: usize, seed: u64, trace: bool) -> Result<EvalResult> {
    let mut expert = crate::env::ScriptedExpert::new(epsilon, crate::rng::stream(seed, "expert"));
    let mut res = EvalResult::default();
    for i in 0..episodes {
        let (mut state, _) = reset(cfg, eval_episode_seed(seed, i))?;
        let mut ret = 0.0;
        while !state.is_terminal(cfg) {
            let acts = expert.act(cfg, &state);
            let out = step(cfg, &state, &acts)?;
            if trace {
                res.trace.push(TraceStep::new(i, &state, &acts, Vec::new(), String::new(), out.reward));
            }
            ret += out.reward;
            state = out.state;
        }
        res.push(state.won(), ret, state.t);
    }
    Ok(res)
}

/// Serialized frozen skill tensors, compared byte-for-byte by the freeze contract.
pub fn skill_fingerprint(skills: &Discovery) -> String {
    skills.to_checkpoint().to_text()
}

/// True when `method` can serve `manner`.
pub fn compatible(method: Method, manner: Manner) -> bool {
    matches!(
        (method, manner),
        (Method::ThreeD, Manner::ThreeD | Manner::Mixed | Manner::Rule) | (Method::Hier, Manner::Hier) | (Method::Single, Manner::Mixed)
    )
}

#[cfg(test)]
mod tests;
