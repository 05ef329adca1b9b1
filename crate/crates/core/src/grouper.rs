//! The dynamic grouping function: autoregressive per-agent group choices,
//! partitions, and PPO training against the negative discovery loss.

use std::fmt;
use std::str::FromStr;

use crate::env::{N_MAX, OBS_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::mappo::{
    gae, ppo_update, ActionValue, ActorCritic, Policy, PolicyHead, PolicySample, PpoConfig, PpoDiagnostics, RolloutBuffer, RunningStats, ValueSample,
};
use crate::nn::{Activation, AdamState, Checkpoint, Mlp, ParameterSet, Role};
use crate::rng::Rng;

pub const GROUPER_HIDDEN: usize = 64;
const ACTOR_PREFIX: &str = "grouper/actor";
const CRITIC_PREFIX: &str = "grouper/critic";

/// Disjoint cover of `0..n` by ascending subgroups, ordered by smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition {
    subgroups: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates and normalizes (sorts members and subgroups).
    pub fn new(mut subgroups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for g in subgroups.iter_mut() {
            if g.is_empty() {
                return Err(Error::Validation("empty subgroup".into()));
            }
            g.sort_unstable();
            for &i in g.iter() {
                if i >= n || seen[i] {
                    return Err(Error::Validation(format!("agent {i} out of range or repeated (n = {n})")));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("agent {missing} is not covered")));
        }
        subgroups.sort_by_key(|g| g[0]);
        Ok(Self { subgroups })
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            subgroups: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn whole(n: usize) -> Self {
        Self {
            subgroups: vec![(0..n).collect()],
        }
    }

    pub fn subgroups(&self) -> &[Vec<usize>] {
        &self.subgroups
    }

    pub fn n_agents(&self) -> usize {
        self.subgroups.iter().map(Vec::len).sum()
    }

    /// Subgroup index of every agent.
    pub fn membership(&self) -> Vec<usize> {
        let mut m = vec![0; self.n_agents()];
        for (l, g) in self.subgroups.iter().enumerate() {
            for &i in g {
                m[i] = l;
            }
        }
        m
    }

    /// Splits every subgroup whose size is not in `allowed` into singletons.
    pub fn restricted_to(&self, allowed: &[usize]) -> Self {
        let mut subgroups = Vec::new();
        for g in &self.subgroups {
            if allowed.contains(&g.len()) {
                subgroups.push(g.clone());
            } else {
                subgroups.extend(g.iter().map(|&i| vec![i]));
            }
        }
        subgroups.sort_by_key(|g| g[0]);
        Self { subgroups }
    }

    pub fn check_size(&self, n: usize) -> Result<()> {
        if self.n_agents() != n {
            return Err(Error::Structure(format!("partition covers {} agents, batch has {n}", self.n_agents())));
        }
        Ok(())
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .subgroups
            .iter()
            .map(|g| format!("{{{}}}", g.iter().map(usize::to_string).collect::<Vec<_>>().join(",")))
            .collect();
        write!(f, "{}", parts.join(""))
    }
}

/// Merges agents with equal group ids. Ids are zero-based and must be `< n`.
pub fn partition_of(g: &[usize]) -> Result<Partition> {
    let n = g.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &id) in g.iter().enumerate() {
        if id >= n {
            return Err(Error::Validation(format!("group id {id} of agent {i} outside 0..{n}")));
        }
        groups[id].push(i);
    }
    Partition::new(groups.into_iter().filter(|x| !x.is_empty()).collect(), n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrouperInput {
    State,
    Obs,
}

impl GrouperInput {
    pub fn context_dim(self) -> usize {
        match self {
            GrouperInput::State => STATE_DIM,
            GrouperInput::Obs => OBS_DIM,
        }
    }
}

impl FromStr for GrouperInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(Self::State),
            "obs" => Ok(Self::Obs),
            _ => Err(Error::Config(format!("grouper input must be `state` or `obs`, got `{s}`"))),
        }
    }
}

impl fmt::Display for GrouperInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GrouperInput::State => "state",
            GrouperInput::Obs => "obs",
        })
    }
}

/// What the grouper sees for one grouping decision sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingContext {
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
}

impl GroupingContext {
    pub fn n_agents(&self) -> usize {
        self.obs.len()
    }

    pub fn from_batch(batch: &crate::dataset::SegmentBatch) -> Self {
        Self {
            state: batch.start_state.clone(),
            obs: (0..batch.n_agents()).map(|i| batch.start_obs(i).to_vec()).collect(),
        }
    }
}

/// One sequential decision of a grouping episode.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingStep {
    pub actor_input: Vec<f64>,
    pub critic_input: Vec<f64>,
    pub mask: Vec<bool>,
    pub group: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingRollout {
    pub groups: Vec<usize>,
    pub steps: Vec<GroupingStep>,
}

impl GroupingRollout {
    pub fn partition(&self) -> Partition {
        partition_of(&self.groups).expect("grouper emits ids below n")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrouperPhaseReport {
    pub mean_loss: f64,
    pub skipped: usize,
    pub diagnostics: PpoDiagnostics,
}

/// Grouping policy `h_psi` and its centralized critic.
#[derive(Debug, Clone)]
pub struct Grouper {
    pub input: GrouperInput,
    /// Largest subgroup the policy may form.
    pub max_size: usize,
    pub ac: ActorCritic,
    pub stats: RunningStats,
}

fn history_dim() -> usize {
    (N_MAX - 1) * N_MAX
}

impl Grouper {
    pub fn new(input: GrouperInput, max_size: usize, lr: f64, rng: &mut Rng) -> Self {
        let actor_in = input.context_dim() + history_dim() + N_MAX;
        let critic_in = STATE_DIM + history_dim() + N_MAX;
        let policy = Policy::new(ACTOR_PREFIX, actor_in, GROUPER_HIDDEN, PolicyHead::Categorical { n: N_MAX });
        let critic_net = Mlp::new(CRITIC_PREFIX, &[critic_in, GROUPER_HIDDEN, GROUPER_HIDDEN, 1], Activation::Tanh, true);
        let mut actor = ParameterSet::new(Role::Grouper);
        let mut critic = ParameterSet::new(Role::GrouperCritic);
        policy.init(&mut actor, rng);
        critic_net.init(&mut critic, rng);
        Self {
            input,
            max_size: max_size.clamp(1, N_MAX),
            ac: ActorCritic {
                policy,
                actor,
                actor_opt: AdamState::new(lr),
                critic_net,
                critic,
                critic_opt: AdamState::new(lr),
            },
            stats: RunningStats::default(),
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.add_set(&self.ac.actor);
        ckpt.add_set(&self.ac.critic);
        ckpt.set_meta("grouper_input", self.input);
        ckpt.set_meta("grouper_max_size", self.max_size);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let input: GrouperInput = ckpt.require_meta("grouper_input")?.parse()?;
        let max_size = ckpt
            .require_meta("grouper_max_size")?
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("grouper_max_size: {e}")))?;
        let mut g = Grouper::new(input, max_size, 0.0, &mut crate::rng::stream(0, "unused"));
        let actor = ckpt
            .extract(ACTOR_PREFIX, Role::Grouper)
            .map_err(|_| Error::MissingTensors(format!("{ACTOR_PREFIX}/*")))?;
        let critic = ckpt
            .extract(CRITIC_PREFIX, Role::GrouperCritic)
            .map_err(|_| Error::MissingTensors(format!("{CRITIC_PREFIX}/*")))?;
        for (name, t) in g.ac.actor.iter() {
            if actor.get(name).map(|x| x.shape()) != Some(t.shape()) {
                return Err(Error::MissingTensors(name.clone()));
            }
        }
        g.ac.actor = actor;
        g.ac.critic = critic;
        Ok(g)
    }

    fn context<'a>(&self, ctx: &'a GroupingContext, i: usize) -> Result<&'a [f64]> {
        let c: &[f64] = match self.input {
            GrouperInput::State => &ctx.state,
            GrouperInput::Obs => &ctx.obs[i],
        };
        if c.len() != self.input.context_dim() {
            return Err(Error::Structure(format!(
                "grouper context has width {}, expected {} for {} input",
                c.len(),
                self.input.context_dim(),
                self.input
            )));
        }
        Ok(c)
    }

    /// Chooses group ids for agents `0..n` in order; samples when `rng` is
    /// given, otherwise takes the argmax (ties to the lowest id).
    pub fn choose_groups(&self, ctx: &GroupingContext, mut rng: Option<&mut Rng>) -> Result<GroupingRollout> {
        let n = ctx.n_agents();
        if n == 0 || n > N_MAX {
            return Err(Error::Structure(format!("cannot group {n} agents")));
        }
        if ctx.state.len() != STATE_DIM {
            return Err(Error::Structure(format!("state width {} != {STATE_DIM}", ctx.state.len())));
        }
        let mut groups = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        let mut counts = [0usize; N_MAX];
        for i in 0..n {
            let mut tail = vec![0.0; history_dim() + N_MAX];
            for (j, &g) in groups.iter().enumerate() {
                tail[j * N_MAX + g] = 1.0;
            }
            tail[history_dim() + i] = 1.0;
            let mut actor_input = self.context(ctx, i)?.to_vec();
            actor_input.extend_from_slice(&tail);
            let mut critic_input = ctx.state.clone();
            critic_input.extend_from_slice(&tail);
            let mask: Vec<bool> = (0..N_MAX).map(|g| g < n && counts[g] < self.max_size).collect();
            let (a, log_prob) = self.ac.policy.act(&self.ac.actor, &actor_input, Some(&mask), rng.as_deref_mut())?;
            let ActionValue::Discrete(group) = a else {
                unreachable!("categorical head")
            };
            counts[group] += 1;
            groups.push(group);
            steps.push(GroupingStep {
                actor_input,
                critic_input,
                mask,
                group,
                log_prob,
            });
        }
        Ok(GroupingRollout { groups, steps })
    }

    pub fn greedy_partition(&self, ctx: &GroupingContext) -> Result<Partition> {
        Ok(self.choose_groups(ctx, None)?.partition())
    }

    /// One PPO phase: a sampled grouping episode per context, terminal
    /// reward `-loss(index, partition)`, GAE with `gamma = 1`.
    pub fn ppo_phase<F>(&mut self, contexts: &[GroupingContext], mut loss: F, config: &PpoConfig, rng: &mut Rng) -> Result<GrouperPhaseReport>
    where
        F: FnMut(usize, &Partition) -> Result<f64>,
    {
        let mut episodes = Vec::new();
        let mut report = GrouperPhaseReport::default();
        for (k, ctx) in contexts.iter().enumerate() {
            let rollout = self.choose_groups(ctx, Some(rng))?;
            let l = loss(k, &rollout.partition())?;
            if !l.is_finite() {
                report.skipped += 1;
                continue;
            }
            self.stats.update(-l);
            report.mean_loss += l;
            episodes.push((rollout, -l));
        }
        if episodes.is_empty() {
            return Ok(report);
        }
        report.mean_loss /= episodes.len() as f64;
        let mut buffer = RolloutBuffer::default();
        for (rollout, reward) in episodes {
            let n = rollout.steps.len();
            let x: Vec<f64> = rollout.steps.iter().flat_map(|s| s.critic_input.iter().copied()).collect();
            let values = self.ac.value(&x, n)?;
            let mut rewards = vec![0.0; n];
            rewards[n - 1] = self.stats.normalize(reward);
            let mut dones = vec![false; n];
            dones[n - 1] = true;
            let (adv, ret) = gae(&rewards, &values, &dones, 0.0, 1.0, config.lambda)?;
            for ((s, a), r) in rollout.steps.into_iter().zip(adv).zip(ret) {
                buffer.value.push(ValueSample {
                    input: s.critic_input,
                    target: r,
                });
                buffer.policy.push(PolicySample {
                    input: s.actor_input,
                    action: ActionValue::Discrete(s.group),
                    mask: Some(s.mask),
                    old_log_prob: s.log_prob,
                    advantage: a,
                });
            }
        }
        let cfg = PpoConfig {
            gamma: 1.0,
            ..config.clone()
        };
        report.diagnostics = ppo_update(&mut self.ac, &buffer, &cfg, rng)?;
        Ok(report)
    }
}

/// Grouper PPO defaults: entropy 0.01, clip 0.2, 4 epochs, `gamma = 1`.
pub fn grouper_ppo_config() -> PpoConfig {
    PpoConfig {
        gamma: 1.0,
        lambda: 0.95,
        clip: 0.2,
        epochs: 4,
        minibatch: 512,
        entropy_coef: 0.01,
        value_coef: 0.5,
        lr_actor: 1e-3,
        lr_critic: 1e-3,
        normalize_advantages: true,
        max_grad_norm: 10.0,
    }
}
