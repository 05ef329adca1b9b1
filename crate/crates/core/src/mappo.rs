//! PPO with a centralized critic, shared by the grouper and the downstream
//! skill learner.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, log_softmax_rows, AdamState, Bound, Mlp, ParameterSet, Tape, Var};
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
pub const LOG_STD_INIT: f64 = -std::f64::consts::LN_2;
pub const LOG_STD_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
pub const LOG_STD_MAX: f64 = std::f64::consts::LN_2;
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub normalize_advantages: bool,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr_actor: 5e-4,
            lr_critic: 1e-3,
            normalize_advantages: true,
            max_grad_norm: 10.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.gamma,
            self.lambda,
            self.clip,
            self.entropy_coef,
            self.value_coef,
            self.lr_actor,
            self.lr_critic,
            self.max_grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.clip <= 0.0 || !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("invalid PPO configuration {self:?}")));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::Config("PPO epochs and minibatch must be positive".into()));
        }
        Ok(())
    }
}

/// Generalized advantage estimates and returns.
///
/// `bootstrap` is the value of the state following the last transition
/// (ignored when that transition is terminal).
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::Structure(format!(
            "gae: {} rewards, {} values, {} done flags",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Welford running mean / variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningStats {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn update(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt().max(1e-8)
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHead {
    /// Logits over `n` discrete choices.
    Categorical { n: usize },
    /// Diagonal Gaussian with a state-independent learned log-std.
    Gaussian { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionValue {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Actor network plus its output distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    pub head: PolicyHead,
    prefix: String,
}

impl Policy {
    pub fn new(prefix: &str, input: usize, hidden: usize, head: PolicyHead) -> Self {
        let out = match head {
            PolicyHead::Categorical { n } => n,
            PolicyHead::Gaussian { dim } => dim,
        };
        Self {
            net: Mlp::new(prefix, &[input, hidden, hidden, out], crate::nn::Activation::Tanh, true),
            head,
            prefix: prefix.to_string(),
        }
    }

    pub fn log_std_name(&self) -> String {
        format!("{}/log_std", self.prefix)
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut Rng) {
        self.net.init(params, rng);
        self.net.scale_output(params, 0.1);
        if let PolicyHead::Gaussian { dim } = self.head {
            params.insert(
                &self.log_std_name(),
                crate::nn::Tensor::new(vec![1, dim], vec![LOG_STD_INIT; dim]).unwrap(),
            );
        }
    }

    /// Raw network outputs (logits or means) for `rows` stacked inputs.
    pub fn outputs(&self, params: &ParameterSet, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.net.infer(params, x, rows)
    }

    /// Samples (or, when `rng` is `None`, picks the mode of) an action and
    /// returns it with its log-probability.
    pub fn act(&self, params: &ParameterSet, x: &[f64], mask: Option<&[bool]>, rng: Option<&mut Rng>) -> Result<(ActionValue, f64)> {
        let out = self.outputs(params, x, 1)?;
        match self.head {
            PolicyHead::Categorical { n } => {
                let mut lp = masked(&out, mask);
                log_softmax_rows(&mut lp, n);
                let a = match rng {
                    Some(rng) => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = argmax(&lp);
                        for (i, l) in lp.iter().enumerate() {
                            acc += l.exp();
                            if u < acc {
                                pick = i;
                                break;
                            }
                        }
                        pick
                    }
                    None => argmax(&lp),
                };
                Ok((ActionValue::Discrete(a), lp[a]))
            }
            PolicyHead::Gaussian { dim } => {
                let log_std = params.require(&self.log_std_name())?.data().to_vec();
                let z: Vec<f64> = match rng {
                    Some(rng) => (0..dim)
                        .map(|j| {
                            let e: f64 = StandardNormal.sample(rng);
                            out[j] + log_std[j].exp() * e
                        })
                        .collect(),
                    None => out.clone(),
                };
                let lp = gaussian_log_prob(&z, &out, &log_std);
                Ok((ActionValue::Continuous(z), lp))
            }
        }
    }

    pub fn log_prob(&self, params: &ParameterSet, x: &[f64], mask: Option<&[bool]>, action: &ActionValue) -> Result<f64> {
        let out = self.outputs(params, x, 1)?;
        match (&self.head, action) {
            (PolicyHead::Categorical { n }, ActionValue::Discrete(a)) => {
                let mut lp = masked(&out, mask);
                log_softmax_rows(&mut lp, *n);
                Ok(lp[*a])
            }
            (PolicyHead::Gaussian { .. }, ActionValue::Continuous(z)) => {
                let log_std = params.require(&self.log_std_name())?.data();
                Ok(gaussian_log_prob(z, &out, log_std))
            }
            _ => Err(Error::Structure("action kind does not match the policy head".into())),
        }
    }
}

fn masked(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    match mask {
        Some(m) => logits.iter().zip(m).map(|(l, ok)| if *ok { *l } else { MASKED_LOGIT }).collect(),
        None => logits.to_vec(),
    }
}

/// First index of the maximum (ties go to the lowest index).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn gaussian_log_prob(z: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    z.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((z, m), ls)| {
            let d = (z - m) / ls.exp();
            -0.5 * d * d - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// One actor decision for the PPO update.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub input: Vec<f64>,
    pub action: ActionValue,
    pub mask: Option<Vec<bool>>,
    pub old_log_prob: f64,
    pub advantage: f64,
}

/// One critic regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample {
    pub input: Vec<f64>,
    pub target: f64,
}

/// Aligned on-policy transitions of one rollout batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub policy: Vec<PolicySample>,
    pub value: Vec<ValueSample>,
}

impl RolloutBuffer {
    pub fn is_empty(&self) -> bool {
        self.policy.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub explained_variance: f64,
    pub aborted: bool,
}

/// Trainable actor/critic pair with their optimizers.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub policy: Policy,
    pub actor: ParameterSet,
    pub actor_opt: AdamState,
    pub critic_net: Mlp,
    pub critic: ParameterSet,
    pub critic_opt: AdamState,
}

impl ActorCritic {
    pub fn value(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.critic_net.infer(&self.critic, x, rows)
    }
}

/// Tape graph of the clipped surrogate plus entropy bonus for `samples`.
/// Returns `(loss, log_probs, entropy_mean)`.
pub fn policy_loss_graph(
    tape: &mut Tape,
    bound: &Bound,
    policy: &Policy,
    samples: &[&PolicySample],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> (Var, Var, Var) {
    let rows = samples.len();
    let width = policy.net.input_dim();
    let x: Vec<f64> = samples.iter().flat_map(|s| s.input.iter().copied()).collect();
    let xv = tape.matrix(rows, width, x);
    let out = policy.net.forward(tape, bound, xv);
    let (logp, entropy) = match policy.head {
        PolicyHead::Categorical { n } => {
            let mask: Vec<f64> = samples
                .iter()
                .flat_map(|s| match &s.mask {
                    Some(m) => m.iter().map(|ok| if *ok { 0.0 } else { MASKED_LOGIT }).collect::<Vec<_>>(),
                    None => vec![0.0; n],
                })
                .collect();
            let logits = tape.add_const(out, &mask);
            let lp = tape.log_softmax(logits);
            let p = tape.softmax(logits);
            let actions: Vec<usize> = samples
                .iter()
                .map(|s| match s.action {
                    ActionValue::Discrete(a) => a,
                    ActionValue::Continuous(_) => 0,
                })
                .collect();
            let logp = tape.pick(lp, &actions);
            let plp = tape.mul(p, lp);
            let neg_ent = tape.row_sum(plp);
            let ent = tape.scale(neg_ent, -1.0);
            (logp, ent)
        }
        PolicyHead::Gaussian { dim } => {
            let ls = bound[&policy.log_std_name()];
            let ls_rep = tape.gather_rows(ls, &vec![0; rows]);
            let z: Vec<f64> = samples
                .iter()
                .flat_map(|s| match &s.action {
                    ActionValue::Continuous(z) => z.clone(),
                    ActionValue::Discrete(_) => vec![0.0; dim],
                })
                .collect();
            let zv = tape.matrix(rows, dim, z);
            let diff = tape.sub(zv, out);
            let sq = tape.mul(diff, diff);
            let neg2 = tape.scale(ls_rep, -2.0);
            let inv_var = tape.exp(neg2);
            let quad = tape.mul(sq, inv_var);
            let half = tape.scale(quad, -0.5);
            let per = tape.sub(half, ls_rep);
            let summed = tape.row_sum(per);
            let logp = tape.add_const(summed, &vec![-0.5 * LN_2PI * dim as f64; rows]);
            let ent_rows = tape.row_sum(ls_rep);
            let ent = tape.add_const(ent_rows, &vec![0.5 * (LN_2PI + 1.0) * dim as f64; rows]);
            (logp, ent)
        }
    };
    let old: Vec<f64> = samples.iter().map(|s| -s.old_log_prob).collect();
    let log_ratio = tape.add_const(logp, &old);
    let ratio = tape.exp(log_ratio);
    let adv = tape.matrix(rows, 1, advantages.to_vec());
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let surr2 = tape.mul(clipped, adv);
    let surr = tape.min(surr1, surr2);
    let surr_mean = tape.mean(surr);
    let ent_mean = tape.mean(entropy);
    let neg_surr = tape.scale(surr_mean, -1.0);
    let ent_term = tape.scale(ent_mean, -entropy_coef);
    let loss = tape.add(neg_surr, ent_term);
    (loss, logp, ent_mean)
}

/// `config.epochs` passes of clipped-surrogate / value-regression updates.
pub fn ppo_update(ac: &mut ActorCritic, buffer: &RolloutBuffer, config: &PpoConfig, rng: &mut Rng) -> Result<PpoDiagnostics> {
    config.validate()?;
    if buffer.policy.is_empty() {
        return Err(Error::Structure("ppo_update on an empty buffer".into()));
    }
    let mut diag = PpoDiagnostics::default();

    let values_before = if buffer.value.is_empty() {
        vec![]
    } else {
        let x: Vec<f64> = buffer.value.iter().flat_map(|s| s.input.iter().copied()).collect();
        ac.value(&x, buffer.value.len())?
    };
    let targets: Vec<f64> = buffer.value.iter().map(|s| s.target).collect();
    diag.explained_variance = explained_variance(&values_before, &targets);

    let mut advantages: Vec<f64> = buffer.policy.iter().map(|s| s.advantage).collect();
    if config.normalize_advantages {
        normalize(&mut advantages);
    }

    let n_mb = buffer.policy.len().div_ceil(config.minibatch).max(1);
    let mut p_idx: Vec<usize> = (0..buffer.policy.len()).collect();
    let mut v_idx: Vec<usize> = (0..buffer.value.len()).collect();
    let (mut n_updates, mut clip_hits, mut kl_sum, mut kl_count) = (0usize, 0usize, 0.0, 0usize);
    for _ in 0..config.epochs {
        p_idx.shuffle(rng);
        v_idx.shuffle(rng);
        let p_size = p_idx.len().div_ceil(n_mb);
        let v_size = v_idx.len().div_ceil(n_mb).max(1);
        for (k, chunk) in p_idx.chunks(p_size).enumerate() {
            let samples: Vec<&PolicySample> = chunk.iter().map(|&i| &buffer.policy[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let mut tape = Tape::new();
            let bound = tape.bind(&ac.actor);
            let (loss, logp, ent) = policy_loss_graph(&mut tape, &bound, &ac.policy, &samples, &adv, config.clip, config.entropy_coef);
            if tape.check().is_err() || !tape.scalar(loss).is_finite() {
                diag.aborted = true;
                return Ok(diag);
            }
            for (s, lp) in samples.iter().zip(tape.value(logp)) {
                let log_ratio = lp - s.old_log_prob;
                if (log_ratio.exp() - 1.0).abs() > config.clip {
                    clip_hits += 1;
                }
                kl_sum += log_ratio.exp() - 1.0 - log_ratio;
                kl_count += 1;
            }
            diag.policy_loss = tape.scalar(loss);
            diag.entropy = tape.scalar(ent);
            let mut grads = tape.backward(loss)?.for_set(&ac.actor);
            clip_global_norm(&mut grads, config.max_grad_norm);
            if ac.actor_opt.apply(&mut ac.actor, &grads).is_err() {
                diag.aborted = true;
                return Ok(diag);
            }
            let ls_name = ac.policy.log_std_name();
            if let Some(ls) = ac.actor.get_mut(&ls_name) {
                ls.data_mut().iter_mut().for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
            }

            let vchunk: Vec<usize> = v_idx.chunks(v_size).nth(k).map(<[usize]>::to_vec).unwrap_or_default();
            if !vchunk.is_empty() {
                let mut tape = Tape::new();
                let bound = tape.bind(&ac.critic);
                let width = ac.critic_net.input_dim();
                let x: Vec<f64> = vchunk.iter().flat_map(|&i| buffer.value[i].input.iter().copied()).collect();
                let xv = tape.matrix(vchunk.len(), width, x);
                let v = ac.critic_net.forward(&mut tape, &bound, xv);
                let t: Vec<f64> = vchunk.iter().map(|&i| -buffer.value[i].target).collect();
                let err = tape.add_const(v, &t);
                let sq = tape.mul(err, err);
                let mse = tape.mean(sq);
                let loss = tape.scale(mse, config.value_coef);
                if tape.check().is_err() || !tape.scalar(loss).is_finite() {
                    diag.aborted = true;
                    return Ok(diag);
                }
                diag.value_loss = tape.scalar(mse);
                let mut grads = tape.backward(loss)?.for_set(&ac.critic);
                clip_global_norm(&mut grads, config.max_grad_norm);
                if ac.critic_opt.apply(&mut ac.critic, &grads).is_err() {
                    diag.aborted = true;
                    return Ok(diag);
                }
            }
            n_updates += 1;
        }
    }
    let _ = n_updates;
    diag.clip_fraction = clip_hits as f64 / kl_count.max(1) as f64;
    diag.approx_kl = kl_sum / kl_count.max(1) as f64;
    Ok(diag)
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in v.iter_mut() {
        *x = if std > 1e-8 { (*x - mean) / std } else { 0.0 };
    }
}

pub fn explained_variance(pred: &[f64], target: &[f64]) -> f64 {
    if pred.len() != target.len() || target.len() < 2 {
        return 0.0;
    }
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let var = target.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    if var < 1e-12 {
        return 0.0;
    }
    let resid: Vec<f64> = target.iter().zip(pred).map(|(t, p)| t - p).collect();
    let rmean = resid.iter().sum::<f64>() / n;
    let rvar = resid.iter().map(|r| (r - rmean).powi(2)).sum::<f64>() / n;
    1.0 - rvar / var
}
