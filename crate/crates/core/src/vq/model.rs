use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::aggregator::Aggregator;
use super::codebook::{nearest, table_name_3d, Codebook3D, HierCodebooks, UsageTracker, BTM_NAME, TOP_NAME};
use crate::dataset::{SegmentBatch, SkillSegment};
use crate::env::{N_ACTIONS, N_MAX};
use crate::error::{Error, Result};
use crate::grouper::{Grouper, GrouperInput, Partition};
use crate::nn::{log_softmax_rows, Activation, Bound, Checkpoint, Mlp, ParameterSet, Role, Tape, Var};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ThreeD,
    Hier,
    /// Hierarchical scheme without the top codebook and aggregator.
    Single,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(Self::ThreeD),
            "hier" => Ok(Self::Hier),
            "single" => Ok(Self::Single),
            _ => Err(Error::Config(format!("method must be 3d, hier or single, got `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ThreeD => "3d",
            Method::Hier => "hier",
            Method::Single => "single",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryConfig {
    pub method: Method,
    pub horizon: usize,
    pub d: usize,
    pub k: usize,
    pub d_top: usize,
    pub k_top: usize,
    pub heads: usize,
    pub attn_width: usize,
    pub beta: f64,
    /// Subgroup sizes with a 3D codebook; the largest also caps grouping.
    pub sizes: Vec<usize>,
    pub hidden: usize,
    pub lr: f64,
    /// Learning rate of the codebook tables.
    pub codebook_lr: f64,
    pub epochs: usize,
    /// Segment batches per autoencoder step.
    pub minibatch: usize,
    /// Autoencoder steps per grouper phase.
    pub interleave: usize,
    /// Segment batches rolled out per grouper phase.
    pub grouper_batch: usize,
    pub grouper_input: GrouperInput,
    pub grouper_lr: f64,
    /// Usage floor, as a fraction of uniform, below which a code is re-seeded.
    pub dead_fraction: f64,
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            method: Method::ThreeD,
            horizon: 5,
            d: 8,
            k: 8,
            d_top: 8,
            k_top: 8,
            heads: 2,
            attn_width: 8,
            beta: 0.25,
            sizes: vec![1, 2, 3, 4, 5],
            hidden: 64,
            lr: 1e-3,
            codebook_lr: 1e-2,
            epochs: 200,
            minibatch: 32,
            interleave: 10,
            grouper_batch: 32,
            grouper_input: GrouperInput::State,
            grouper_lr: 1e-3,
            dead_fraction: 0.01,
            seed: 0,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.d == 0 || self.k == 0 || self.d_top == 0 || self.k_top == 0 || self.hidden == 0 {
            return bad("widths and codebook sizes must be positive");
        }
        if self.horizon == 0 || self.minibatch == 0 || self.interleave == 0 || self.grouper_batch == 0 {
            return bad("horizon, minibatch, interleave and grouper batch must be positive");
        }
        if !(self.lr > 0.0
            && self.lr.is_finite()
            && self.codebook_lr > 0.0
            && self.codebook_lr.is_finite()
            && self.grouper_lr > 0.0
            && self.grouper_lr.is_finite())
        {
            return bad("learning rates must be positive");
        }
        if self.sizes.is_empty() || !self.sizes.contains(&1) {
            return bad("enabled sizes must include 1");
        }
        if self.sizes.iter().any(|&m| m == 0 || m > N_MAX) || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "sizes {:?} must be strictly increasing within 1..={N_MAX}",
                self.sizes
            )));
        }
        if self.heads == 0 || !self.attn_width.is_multiple_of(self.heads) {
            return bad("attention heads must divide the projection width");
        }
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        *self.sizes.last().unwrap_or(&1)
    }
}

/// Parses `1,2,3` into a sorted size list.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    let mut v = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad size list `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codebooks {
    ThreeD(Codebook3D),
    Hier(HierCodebooks),
}

impl Codebooks {
    pub fn params(&self) -> &ParameterSet {
        match self {
            Codebooks::ThreeD(c) => &c.tables,
            Codebooks::Hier(c) => &c.tables,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        match self {
            Codebooks::ThreeD(c) => &mut c.tables,
            Codebooks::Hier(c) => &mut c.tables,
        }
    }

    pub fn usage_mut(&mut self) -> &mut UsageTracker {
        match self {
            Codebooks::ThreeD(c) => &mut c.usage,
            Codebooks::Hier(c) => &mut c.usage,
        }
    }
}

/// Which loss terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub recon: bool,
    pub codebook: bool,
    pub commitment: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        recon: true,
        codebook: true,
        commitment: true,
    };
}

/// Codes chosen for one subgroup during a loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupCodes {
    pub members: Vec<usize>,
    /// Index into `E_m` (3D scheme).
    pub code: Option<usize>,
    /// Index into `E_top` (hierarchical scheme).
    pub top: Option<usize>,
}

/// Variables and bookkeeping of one loss evaluation on a tape.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub nll: Var,
    /// Sum of `||sg(z) - e||^2` terms.
    pub codebook: Var,
    /// Sum of `||z - sg(e)||^2` terms, before the `beta` weight.
    pub commitment: Var,
    /// Encoder outputs, one row per segment.
    pub z_e: Var,
    /// Straight-through quantized bottom embeddings, one row per segment.
    pub z_q: Var,
    pub z_top: Option<Var>,
    /// Decoder log-probabilities, `H` rows per segment.
    pub log_probs: Var,
    /// Masked log-likelihood of each recorded step.
    pub step_log_probs: Var,
    pub n_segments: usize,
    pub horizon: usize,
    pub subgroups: Vec<SubgroupCodes>,
    pub btm_codes: Vec<usize>,
    pub actions: Vec<usize>,
    pub valid: Vec<bool>,
    row_vq: Vec<f64>,
    row_top_vq: Vec<f64>,
    beta: f64,
}

/// Scalar view of a [`LossGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub nll: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Each subgroup's share of the total, in evaluation order.
    pub per_subgroup: Vec<f64>,
    pub per_segment_nll: Vec<f64>,
    pub correct: usize,
    pub valid_steps: usize,
}

impl LossGraph {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let step = tape.value(self.step_log_probs);
        let lp = tape.value(self.log_probs);
        let per_segment_nll: Vec<f64> = step.chunks(self.horizon).map(|c| -c.iter().sum::<f64>()).collect();
        let mut correct = 0;
        let mut valid_steps = 0;
        for (r, row) in lp.chunks(N_ACTIONS).enumerate() {
            if self.valid[r] {
                valid_steps += 1;
                if crate::mappo::argmax(row) == self.actions[r] {
                    correct += 1;
                }
            }
        }
        let w = 1.0 + self.beta;
        let per_subgroup = self
            .subgroups
            .iter()
            .map(|g| {
                g.members
                    .iter()
                    .map(|&r| per_segment_nll[r] + w * (self.row_vq[r] + self.row_top_vq[r]))
                    .sum()
            })
            .collect();
        LossReport {
            total: tape.scalar(self.total),
            nll: tape.scalar(self.nll),
            codebook: tape.scalar(self.codebook),
            commitment: tape.scalar(self.commitment),
            per_subgroup,
            per_segment_nll,
            correct,
            valid_steps,
        }
    }
}

/// Encoder, decoder, codebooks and (hierarchical) aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillModel {
    pub config: DiscoveryConfig,
    pub obs_dim: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub aggregator: Option<Aggregator>,
    pub enc: ParameterSet,
    pub dec: ParameterSet,
    pub agg: Option<ParameterSet>,
    pub codebooks: Codebooks,
}

impl SkillModel {
    pub fn new(config: DiscoveryConfig, obs_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, "init");
        let mut model = Self::shell(config, obs_dim, &mut rng)?;
        model.encoder.init(&mut model.enc, &mut rng);
        model.decoder.init(&mut model.dec, &mut rng);
        if let (Some(a), Some(p)) = (&model.aggregator, &mut model.agg) {
            a.init(p, &mut rng);
        }
        Ok(model)
    }

    fn shell(config: DiscoveryConfig, obs_dim: usize, rng: &mut Rng) -> Result<Self> {
        let h = config.hidden;
        let enc_in = config.horizon * (obs_dim + N_ACTIONS);
        let encoder = Mlp::new("enc", &[enc_in, h, h, config.d], Activation::Tanh, false);
        let cond = match config.method {
            Method::Hier => config.d + config.d_top,
            _ => config.d,
        };
        let decoder = Mlp::new("dec", &[obs_dim + cond, h, h, N_ACTIONS], Activation::Tanh, true);
        let (aggregator, agg) = if config.method == Method::Hier {
            (
                Some(Aggregator::new(config.d, config.attn_width, config.d_top, config.heads)?),
                Some(ParameterSet::new(Role::Aggregator)),
            )
        } else {
            (None, None)
        };
        let codebooks = match config.method {
            Method::ThreeD => Codebooks::ThreeD(Codebook3D::new(config.d, config.k, &config.sizes, rng)),
            Method::Hier => Codebooks::Hier(HierCodebooks::new(config.d, config.k, Some((config.d_top, config.k_top)), rng)),
            Method::Single => Codebooks::Hier(HierCodebooks::new(config.d, config.k, None, rng)),
        };
        Ok(Self {
            config,
            obs_dim,
            encoder,
            decoder,
            aggregator,
            enc: ParameterSet::new(Role::Encoder),
            dec: ParameterSet::new(Role::Decoder),
            agg,
            codebooks,
        })
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn cond_dim(&self) -> usize {
        self.decoder.input_dim() - self.obs_dim
    }

    /// Every trainable set, in a fixed order.
    pub fn sets(&self) -> Vec<&ParameterSet> {
        let mut v = vec![&self.enc, &self.dec, self.codebooks.params()];
        if let Some(a) = &self.agg {
            v.push(a);
        }
        v
    }

    /// All parameters in one set (names are disjoint across roles).
    pub fn merged_params(&self) -> ParameterSet {
        let mut all = ParameterSet::new(Role::Encoder);
        for set in self.sets() {
            for (n, t) in set.iter() {
                all.insert(n, t.clone());
            }
        }
        all
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut b = Bound::new();
        for set in self.sets() {
            b.extend(tape.bind(set));
        }
        b
    }

    pub fn encoder_input(&self, seg: &SkillSegment) -> Result<Vec<f64>> {
        if seg.horizon() != self.config.horizon {
            return Err(Error::Structure(format!(
                "segment of {} steps, horizon is {}",
                seg.horizon(),
                self.config.horizon
            )));
        }
        let mut x = Vec::with_capacity(self.encoder.input_dim());
        for (o, &a) in seg.obs.iter().zip(&seg.acts) {
            if o.len() != self.obs_dim || a >= N_ACTIONS {
                return Err(Error::Structure(format!("segment step with {} obs values and action {a}", o.len())));
            }
            x.extend_from_slice(o);
            let mut one_hot = [0.0; N_ACTIONS];
            one_hot[a] = 1.0;
            x.extend_from_slice(&one_hot);
        }
        Ok(x)
    }

    pub fn encode_segment(&self, seg: &SkillSegment) -> Result<Vec<f64>> {
        let x = self.encoder_input(seg)?;
        self.encoder.infer(&self.enc, &x, 1)
    }

    /// Action log-probabilities given an observation and the code(s).
    pub fn decode_step(&self, obs: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim || cond.len() != self.cond_dim() {
            return Err(Error::Structure(format!(
                "decoder input {}+{}, expected {}+{}",
                obs.len(),
                cond.len(),
                self.obs_dim,
                self.cond_dim()
            )));
        }
        let mut x = obs.to_vec();
        x.extend_from_slice(cond);
        let mut out = self.decoder.infer(&self.dec, &x, 1)?;
        log_softmax_rows(&mut out, N_ACTIONS);
        Ok(out)
    }

    fn nll_graph(&self, tape: &mut Tape, bound: &Bound, segs: &[&SkillSegment], cond: Var) -> (Var, Var, Vec<usize>, Vec<bool>) {
        let h = self.config.horizon;
        let rows = segs.len() * h;
        let mut obs = Vec::with_capacity(rows * self.obs_dim);
        let mut acts = Vec::with_capacity(rows);
        let mut valid = Vec::with_capacity(rows);
        for s in segs {
            for t in 0..h {
                obs.extend_from_slice(&s.obs[t]);
                acts.push(s.acts[t]);
                valid.push(s.valid[t]);
            }
        }
        let ov = tape.matrix(rows, self.obs_dim, obs);
        let rep: Vec<usize> = (0..segs.len()).flat_map(|r| std::iter::repeat_n(r, h)).collect();
        let c = tape.gather_rows(cond, &rep);
        let x = tape.concat_cols(&[ov, c]);
        let logits = self.decoder.forward(tape, bound, x);
        let lp = tape.log_softmax(logits);
        let picked = tape.pick(lp, &acts);
        let mask = tape.matrix(rows, 1, valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
        let step = tape.mul(picked, mask);
        (lp, step, acts, valid)
    }

    /// Per-segment reconstruction NLL of `batch` with explicitly supplied
    /// decoder conditioning rows (one per agent).
    pub fn per_agent_nll(&self, batch: &SegmentBatch, cond: &[Vec<f64>]) -> Result<Vec<f64>> {
        if cond.len() != batch.n_agents() || cond.iter().any(|c| c.len() != self.cond_dim()) {
            return Err(Error::Structure("one conditioning row of the decoder's code width per agent".into()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.dec);
        let cv = tape.matrix(cond.len(), self.cond_dim(), cond.concat());
        let segs: Vec<&SkillSegment> = batch.segments.iter().collect();
        let (_, step, _, _) = self.nll_graph(&mut tape, &bound, &segs, cv);
        tape.check()?;
        Ok(tape.value(step).chunks(self.config.horizon).map(|c| -c.iter().sum::<f64>()).collect())
    }

    /// Builds the discovery loss over several (batch, partition) pairs.
    ///
    /// Codes are chosen from the values of the codebook variables in
    /// `bound`, so the graph is self-consistent under perturbation.
    pub fn build_loss(&self, tape: &mut Tape, bound: &Bound, items: &[(&SegmentBatch, &Partition)], terms: Terms) -> Result<LossGraph> {
        let d = self.config.d;
        let mut segs: Vec<&SkillSegment> = Vec::new();
        let mut subgroups: Vec<Vec<usize>> = Vec::new();
        for (b, p) in items {
            p.check_size(b.n_agents())?;
            if b.horizon() != self.config.horizon {
                return Err(Error::Structure(format!("batch horizon {} != {}", b.horizon(), self.config.horizon)));
            }
            let offset = segs.len();
            segs.extend(b.segments.iter());
            for g in p.subgroups() {
                subgroups.push(g.iter().map(|i| offset + i).collect());
            }
        }
        if segs.is_empty() {
            return Err(Error::Structure("loss over no segments".into()));
        }
        let r = segs.len();
        let mut x = Vec::with_capacity(r * self.encoder.input_dim());
        for s in &segs {
            x.extend(self.encoder_input(s)?);
        }
        let xv = tape.matrix(r, self.encoder.input_dim(), x);
        let z_e = self.encoder.forward(tape, bound, xv);
        tape.check()?;
        let zv = tape.value(z_e).to_vec();

        let mut codes: Vec<SubgroupCodes> = subgroups
            .iter()
            .map(|g| SubgroupCodes {
                members: g.clone(),
                code: None,
                top: None,
            })
            .collect();
        let mut btm_codes = vec![0; r];
        let mut row_vq = vec![0.0; r];
        let mut row_top_vq = vec![0.0; r];

        let e = match self.method() {
            Method::ThreeD => {
                let mut per_m: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
                for sg in codes.iter_mut() {
                    let m = sg.members.len();
                    let name = table_name_3d(m);
                    let table = bound
                        .get(&name)
                        .ok_or_else(|| Error::Config(format!("subgroup size {m} has no codebook")))?;
                    let joint: Vec<f64> = sg.members.iter().flat_map(|&i| zv[i * d..(i + 1) * d].iter().copied()).collect();
                    let (c, _) = nearest(&joint, tape.value(*table), m * d);
                    sg.code = Some(c);
                    let entry = per_m.entry(m).or_default();
                    for (j, &i) in sg.members.iter().enumerate() {
                        entry.0.push(c * m + j);
                        entry.1.push(i);
                        btm_codes[i] = c * m + j;
                    }
                }
                let mut parts = Vec::new();
                let mut order = Vec::new();
                for (m, (code_rows, seg_rows)) in &per_m {
                    parts.push(tape.gather_rows(bound[&table_name_3d(*m)], code_rows));
                    order.extend_from_slice(seg_rows);
                }
                let cat = tape.concat_rows(&parts);
                let mut inv = vec![0; r];
                for (pos, &row) in order.iter().enumerate() {
                    inv[row] = pos;
                }
                tape.gather_rows(cat, &inv)
            }
            Method::Hier | Method::Single => {
                let table = bound[BTM_NAME];
                for i in 0..r {
                    btm_codes[i] = nearest(&zv[i * d..(i + 1) * d], tape.value(table), d).0;
                }
                tape.gather_rows(table, &btm_codes)
            }
        };
        let (z_q, mut cb_term, mut cm_term) = straight_through(tape, z_e, e);
        for (i, slot) in row_vq.iter_mut().enumerate().take(r) {
            *slot = tape.row(z_e, i).iter().zip(tape.row(e, i)).map(|(a, b)| (a - b) * (a - b)).sum();
        }

        let mut z_top_var = None;
        let cond = match (&self.aggregator, self.method()) {
            (Some(agg), Method::Hier) => {
                let mut membership = vec![0; r];
                for (l, sg) in codes.iter().enumerate() {
                    for &i in &sg.members {
                        membership[i] = l;
                    }
                }
                let z_top = agg.graph(tape, bound, z_e, &membership, codes.len());
                tape.check()?;
                z_top_var = Some(z_top);
                let top_table = bound[TOP_NAME];
                let dt = self.config.d_top;
                let top_idx: Vec<usize> = (0..codes.len())
                    .map(|l| nearest(tape.row(z_top, l), tape.value(top_table), dt).0)
                    .collect();
                for (sg, &c) in codes.iter_mut().zip(&top_idx) {
                    sg.top = Some(c);
                }
                let e_top = tape.gather_rows(top_table, &top_idx);
                let zt = tape.gather_rows(z_top, &membership);
                let et = tape.gather_rows(e_top, &membership);
                let (zq_top, cb_top, cm_top) = straight_through(tape, zt, et);
                for (i, slot) in row_top_vq.iter_mut().enumerate().take(r) {
                    *slot = tape.row(zt, i).iter().zip(tape.row(et, i)).map(|(a, b)| (a - b) * (a - b)).sum();
                }
                cb_term = tape.add(cb_term, cb_top);
                cm_term = tape.add(cm_term, cm_top);
                tape.concat_cols(&[z_q, zq_top])
            }
            _ => z_q,
        };

        let (log_probs, step, actions, valid) = self.nll_graph(tape, bound, &segs, cond);
        let ll = tape.sum(step);
        let nll = tape.scale(ll, -1.0);
        let weighted_cm = tape.scale(cm_term, self.config.beta);
        let mut parts = Vec::new();
        if terms.recon {
            parts.push(nll);
        }
        if terms.codebook {
            parts.push(cb_term);
        }
        if terms.commitment {
            parts.push(weighted_cm);
        }
        let mut total = match parts.first() {
            Some(&p) => p,
            None => tape.scale(nll, 0.0),
        };
        for &p in parts.iter().skip(1) {
            total = tape.add(total, p);
        }
        tape.check()?;
        Ok(LossGraph {
            total,
            nll,
            codebook: cb_term,
            commitment: cm_term,
            z_e,
            z_q,
            z_top: z_top_var,
            log_probs,
            step_log_probs: step,
            n_segments: r,
            horizon: self.config.horizon,
            subgroups: codes,
            btm_codes,
            actions,
            valid,
            row_vq,
            row_top_vq,
            beta: self.config.beta,
        })
    }

    /// Forward-only loss of one batch under `partition`.
    pub fn loss(&self, batch: &SegmentBatch, partition: &Partition) -> Result<LossReport> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let g = self.build_loss(&mut tape, &bound, &[(batch, partition)], Terms::ALL)?;
        Ok(g.report(&tape))
    }

    /// Partition as the scheme can use it: 3D splits subgroups of disabled
    /// sizes into singletons, the single-agent ablation ignores grouping.
    pub fn effective_partition(&self, partition: &Partition) -> Partition {
        match self.method() {
            Method::ThreeD => partition.restricted_to(&self.config.sizes),
            Method::Hier => partition.clone(),
            Method::Single => Partition::singletons(partition.n_agents()),
        }
    }

    pub fn to_checkpoint(&self, grouper: Option<&Grouper>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.config;
        ck.set_meta("kind", "skills");
        ck.set_meta("method", c.method);
        ck.set_meta("horizon", c.horizon);
        ck.set_meta("d", c.d);
        ck.set_meta("k", c.k);
        ck.set_meta("d_top", c.d_top);
        ck.set_meta("k_top", c.k_top);
        ck.set_meta("heads", c.heads);
        ck.set_meta("attn_width", c.attn_width);
        ck.set_meta("beta", c.beta);
        ck.set_meta("sizes", c.sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        ck.set_meta("hidden", c.hidden);
        ck.set_meta("obs_dim", self.obs_dim);
        ck.set_meta("seed", c.seed);
        ck.set_meta(
            "decoder_input",
            match c.method {
                Method::Hier => "obs,q_btm,q_top",
                Method::ThreeD => "obs,e",
                Method::Single => "obs,q_btm",
            },
        );
        for set in self.sets() {
            ck.add_set(set);
        }
        if let Some(g) = grouper {
            g.save_into(&mut ck);
        }
        ck
    }

    /// Restores the model and, when present, its grouper.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<Grouper>)> {
        if ck.meta("kind") != Some("skills") {
            return Err(Error::Config("checkpoint does not hold discovered skills".into()));
        }
        let num = |key: &str| -> Result<usize> {
            ck.require_meta(key)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint meta `{key}` is not an integer")))
        };
        let config = DiscoveryConfig {
            method: ck.require_meta("method")?.parse()?,
            horizon: num("horizon")?,
            d: num("d")?,
            k: num("k")?,
            d_top: num("d_top")?,
            k_top: num("k_top")?,
            heads: num("heads")?,
            attn_width: num("attn_width")?,
            beta: ck
                .require_meta("beta")?
                .parse()
                .map_err(|_| Error::Config("checkpoint meta `beta`".into()))?,
            sizes: parse_sizes(ck.require_meta("sizes")?)?,
            hidden: num("hidden")?,
            seed: num("seed")? as u64,
            ..DiscoveryConfig::default()
        };
        let obs_dim = num("obs_dim")?;
        let mut model = Self::shell(config, obs_dim, &mut stream(0, "unused"))?;
        model.enc = ck.extract("enc", Role::Encoder)?;
        model.dec = ck.extract("dec", Role::Decoder)?;
        model.codebooks = match model.method() {
            Method::ThreeD => Codebooks::ThreeD(Codebook3D::from_checkpoint(ck)?),
            _ => Codebooks::Hier(HierCodebooks::from_checkpoint(ck)?),
        };
        if model.method() == Method::Hier {
            if ck.tensor(TOP_NAME).is_err() || !ck.has_prefix("agg") {
                return Err(Error::MissingTensors(format!("{TOP_NAME}, agg/*")));
            }
            model.agg = Some(ck.extract("agg", Role::Aggregator)?);
        }
        let grouper = if ck.has_prefix("grouper") {
            Some(Grouper::from_checkpoint(ck)?)
        } else {
            None
        };
        Ok((model, grouper))
    }
}

/// `z + sg(e - z)`, `||sg(z) - e||^2`, `||z - sg(e)||^2`.
fn straight_through(tape: &mut Tape, z: Var, e: Var) -> (Var, Var, Var) {
    let diff = tape.sub(e, z);
    let frozen = tape.stop_grad(diff);
    let zq = tape.add(z, frozen);
    let sz = tape.stop_grad(z);
    let a = tape.sub(sz, e);
    let cb = tape.squared_norm(a);
    let se = tape.stop_grad(e);
    let b = tape.sub(z, se);
    let cm = tape.squared_norm(b);
    (zq, cb, cm)
}
