use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::codebook::{BTM_NAME, TOP_NAME};
use super::model::{Codebooks, DiscoveryConfig, LossGraph, Method, SkillModel, Terms};
use crate::dataset::SegmentBatch;
use crate::error::{Error, Result};
use crate::grouper::{grouper_ppo_config, Grouper, GroupingContext, Partition};
use crate::nn::{AdamState, Checkpoint, Tape};
use crate::rng::{stream, Rng};

const RESERVOIR: usize = 512;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-segment training loss over the epoch's minibatches.
    pub loss: f64,
    pub nll: f64,
    pub vq: f64,
    /// Mean loss seen by the grouper during this epoch's phases.
    pub grouper_loss: f64,
    pub reseeded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Per-segment total loss under greedy grouping.
    pub loss: f64,
    pub nll: f64,
    /// Fraction of recorded steps whose argmax decoder action matches.
    pub accuracy: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial: EvalSummary,
    pub last: EvalSummary,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.last.loss / self.initial.loss
    }
}

/// A skill model together with the grouper co-trained with it.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub model: SkillModel,
    pub grouper: Option<Grouper>,
}

#[derive(Debug, Default)]
struct Reservoir {
    singles: VecDeque<Vec<f64>>,
    joints: BTreeMap<usize, VecDeque<Vec<f64>>>,
    tops: VecDeque<Vec<f64>>,
}

fn push_capped(q: &mut VecDeque<Vec<f64>>, v: Vec<f64>) {
    if q.len() == RESERVOIR {
        q.pop_front();
    }
    q.push_back(v);
}

impl Discovery {
    pub fn new(config: DiscoveryConfig, obs_dim: usize) -> Result<Self> {
        let model = SkillModel::new(config.clone(), obs_dim)?;
        let grouper = match config.method {
            Method::Single => None,
            _ => Some(Grouper::new(
                config.grouper_input,
                config.max_size(),
                config.grouper_lr,
                &mut stream(config.seed, "grouper-init"),
            )),
        };
        Ok(Self { model, grouper })
    }

    fn grouping_active(&self) -> bool {
        self.grouper.is_some() && self.model.method() != Method::Single && self.model.config.max_size() > 1
    }

    /// Partition used for `batch`: sampled when `rng` is given, greedy
    /// otherwise; all singletons when grouping is inactive.
    pub fn partition(&self, batch: &SegmentBatch, rng: Option<&mut Rng>) -> Result<Partition> {
        match &self.grouper {
            Some(g) if self.grouping_active() => {
                let p = g.choose_groups(&GroupingContext::from_batch(batch), rng)?.partition();
                Ok(self.model.effective_partition(&p))
            }
            _ => Ok(Partition::singletons(batch.n_agents())),
        }
    }

    pub fn evaluate(&self, batches: &[SegmentBatch]) -> Result<EvalSummary> {
        let mut total = 0.0;
        let mut nll = 0.0;
        let mut correct = 0;
        let mut steps = 0;
        let mut segments = 0;
        for chunk in batches.chunks(EVAL_CHUNK) {
            let parts = chunk.iter().map(|b| self.partition(b, None)).collect::<Result<Vec<_>>>()?;
            let items: Vec<(&SegmentBatch, &Partition)> = chunk.iter().zip(&parts).collect();
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let g = self.model.build_loss(&mut tape, &bound, &items, Terms::ALL)?;
            let r = g.report(&tape);
            total += r.total;
            nll += r.nll;
            correct += r.correct;
            steps += r.valid_steps;
            segments += g.n_segments;
        }
        if segments == 0 {
            return Err(Error::Validation("no segments to evaluate".into()));
        }
        Ok(EvalSummary {
            loss: total / segments as f64,
            nll: nll / segments as f64,
            accuracy: correct as f64 / steps.max(1) as f64,
            segments,
        })
    }

    /// Alternates autoencoder minibatch steps with grouper PPO phases.
    ///
    /// On a non-finite loss or gradient the model and grouper are restored
    /// to the end of the last completed epoch and `Error::Diverged` is
    /// returned.
    pub fn train<F: FnMut(&EpochStats)>(&mut self, batches: &[SegmentBatch], mut on_epoch: F) -> Result<TrainReport> {
        if batches.is_empty() {
            return Err(Error::Validation("discovery needs a non-empty dataset".into()));
        }
        let cfg = self.model.config.clone();
        let mut rng_mb = stream(cfg.seed, "minibatch");
        let mut rng_part = stream(cfg.seed, "partition");
        let mut rng_grp = stream(cfg.seed, "grouper");
        let mut rng_seed = stream(cfg.seed, "reseed");
        let mut opts: Vec<AdamState> = self
            .model
            .sets()
            .iter()
            .map(|s| {
                AdamState::new(if s.role() == crate::nn::Role::Codebook {
                    cfg.codebook_lr
                } else {
                    cfg.lr
                })
            })
            .collect();
        let mut reservoir = Reservoir::default();
        let ppo = grouper_ppo_config();

        let initial = self.evaluate(batches)?;
        let mut last_good = self.clone();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;
        let mut order: Vec<usize> = (0..batches.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng_mb);
            let (mut loss_sum, mut nll_sum, mut vq_sum, mut seg_sum) = (0.0, 0.0, 0.0, 0usize);
            let (mut g_loss, mut g_phases, mut reseeded) = (0.0, 0usize, 0usize);
            for chunk in order.chunks(cfg.minibatch) {
                let parts = chunk
                    .iter()
                    .map(|&i| self.partition(&batches[i], Some(&mut rng_part)))
                    .collect::<Result<Vec<_>>>()?;
                let items: Vec<(&SegmentBatch, &Partition)> = chunk.iter().map(|&i| &batches[i]).zip(&parts).collect();
                let mut tape = Tape::new();
                let bound = self.model.bind(&mut tape);
                let graph = match self.model.build_loss(&mut tape, &bound, &items, Terms::ALL) {
                    Ok(g) => g,
                    Err(Error::NonFinite { node, op }) => return self.diverge(last_good, format!("non-finite {op} at node {node}")),
                    Err(e) => return Err(e),
                };
                let scaled = tape.scale(graph.total, 1.0 / graph.n_segments as f64);
                let total = tape.scalar(graph.total);
                if !total.is_finite() {
                    return self.diverge(last_good, format!("loss {total} at epoch {epoch}"));
                }
                let grads = match tape.backward(scaled) {
                    Ok(g) => g,
                    Err(e) => return self.diverge(last_good, e.to_string()),
                };
                loss_sum += total;
                nll_sum += tape.scalar(graph.nll);
                vq_sum += tape.scalar(graph.codebook) + cfg.beta * tape.scalar(graph.commitment);
                seg_sum += graph.n_segments;
                self.record(&tape, &graph, &mut reservoir);

                let mut failed = None;
                let model = &mut self.model;
                let mut sets = vec![&mut model.enc, &mut model.dec, model.codebooks.params_mut()];
                if let Some(a) = model.agg.as_mut() {
                    sets.push(a);
                }
                for (set, opt) in sets.into_iter().zip(opts.iter_mut()) {
                    let g = grads.for_set(set);
                    if let Err(e) = opt.apply(set, &g) {
                        failed = Some(e);
                        break;
                    }
                }
                if let Some(e) = failed {
                    return self.diverge(last_good, e.to_string());
                }

                step += 1;
                if step.is_multiple_of(cfg.interleave) {
                    reseeded += self.reseed_dead_codes(&reservoir, &mut rng_seed);
                    if self.grouping_active() {
                        let picks: Vec<usize> = (0..cfg.grouper_batch).map(|_| rng_grp.random_range(0..batches.len())).collect();
                        let contexts: Vec<GroupingContext> = picks.iter().map(|&i| GroupingContext::from_batch(&batches[i])).collect();
                        let model = &self.model;
                        let grouper = self.grouper.as_mut().expect("active grouping has a grouper");
                        let rep = grouper.ppo_phase(
                            &contexts,
                            |k, p| model.loss(&batches[picks[k]], &model.effective_partition(p)).map(|r| r.total),
                            &ppo,
                            &mut rng_grp,
                        )?;
                        if rep.diagnostics.aborted {
                            return self.diverge(last_good, "grouper update produced a non-finite loss".into());
                        }
                        g_loss += rep.mean_loss;
                        g_phases += 1;
                    }
                }
            }
            let n = seg_sum.max(1) as f64;
            let stats = EpochStats {
                epoch,
                loss: loss_sum / n,
                nll: nll_sum / n,
                vq: vq_sum / n,
                grouper_loss: if g_phases > 0 { g_loss / g_phases as f64 } else { 0.0 },
                reseeded,
            };
            on_epoch(&stats);
            epochs.push(stats);
            last_good = self.clone();
        }
        let last = self.evaluate(batches)?;
        Ok(TrainReport { initial, last, epochs })
    }

    fn diverge<T>(&mut self, last_good: Discovery, why: String) -> Result<T> {
        *self = last_good;
        Err(Error::Diverged(why))
    }

    fn record(&mut self, tape: &Tape, graph: &LossGraph, reservoir: &mut Reservoir) {
        let d = self.model.config.d;
        for i in 0..graph.n_segments {
            push_capped(&mut reservoir.singles, tape.row(graph.z_e, i).to_vec());
        }
        match &mut self.model.codebooks {
            Codebooks::ThreeD(cb) => {
                let mut counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for sg in &graph.subgroups {
                    let m = sg.members.len();
                    let c = sg.code.expect("3D subgroups carry a code");
                    counts.entry(m).or_insert_with(|| vec![0; cb.k])[c] += 1;
                    let joint: Vec<f64> = sg.members.iter().flat_map(|&i| tape.row(graph.z_e, i).to_vec()).collect();
                    debug_assert_eq!(joint.len(), m * d);
                    push_capped(reservoir.joints.entry(m).or_default(), joint);
                }
                for (m, c) in counts {
                    cb.usage.record(&super::codebook::table_name_3d(m), &c);
                }
            }
            Codebooks::Hier(cb) => {
                let mut c = vec![0; cb.btm().rows()];
                for &i in &graph.btm_codes {
                    c[i] += 1;
                }
                cb.usage.record(BTM_NAME, &c);
                if let (Some(top), Some(zt)) = (cb.top(), graph.z_top) {
                    let mut c = vec![0; top.rows()];
                    for (l, sg) in graph.subgroups.iter().enumerate() {
                        c[sg.top.expect("hier subgroups carry a top code")] += 1;
                        push_capped(&mut reservoir.tops, tape.row(zt, l).to_vec());
                    }
                    cb.usage.record(TOP_NAME, &c);
                }
            }
        }
    }

    fn reseed_dead_codes(&mut self, reservoir: &Reservoir, rng: &mut Rng) -> usize {
        let frac = self.model.config.dead_fraction;
        let names: Vec<String> = self.model.codebooks.params().names().cloned().collect();
        let mut count = 0;
        for name in names {
            let dead = self.model.codebooks.usage_mut().dead(&name, frac);
            for c in dead {
                let replacement = if name == TOP_NAME {
                    pick(&reservoir.tops, rng)
                } else if name == BTM_NAME {
                    pick(&reservoir.singles, rng)
                } else {
                    let m: usize = name.trim_start_matches("E3d/m").parse().unwrap_or(1);
                    match reservoir.joints.get(&m).and_then(|q| pick(q, rng)) {
                        Some(v) => Some(v),
                        None if !reservoir.singles.is_empty() => Some((0..m).flat_map(|_| pick(&reservoir.singles, rng).unwrap()).collect()),
                        None => None,
                    }
                };
                let Some(v) = replacement else { continue };
                let t = self.model.codebooks.params_mut().get_mut(&name).expect("listed table");
                let width = t.len() / t.shape()[0];
                if v.len() == width {
                    t.data_mut()[c * width..(c + 1) * width].copy_from_slice(&v);
                    self.model.codebooks.usage_mut().revive(&name, c);
                    count += 1;
                }
            }
        }
        count
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(self.grouper.as_ref())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, grouper) = SkillModel::from_checkpoint(ck)?;
        Ok(Self { model, grouper })
    }
}

fn pick(q: &VecDeque<Vec<f64>>, rng: &mut Rng) -> Option<Vec<f64>> {
    if q.is_empty() {
        None
    } else {
        Some(q[rng.random_range(0..q.len())].clone())
    }
}

/// Trains the 3D-codebook scheme.
pub fn train_3d<F: FnMut(&EpochStats)>(
    batches: &[SegmentBatch],
    obs_dim: usize,
    config: DiscoveryConfig,
    on_epoch: F,
) -> Result<(Discovery, TrainReport)> {
    if config.method != Method::ThreeD {
        return Err(Error::Config("train_3d needs method 3d".into()));
    }
    let mut d = Discovery::new(config, obs_dim)?;
    let report = d.train(batches, on_epoch)?;
    Ok((d, report))
}

/// Trains the hierarchical scheme (or its single-agent ablation).
pub fn train_hier<F: FnMut(&EpochStats)>(
    batches: &[SegmentBatch],
    obs_dim: usize,
    config: DiscoveryConfig,
    on_epoch: F,
) -> Result<(Discovery, TrainReport)> {
    if config.method == Method::ThreeD {
        return Err(Error::Config("train_hier needs method hier or single".into()));
    }
    let mut d = Discovery::new(config, obs_dim)?;
    let report = d.train(batches, on_epoch)?;
    Ok((d, report))
}
