//! Offline trajectories: collection, line-delimited persistence and
//! segmentation into fixed-horizon skill segments.
//!
//! File layout: line 1 is a header object
//! `{version, task_ids, obs_dim, state_dim, n_actions}`; every following line
//! is one episode. Reals are written in shortest round-trip form.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::env::{self, Action, ScriptedExpert, TaskConfig, N_ACTIONS, OBS_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_HORIZON: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub n_agents: usize,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    fn validate(&self) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            if s.obs.len() != self.n_agents || s.actions.len() != self.n_agents {
                return Err(Error::Validation(format!(
                    "step {t}: {} observations / {} actions for {} agents",
                    s.obs.len(),
                    s.actions.len(),
                    self.n_agents
                )));
            }
            if !s.reward.is_finite() {
                return Err(Error::Validation(format!("step {t}: non-finite reward")));
            }
            if let Some(a) = s.actions.iter().find(|&&a| a >= N_ACTIONS) {
                return Err(Error::Validation(format!("step {t}: action {a} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub task_ids: Vec<String>,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
}

pub fn save_dataset(episodes: &[EpisodeRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write_dataset(episodes, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset(episodes: &[EpisodeRecord], out: &mut impl Write) -> Result<()> {
    let task_ids: BTreeSet<String> = episodes.iter().map(|e| e.task_id.clone()).collect();
    let header = DatasetHeader {
        version: DATASET_VERSION,
        task_ids: task_ids.into_iter().collect(),
        obs_dim: OBS_DIM,
        state_dim: STATE_DIM,
        n_actions: N_ACTIONS,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for ep in episodes {
        ep.validate()?;
        serde_json::to_writer(&mut *out, ep)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<EpisodeRecord>)> {
    read_dataset(BufReader::new(std::fs::File::open(path)?))
}

pub fn read_dataset(input: impl BufRead) -> Result<(DatasetHeader, Vec<EpisodeRecord>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if header.version != DATASET_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let mut episodes = vec![];
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let ep: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        ep.validate().map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if ep
            .steps
            .iter()
            .any(|s| s.state.len() != header.state_dim || s.obs.iter().any(|o| o.len() != header.obs_dim))
        {
            return Err(Error::Parse {
                line: lineno,
                msg: "observation or state width disagrees with header".into(),
            });
        }
        episodes.push(ep);
    }
    Ok((header, episodes))
}

/// Demonstration source used by the collector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CollectorPolicy {
    Expert,
    Noisy(f64),
}

impl CollectorPolicy {
    pub fn epsilon(self) -> f64 {
        match self {
            CollectorPolicy::Expert => 0.0,
            CollectorPolicy::Noisy(e) => e,
        }
    }
}

impl std::str::FromStr for CollectorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "expert" {
            return Ok(Self::Expert);
        }
        if let Some(eps) = s.strip_prefix("noisy:") {
            let e: f64 = eps.parse().map_err(|_| Error::Config(format!("bad noise level in `{s}`")))?;
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("noise level {e} outside [0, 1]")));
            }
            return Ok(Self::Noisy(e));
        }
        Err(Error::Config(format!("unknown policy `{s}` (expert | noisy:EPS)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionSummary {
    pub episodes: usize,
    pub wins: usize,
    pub mean_length: f64,
}

impl CollectionSummary {
    pub fn win_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.wins as f64 / self.episodes as f64
        }
    }
}

/// Rolls out the scripted demonstrator for `episodes` episodes.
pub fn collect(cfg: &TaskConfig, episodes: usize, policy: CollectorPolicy, seed: u64) -> Result<(Vec<EpisodeRecord>, CollectionSummary)> {
    let mut expert = ScriptedExpert::new(policy.epsilon(), stream(seed, &format!("collect/{}/noise", cfg.task_id)));
    let mut out = Vec::with_capacity(episodes);
    let mut wins = 0;
    let mut total_len = 0;
    for ep in 0..episodes {
        let episode_seed = crate::rng::derive_seed(seed, &format!("collect/{}/{ep}", cfg.task_id));
        let (mut state, mut obs) = env::reset(cfg, episode_seed)?;
        let mut steps = vec![];
        loop {
            let actions = expert.act(cfg, &state);
            let o = env::step(cfg, &state, &actions)?;
            steps.push(StepRecord {
                state: state.state_vector(cfg),
                obs,
                actions: actions.iter().map(|a| a.index()).collect(),
                reward: o.reward,
            });
            state = o.state;
            obs = o.observations;
            if o.done {
                break;
            }
        }
        if state.won() {
            wins += 1;
        }
        total_len += steps.len();
        out.push(EpisodeRecord {
            task_id: cfg.task_id.clone(),
            n_agents: cfg.n_agents,
            steps,
        });
    }
    let summary = CollectionSummary {
        episodes,
        wins,
        mean_length: if episodes == 0 { 0.0 } else { total_len as f64 / episodes as f64 },
    };
    Ok((out, summary))
}

/// One agent's `H`-step observation/action slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillSegment {
    pub agent: usize,
    pub start_time: usize,
    pub obs: Vec<Vec<f64>>,
    pub acts: Vec<usize>,
    /// `false` on padded steps.
    pub valid: Vec<bool>,
    pub start_state: Vec<f64>,
}

impl SkillSegment {
    pub fn horizon(&self) -> usize {
        self.acts.len()
    }
}

/// Aligned segments of every agent of one episode window.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub episode: usize,
    pub task_id: String,
    pub start_time: usize,
    pub start_state: Vec<f64>,
    pub segments: Vec<SkillSegment>,
}

impl SegmentBatch {
    pub fn n_agents(&self) -> usize {
        self.segments.len()
    }

    pub fn horizon(&self) -> usize {
        self.segments.first().map_or(0, SkillSegment::horizon)
    }

    /// Context for grouping agent `i`: the shared start state, or the
    /// agent's first observation.
    pub fn start_obs(&self, i: usize) -> &[f64] {
        &self.segments[i].obs[0]
    }
}

/// Splits every episode at `t = 0, H, 2H, ...`.
///
/// A trailing fragment shorter than `H` is dropped when `drop_incomplete`,
/// otherwise padded by repeating its last observation with the no-op action
/// and marked invalid.
pub fn segment(episodes: &[EpisodeRecord], horizon: usize, drop_incomplete: bool) -> Result<Vec<SegmentBatch>> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let mut out = vec![];
    for (e, ep) in episodes.iter().enumerate() {
        let mut start = 0;
        while start < ep.len() {
            let end = start + horizon;
            if end > ep.len() && drop_incomplete {
                break;
            }
            let segments = (0..ep.n_agents)
                .map(|i| {
                    let mut seg = SkillSegment {
                        agent: i,
                        start_time: start,
                        obs: Vec::with_capacity(horizon),
                        acts: Vec::with_capacity(horizon),
                        valid: Vec::with_capacity(horizon),
                        start_state: ep.steps[start].state.clone(),
                    };
                    for t in start..end {
                        if let Some(s) = ep.steps.get(t) {
                            seg.obs.push(s.obs[i].clone());
                            seg.acts.push(s.actions[i]);
                            seg.valid.push(true);
                        } else {
                            let last = seg.obs.last().cloned().expect("fragment has a step");
                            seg.obs.push(last);
                            seg.acts.push(Action::Stay.index());
                            seg.valid.push(false);
                        }
                    }
                    seg
                })
                .collect();
            out.push(SegmentBatch {
                episode: e,
                task_id: ep.task_id.clone(),
                start_time: start,
                start_state: ep.steps[start].state.clone(),
                segments,
            });
            start = end;
        }
    }
    Ok(out)
}

/// Uniform sample of `size` distinct indices out of `population`.
pub fn sample_indices(population: usize, size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if size > population {
        return Err(Error::Config(format!("cannot sample {size} of {population}")));
    }
    Ok(sample(rng, population, size).into_vec())
}

pub fn sample_minibatch<'a>(batches: &'a [SegmentBatch], size: usize, rng: &mut Rng) -> Result<Vec<&'a SegmentBatch>> {
    Ok(sample_indices(batches.len(), size, rng)?.into_iter().map(|i| &batches[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::task;

    fn synthetic(len: usize, n: usize, task_id: &str) -> EpisodeRecord {
        EpisodeRecord {
            task_id: task_id.into(),
            n_agents: n,
            steps: (0..len)
                .map(|t| StepRecord {
                    state: vec![t as f64; STATE_DIM],
                    obs: (0..n).map(|i| vec![(t * 10 + i) as f64 * 0.1; OBS_DIM]).collect(),
                    actions: (0..n).map(|i| (t + i) % N_ACTIONS).collect(),
                    reward: t as f64 / 3.0,
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip() {
        let (eps, _) = collect(&task("g3").unwrap(), 10, CollectorPolicy::Noisy(0.2), 3).unwrap();
        let mut buf = vec![];
        write_dataset(&eps, &mut buf).unwrap();
        let (header, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, eps);
        assert_eq!(header.task_ids, vec!["g3".to_string()]);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let mut buf = vec![];
        write_dataset(&[], &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        let (_, back) = read_dataset(buf.as_slice()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_line_is_reported() {
        let eps = vec![synthetic(3, 2, "g2"), synthetic(4, 2, "g2")];
        let mut buf = vec![];
        write_dataset(&eps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"task_id\": oops";
        let broken = lines.join("\n");
        match read_dataset(broken.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let text = "{\"version\":7,\"task_ids\":[],\"obs_dim\":1,\"state_dim\":1,\"n_actions\":6}\n";
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn segmentation_arithmetic() {
        let b = segment(&[synthetic(12, 2, "g2")], 5, true).unwrap();
        assert_eq!(b.iter().map(|x| x.start_time).collect::<Vec<_>>(), vec![0, 5]);
        let b = segment(&[synthetic(10, 2, "g2")], 5, true).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.segments.iter().all(|s| s.valid.iter().all(|&v| v))));
    }

    #[test]
    fn padding_repeats_last_observation() {
        let ep = synthetic(7, 2, "g2");
        let b = segment(std::slice::from_ref(&ep), 5, false).unwrap();
        assert_eq!(b.len(), 2);
        let tail = &b[1].segments[1];
        assert_eq!(tail.valid, vec![true, true, false, false, false]);
        assert_eq!(tail.obs[4], ep.steps[6].obs[1]);
        assert_eq!(tail.acts[2..], [0, 0, 0]);
    }

    #[test]
    fn segments_reassemble_the_prefix() {
        let ep = synthetic(13, 3, "g3");
        let b = segment(std::slice::from_ref(&ep), 4, true).unwrap();
        for i in 0..3 {
            let acts: Vec<usize> = b.iter().flat_map(|x| x.segments[i].acts.clone()).collect();
            let want: Vec<usize> = ep.steps[..12].iter().map(|s| s.actions[i]).collect();
            assert_eq!(acts, want);
        }
        for x in &b {
            assert!(x.segments.iter().all(|s| s.start_time == x.start_time));
            assert_eq!(x.start_time % 4, 0);
        }
    }

    #[test]
    fn sampling_without_replacement() {
        let batches = segment(&[synthetic(20, 1, "g1")], 5, true).unwrap();
        let mut rng = stream(1, "s");
        let all = sample_minibatch(&batches, 4, &mut rng).unwrap();
        let mut starts: Vec<usize> = all.iter().map(|b| b.start_time).collect();
        starts.sort();
        assert_eq!(starts, vec![0, 5, 10, 15]);
        assert!(sample_minibatch(&batches, 5, &mut rng).is_err());
        let a = sample_indices(100, 10, &mut stream(9, "s")).unwrap();
        let b = sample_indices(100, 10, &mut stream(9, "s")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_draw_frequencies_are_uniform() {
        let mut rng = stream(2, "freq");
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[sample_indices(4, 1, &mut rng).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("expert".parse::<CollectorPolicy>().unwrap(), CollectorPolicy::Expert);
        assert_eq!("noisy:0.3".parse::<CollectorPolicy>().unwrap(), CollectorPolicy::Noisy(0.3));
        assert!("noisy:3".parse::<CollectorPolicy>().is_err());
        assert!("random".parse::<CollectorPolicy>().is_err());
    }
}
