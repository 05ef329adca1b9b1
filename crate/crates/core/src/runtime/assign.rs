use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grouper::{Grouper, GroupingContext, Partition};
use crate::nn::{squared_distance, ParameterSet, Tensor};
use crate::vq::{nearest, Aggregator, Codebook3D, Discovery, HierCodebooks, Method, BTM_NAME, TOP_NAME};

/// How actor embeddings become skill codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Manner {
    /// Grouper partition, then joint quantization against the matching-size 3D table.
    ThreeD,
    /// Grouper partition, bottom code per agent, top code per subgroup.
    Hier,
    /// Each agent independently takes the nearest single-agent row.
    Mixed,
    /// Greedy normalized-distance matching over all (subgroup, code) pairs.
    Rule,
}

impl Manner {
    pub const ALL: [Manner; 4] = [Manner::ThreeD, Manner::Hier, Manner::Mixed, Manner::Rule];

    /// Fails, naming what is missing, when `skills` cannot serve this manner.
    pub fn check(self, skills: &Discovery) -> Result<()> {
        let method = skills.model.method();
        let missing = |what: &str| Err(Error::MissingTensors(format!("{what} (`{self}` assignment on a `{method}` checkpoint)")));
        match self {
            Manner::ThreeD if method != Method::ThreeD => missing("E3d/m*"),
            Manner::Hier if method != Method::Hier => missing(&format!("{TOP_NAME}, {BTM_NAME}, agg/*")),
            Manner::ThreeD | Manner::Hier if skills.grouper.is_none() => missing("grouper/actor/*"),
            Manner::Mixed if method == Method::Hier => missing("E3d/m*"),
            Manner::Rule if method != Method::ThreeD => missing("E3d/m*"),
            _ => Ok(()),
        }
    }
}

impl FromStr for Manner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(Self::ThreeD),
            "hier" => Ok(Self::Hier),
            "mixed" => Ok(Self::Mixed),
            "rule" => Ok(Self::Rule),
            _ => Err(Error::Config(format!("assignment manner must be 3d, hier, mixed or rule, got `{s}`"))),
        }
    }
}

impl fmt::Display for Manner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Manner::ThreeD => "3d",
            Manner::Hier => "hier",
            Manner::Mixed => "mixed",
            Manner::Rule => "rule",
        })
    }
}

/// Which code an agent executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodeRef {
    /// Row `row` of code `code` in the size-`size` 3D table.
    Joint { size: usize, code: usize, row: usize },
    /// Bottom code and, for the hierarchical scheme, the subgroup's top code.
    Hier { btm: usize, top: Option<usize> },
}

impl fmt::Display for CodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodeRef::Joint { size, code, row } => write!(f, "m{size}c{code}r{row}"),
            CodeRef::Hier { btm, top: Some(t) } => write!(f, "b{btm}t{t}"),
            CodeRef::Hier { btm, top: None } => write!(f, "b{btm}"),
        }
    }
}

/// A complete assignment: one code and one decoder conditioning row per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub partition: Partition,
    pub codes: Vec<CodeRef>,
    pub cond: Vec<Vec<f64>>,
    /// Subgroups whose size had no codebook and were split into singletons.
    pub fallbacks: usize,
}

fn check_embeddings(z: &[Vec<f64>], d: usize) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Structure("assignment over no agents".into()));
    }
    if let Some(bad) = z.iter().find(|r| r.len() != d) {
        return Err(Error::Structure(format!("embedding of width {} where the codebooks have {d}", bad.len())));
    }
    Ok(())
}

/// Quantizes each subgroup of `partition` against its size's table.
pub fn assign_3d_with(z: &[Vec<f64>], partition: &Partition, cb: &Codebook3D) -> Result<Assignment> {
    check_embeddings(z, cb.d)?;
    partition.check_size(z.len())?;
    let n = z.len();
    let mut codes = vec![CodeRef::Hier { btm: 0, top: None }; n];
    let mut cond = vec![Vec::new(); n];
    let mut subgroups = Vec::new();
    let mut fallbacks = 0;
    for g in partition.subgroups() {
        let m = g.len();
        if cb.table(m).is_ok() {
            let joint: Vec<f64> = g.iter().flat_map(|&i| z[i].iter().copied()).collect();
            let (c, _) = cb.nearest_code(&joint, m)?;
            let rows = cb.code_rows(m, c)?;
            for (j, &i) in g.iter().enumerate() {
                codes[i] = CodeRef::Joint { size: m, code: c, row: j };
                cond[i] = rows[j].clone();
            }
            subgroups.push(g.clone());
        } else {
            fallbacks += 1;
            for &i in g {
                let (c, _) = cb.nearest_code(&z[i], 1)?;
                codes[i] = CodeRef::Joint { size: 1, code: c, row: 0 };
                cond[i] = cb.code_rows(1, c)?.remove(0);
                subgroups.push(vec![i]);
            }
        }
    }
    Ok(Assignment {
        partition: Partition::new(subgroups, n)?,
        codes,
        cond,
        fallbacks,
    })
}

/// Greedy grouping followed by [`assign_3d_with`].
pub fn assign_3d(z: &[Vec<f64>], grouper: &Grouper, cb: &Codebook3D, ctx: &GroupingContext) -> Result<Assignment> {
    let partition = grouper.greedy_partition(ctx)?;
    assign_3d_with(z, &partition, cb)
}

/// Bottom code per agent from its own embedding, top code per subgroup
/// from the aggregated member embeddings.
pub fn assign_hier_with(
    z: &[Vec<f64>],
    partition: &Partition,
    agg: &Aggregator,
    agg_params: &ParameterSet,
    cb: &HierCodebooks,
) -> Result<Assignment> {
    let btm = cb.btm();
    let top = cb.top().ok_or_else(|| Error::MissingTensors(TOP_NAME.into()))?;
    check_embeddings(z, btm.cols())?;
    partition.check_size(z.len())?;
    let n = z.len();
    let b: Vec<usize> = z.iter().map(|zi| nearest(zi, btm.data(), btm.cols()).0).collect();
    let mut codes = vec![CodeRef::Hier { btm: 0, top: None }; n];
    let mut cond = vec![Vec::new(); n];
    for g in partition.subgroups() {
        let members: Vec<Vec<f64>> = g.iter().map(|&i| z[i].clone()).collect();
        let z_top = agg.aggregate_top(agg_params, &members)?;
        if z_top.len() != top.cols() {
            return Err(Error::Structure(format!(
                "aggregator emits {} values, top codes have {}",
                z_top.len(),
                top.cols()
            )));
        }
        let (t, _) = nearest(&z_top, top.data(), top.cols());
        for &i in g {
            codes[i] = CodeRef::Hier { btm: b[i], top: Some(t) };
            let mut row = btm.row(b[i]).to_vec();
            row.extend_from_slice(top.row(t));
            cond[i] = row;
        }
    }
    Ok(Assignment {
        partition: partition.clone(),
        codes,
        cond,
        fallbacks: 0,
    })
}

/// Greedy grouping followed by [`assign_hier_with`].
pub fn assign_hier(
    z: &[Vec<f64>],
    grouper: &Grouper,
    agg: &Aggregator,
    agg_params: &ParameterSet,
    cb: &HierCodebooks,
    ctx: &GroupingContext,
) -> Result<Assignment> {
    let partition = grouper.greedy_partition(ctx)?;
    assign_hier_with(z, &partition, agg, agg_params, cb)
}

/// Distinct single-agent rows, in (size, code, row) order.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPool {
    pub d: usize,
    pub rows: Vec<(CodeRef, Vec<f64>)>,
}

impl RowPool {
    /// Every row of every code of every enabled size; exact duplicates
    /// keep their first occurrence.
    pub fn from_3d(cb: &Codebook3D) -> Result<Self> {
        let mut pool = Self { d: cb.d, rows: Vec::new() };
        for m in cb.sizes() {
            for c in 0..cb.k {
                for (r, row) in cb.code_rows(m, c)?.into_iter().enumerate() {
                    pool.push(CodeRef::Joint { size: m, code: c, row: r }, row);
                }
            }
        }
        Ok(pool)
    }

    /// Rows of a single-agent table such as the bottom codebook.
    pub fn from_table(table: &Tensor) -> Self {
        let mut pool = Self {
            d: table.cols(),
            rows: Vec::new(),
        };
        for b in 0..table.rows() {
            pool.push(CodeRef::Hier { btm: b, top: None }, table.row(b).to_vec());
        }
        pool
    }

    fn push(&mut self, code: CodeRef, row: Vec<f64>) {
        if !self.rows.iter().any(|(_, r)| *r == row) {
            self.rows.push((code, row));
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Position of the nearest row; ties go to the earliest.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, (_, row)) in self.rows.iter().enumerate() {
            let d = squared_distance(z, row);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

/// Every agent independently takes its nearest pooled row.
pub fn assign_mixed(z: &[Vec<f64>], pool: &RowPool) -> Result<Assignment> {
    if pool.is_empty() {
        return Err(Error::MissingTensors("single-agent code rows".into()));
    }
    check_embeddings(z, pool.d)?;
    let (codes, cond) = z
        .iter()
        .map(|zi| {
            let (code, row) = &pool.rows[pool.nearest(zi).0];
            (*code, row.clone())
        })
        .unzip();
    Ok(Assignment {
        partition: Partition::singletons(z.len()),
        codes,
        cond,
        fallbacks: 0,
    })
}

/// One (subgroup, code) pair considered by [`assign_rule`], ordered by
/// normalized distance, then size, then members, then code index.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleCandidate {
    pub key: f64,
    pub members: Vec<usize>,
    pub code: usize,
}

impl Eq for RuleCandidate {}

impl Ord for RuleCandidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key
            .total_cmp(&other.key)
            .then(self.members.len().cmp(&other.members.len()))
            .then_with(|| self.members.cmp(&other.members))
            .then(self.code.cmp(&other.code))
    }
}

impl PartialOrd for RuleCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All `m`-element subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if m == 0 || m > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        out.push(idx.clone());
        let Some(pos) = (0..m).rev().find(|&p| idx[p] < n - m + p) else {
            return out;
        };
        idx[pos] += 1;
        for q in pos + 1..m {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// Every (subgroup over an enabled size, code) pair with its key
/// `||z_joint - e||^2 / m`.
pub fn rule_candidates(z: &[Vec<f64>], cb: &Codebook3D) -> Result<Vec<RuleCandidate>> {
    check_embeddings(z, cb.d)?;
    let mut out = Vec::new();
    for m in cb.sizes().into_iter().filter(|&m| m <= z.len()) {
        let table = cb.table(m)?;
        let width = m * cb.d;
        for members in combinations(z.len(), m) {
            let joint: Vec<f64> = members.iter().flat_map(|&i| z[i].iter().copied()).collect();
            for (code, e) in table.data().chunks_exact(width).enumerate() {
                out.push(RuleCandidate {
                    key: squared_distance(&joint, e) / m as f64,
                    members: members.clone(),
                    code,
                });
            }
        }
    }
    Ok(out)
}

/// Greedy multi-agent matching: repeatedly take the closest remaining
/// (subgroup, code) pair whose agents are all still unassigned.
pub fn assign_rule(z: &[Vec<f64>], cb: &Codebook3D) -> Result<Assignment> {
    let n = z.len();
    let mut heap: BinaryHeap<Reverse<RuleCandidate>> = rule_candidates(z, cb)?.into_iter().map(Reverse).collect();
    let mut taken = vec![false; n];
    let mut left = n;
    let mut codes = vec![CodeRef::Hier { btm: 0, top: None }; n];
    let mut cond = vec![Vec::new(); n];
    let mut subgroups = Vec::new();
    while left > 0 {
        let Some(Reverse(c)) = heap.pop() else {
            return Err(Error::Infeasible(format!(
                "{left} agents left unassigned; enabled sizes {:?} cannot cover them",
                cb.sizes()
            )));
        };
        if c.members.iter().any(|&i| taken[i]) {
            continue;
        }
        let m = c.members.len();
        let rows = cb.code_rows(m, c.code)?;
        for (j, &i) in c.members.iter().enumerate() {
            taken[i] = true;
            codes[i] = CodeRef::Joint {
                size: m,
                code: c.code,
                row: j,
            };
            cond[i] = rows[j].clone();
        }
        left -= m;
        subgroups.push(c.members);
    }
    let partition = Partition::new(subgroups, n)?;
    debug_assert_eq!(partition.n_agents(), n);
    Ok(Assignment {
        partition,
        codes,
        cond,
        fallbacks: 0,
    })
}
