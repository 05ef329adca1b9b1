use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{squared_distance, Checkpoint, ParameterSet, Role, Tensor};
use crate::rng::Rng;

/// Nearest row of a row-major `table` (rows of `width`) by squared
/// Euclidean distance; ties go to the lowest index.
pub fn nearest(query: &[f64], table: &[f64], width: usize) -> (usize, f64) {
    debug_assert_eq!(query.len(), width);
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.chunks_exact(width).enumerate() {
        let d = squared_distance(query, row);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// One quantized vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub index: usize,
    pub code: Vec<f64>,
    /// `||sg(z) - e||^2`
    pub vq_loss: f64,
    /// `||z - sg(e)||^2` (unweighted)
    pub commit_loss: f64,
}

/// Nearest code of a 2-D table `[k, width]` (or any table whose last
/// extent equals `z.len()`).
pub fn quantize(z: &[f64], table: &Tensor) -> Result<Quantized> {
    if table.cols() != z.len() {
        return Err(Error::Structure(format!(
            "query width {} against codes of width {}",
            z.len(),
            table.cols()
        )));
    }
    let (index, dist) = nearest(z, table.data(), z.len());
    Ok(Quantized {
        index,
        code: table.row(index).to_vec(),
        vq_loss: dist,
        commit_loss: dist,
    })
}

/// Quantization of one subgroup against its size's 3D codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub index: usize,
    /// The chosen code's rows, one per member in index order.
    pub rows: Vec<Vec<f64>>,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Exponential moving average of code usage frequencies, per table.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageTracker {
    pub decay: f64,
    ema: BTreeMap<String, Vec<f64>>,
}

impl UsageTracker {
    pub fn new(decay: f64) -> Self {
        Self { decay, ema: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, k: usize) {
        self.ema.insert(name.to_string(), vec![1.0 / k as f64; k]);
    }

    /// Folds one step's selection counts into the average. Tables with no
    /// selections this step are left untouched.
    pub fn record(&mut self, name: &str, counts: &[usize]) {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return;
        }
        if let Some(ema) = self.ema.get_mut(name) {
            for (u, &c) in ema.iter_mut().zip(counts) {
                *u = self.decay * *u + (1.0 - self.decay) * c as f64 / total as f64;
            }
        }
    }

    pub fn usage(&self, name: &str) -> Option<&[f64]> {
        self.ema.get(name).map(Vec::as_slice)
    }

    /// Codes whose usage fell below `fraction` of the uniform rate.
    pub fn dead(&self, name: &str, fraction: f64) -> Vec<usize> {
        match self.ema.get(name) {
            Some(ema) => {
                let floor = fraction / ema.len() as f64;
                ema.iter().enumerate().filter(|(_, u)| **u < floor).map(|(i, _)| i).collect()
            }
            None => vec![],
        }
    }

    pub fn revive(&mut self, name: &str, code: usize) {
        if let Some(ema) = self.ema.get_mut(name) {
            ema[code] = 1.0 / ema.len() as f64;
        }
    }
}

pub fn table_name_3d(m: usize) -> String {
    format!("E3d/m{m}")
}

pub const BTM_NAME: &str = "Ehier/btm";
pub const TOP_NAME: &str = "Ehier/top";

/// Per-size tables `E_m` of `k` codes, each an `m x d` stack of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook3D {
    pub d: usize,
    pub k: usize,
    pub tables: ParameterSet,
    pub usage: UsageTracker,
}

impl Codebook3D {
    pub fn new(d: usize, k: usize, sizes: &[usize], rng: &mut Rng) -> Self {
        let mut tables = ParameterSet::new(Role::Codebook);
        let mut usage = UsageTracker::new(0.9);
        let bound = 1.0 / (d as f64).sqrt();
        for &m in sizes {
            tables.insert_uniform(&table_name_3d(m), &[k, m, d], bound, rng);
            usage.register(&table_name_3d(m), k);
        }
        Self { d, k, tables, usage }
    }

    pub fn from_tables(tables: ParameterSet) -> Result<Self> {
        let mut d = None;
        let mut k = None;
        let mut usage = UsageTracker::new(0.9);
        for (name, t) in tables.iter() {
            let m: usize = name
                .strip_prefix("E3d/m")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Structure(format!("unexpected codebook tensor `{name}`")))?;
            if t.shape().len() != 3 || t.shape()[1] != m {
                return Err(Error::Structure(format!("codebook `{name}` has shape {:?}", t.shape())));
            }
            if d.get_or_insert(t.shape()[2]) != &t.shape()[2] || k.get_or_insert(t.shape()[0]) != &t.shape()[0] {
                return Err(Error::Structure("3D codebooks disagree on k or d".into()));
            }
            usage.register(name, t.shape()[0]);
        }
        match (d, k) {
            (Some(d), Some(k)) => Ok(Self { d, k, tables, usage }),
            _ => Err(Error::MissingTensors("E3d/m*".into())),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tables = ckpt.extract("E3d", Role::Codebook).map_err(|_| Error::MissingTensors("E3d/m*".into()))?;
        Self::from_tables(tables)
    }

    /// Enabled subgroup sizes in ascending order.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.tables.iter().map(|(_, t)| t.shape()[1]).collect();
        s.sort_unstable();
        s
    }

    pub fn table(&self, m: usize) -> Result<&Tensor> {
        self.tables
            .get(&table_name_3d(m))
            .ok_or_else(|| Error::Config(format!("subgroup size {m} has no codebook (enabled: {:?})", self.sizes())))
    }

    /// Rows of code `c` of `E_m`.
    pub fn code_rows(&self, m: usize, c: usize) -> Result<Vec<Vec<f64>>> {
        let t = self.table(m)?;
        Ok(t.data()[c * m * self.d..(c + 1) * m * self.d]
            .chunks_exact(self.d)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Frobenius-nearest code of `E_m` to the stacked `m x d` query.
    pub fn nearest_code(&self, z_joint: &[f64], m: usize) -> Result<(usize, f64)> {
        let t = self.table(m)?;
        if z_joint.len() != m * self.d {
            return Err(Error::Structure(format!(
                "joint embedding of {} values for m={m}, d={}",
                z_joint.len(),
                self.d
            )));
        }
        Ok(nearest(z_joint, t.data(), m * self.d))
    }

    pub fn quantize_subgroup(&mut self, z_joint: &[f64], m: usize) -> Result<QuantizationResult> {
        let (index, dist) = self.nearest_code(z_joint, m)?;
        let mut counts = vec![0; self.k];
        counts[index] = 1;
        self.usage.record(&table_name_3d(m), &counts);
        Ok(QuantizationResult {
            index,
            rows: self.code_rows(m, index)?,
            codebook_loss: dist,
            commitment_loss: dist,
        })
    }
}

/// Bottom (per-agent) and optional top (per-subgroup) tables.
#[derive(Debug, Clone, PartialEq)]
pub struct HierCodebooks {
    pub tables: ParameterSet,
    pub usage: UsageTracker,
}

impl HierCodebooks {
    pub fn new(d: usize, k_btm: usize, top: Option<(usize, usize)>, rng: &mut Rng) -> Self {
        let mut tables = ParameterSet::new(Role::Codebook);
        let mut usage = UsageTracker::new(0.9);
        tables.insert_uniform(BTM_NAME, &[k_btm, d], 1.0 / (d as f64).sqrt(), rng);
        usage.register(BTM_NAME, k_btm);
        if let Some((d_top, k_top)) = top {
            tables.insert_uniform(TOP_NAME, &[k_top, d_top], 1.0 / (d_top as f64).sqrt(), rng);
            usage.register(TOP_NAME, k_top);
        }
        Self { tables, usage }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tables = ckpt
            .extract("Ehier", Role::Codebook)
            .map_err(|_| Error::MissingTensors(BTM_NAME.into()))?;
        let btm = tables.get(BTM_NAME).ok_or_else(|| Error::MissingTensors(BTM_NAME.into()))?;
        let mut usage = UsageTracker::new(0.9);
        usage.register(BTM_NAME, btm.rows());
        if let Some(top) = tables.get(TOP_NAME) {
            usage.register(TOP_NAME, top.rows());
        }
        Ok(Self { tables, usage })
    }

    pub fn btm(&self) -> &Tensor {
        self.tables.get(BTM_NAME).expect("bottom codebook")
    }

    pub fn top(&self) -> Option<&Tensor> {
        self.tables.get(TOP_NAME)
    }
}
