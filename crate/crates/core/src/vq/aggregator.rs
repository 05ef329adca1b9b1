use crate::error::{Error, Result};
use crate::nn::{Bound, ParameterSet, Tape, Var};
use crate::rng::Rng;

/// Attention pooling of a subgroup's bottom embeddings into one top
/// embedding: a learned query attends over projected members.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub d: usize,
    pub width: usize,
    pub d_top: usize,
    pub heads: usize,
}

pub const AGG_QUERY: &str = "agg/query";
pub const AGG_KEY: &str = "agg/wk";
pub const AGG_VALUE: &str = "agg/wv";
pub const AGG_OUT_W: &str = "agg/wo";
pub const AGG_OUT_B: &str = "agg/bo";

impl Aggregator {
    pub fn new(d: usize, width: usize, d_top: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide projection width {width}")));
        }
        Ok(Self { d, width, d_top, heads })
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut Rng) {
        let (d, w) = (self.d as f64, self.width as f64);
        params.insert_uniform(AGG_QUERY, &[1, self.width], 1.0, rng);
        params.insert_uniform(AGG_KEY, &[self.d, self.width], 1.0 / d.sqrt(), rng);
        params.insert_uniform(AGG_VALUE, &[self.d, self.width], 1.0 / d.sqrt(), rng);
        params.insert_uniform(AGG_OUT_W, &[self.width, self.d_top], 1.0 / w.sqrt(), rng);
        params.insert_uniform(AGG_OUT_B, &[1, self.d_top], 1.0 / w.sqrt(), rng);
    }

    /// `z` holds one bottom embedding per row; `groups[j]` is the subgroup
    /// of row `j`. Returns one `d_top` row per subgroup.
    pub fn graph(&self, tape: &mut Tape, bound: &Bound, z: Var, groups: &[usize], n_groups: usize) -> Var {
        let q = tape.gather_rows(bound[AGG_QUERY], &vec![0; n_groups]);
        let k = tape.affine(z, bound[AGG_KEY], None);
        let v = tape.affine(z, bound[AGG_VALUE], None);
        let pooled = tape.attention(q, k, v, groups, self.heads);
        tape.affine(pooled, bound[AGG_OUT_W], Some(bound[AGG_OUT_B]))
    }

    pub fn aggregate_top(&self, params: &ParameterSet, members: &[Vec<f64>]) -> Result<Vec<f64>> {
        if members.is_empty() {
            return Err(Error::Structure("aggregate_top over an empty subgroup".into()));
        }
        if let Some(bad) = members.iter().find(|m| m.len() != self.d) {
            return Err(Error::Structure(format!("member width {} != {}", bad.len(), self.d)));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        let z = tape.matrix(members.len(), self.d, members.concat());
        let out = self.graph(&mut tape, &bound, z, &vec![0; members.len()], 1);
        tape.check()?;
        Ok(tape.value(out).to_vec())
    }
}
