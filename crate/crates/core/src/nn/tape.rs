//! Reverse-mode differentiation over a Wengert list of matrix values.
//!
//! Ops never fail eagerly. The first structural or numeric problem is
//! recorded on the tape (naming the node id) and surfaced by
//! [`Tape::check`] or [`Tape::backward`]; later ops keep producing
//! placeholder values so graph-building code stays linear.

use std::collections::BTreeMap;

use super::params::ParameterSet;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param {
        name: String,
        shape: Vec<usize>,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    StopGrad,
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<usize>,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SquaredNorm(_) => "squared_norm",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
            Op::StopGrad => "stop_grad",
            Op::Clamp(..) => "clamp",
            Op::Min(..) => "min",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Parameter name to tape handle.
pub type Bound = BTreeMap<String, Var>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    error: Option<Error>,
    // Stop-gradient outputs are constants. When replaying, they are taken
    // from a previous evaluation instead of being recomputed.
    replay: Option<Vec<Vec<f64>>>,
    replay_pos: usize,
    recorded: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose stop-gradient nodes emit the given frozen values in order.
    pub fn replaying(frozen: Vec<Vec<f64>>) -> Self {
        Self {
            replay: Some(frozen),
            ..Self::default()
        }
    }

    /// Values emitted by stop-gradient nodes so far, in creation order.
    pub fn stop_grad_values(&self) -> &[Vec<f64>] {
        &self.recorded
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn error(&self) -> Option<&Error> {
        self.error.as_ref()
    }

    pub fn check(&self) -> Result<()> {
        match &self.error {
            None => Ok(()),
            Some(Error::Shape { node, op, detail }) => Err(Error::Shape {
                node: *node,
                op,
                detail: detail.clone(),
            }),
            Some(Error::NonFinite { node, op }) => Err(Error::NonFinite { node: *node, op }),
            Some(other) => Err(Error::Structure(other.to_string())),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn row(&self, v: Var, i: usize) -> &[f64] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("tape node shape")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        let id = self.nodes.len();
        if self.error.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.error = Some(Error::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node { rows, cols, value, op });
        Var(id)
    }

    fn fail(&mut self, op: &'static str, rows: usize, cols: usize, detail: String) -> Var {
        let id = self.nodes.len();
        if self.error.is_none() {
            self.error = Some(Error::Shape { node: id, op, detail });
        }
        self.nodes.push(Node {
            rows: rows.max(1),
            cols: cols.max(1),
            value: vec![0.0; rows.max(1) * cols.max(1)],
            op: Op::Input,
        });
        Var(id)
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Input)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return self.fail("input", rows, cols, format!("{rows}x{cols} from {} values", data.len()));
        }
        self.push(rows, cols, data, Op::Input)
    }

    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            Op::Param {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            },
        )
    }

    /// Places every tensor of `set` on the tape as a differentiable leaf.
    pub fn bind(&mut self, set: &ParameterSet) -> Bound {
        set.iter().map(|(k, t)| (k.clone(), self.param(k, t))).collect()
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (r, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        if wi != i {
            return self.fail("affine", r, o, format!("input {r}x{i} against weight {wi}x{o}"));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != (1, o) {
                return self.fail("affine", r, o, format!("bias {bs:?} against width {o}"));
            }
        }
        let mut out = vec![0.0; r * o];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(r, i, o, self.value(x), false, self.value(w), false, &mut out, 1.0);
        self.push(r, o, out, Op::Affine { x, w, b })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(r, c, out, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Adds a constant matrix of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Var {
        let (r, cols) = self.shape(x);
        if c.len() != r * cols {
            return self.fail("add_const", r, cols, format!("{} constants for {r}x{cols}", c.len()));
        }
        let out = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        self.push(r, cols, out, Op::AddConst(x))
    }

    pub fn stop_grad(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let value = match &self.replay {
            Some(frozen) => match frozen.get(self.replay_pos) {
                Some(v) if v.len() == r * c => v.clone(),
                _ => return self.fail("stop_grad", r, c, "replayed value missing or mis-sized".into()),
            },
            None => self.value(x).to_vec(),
        };
        self.replay_pos += 1;
        self.recorded.push(value.clone());
        self.push(r, c, value, Op::StopGrad)
    }

    fn rowwise(&mut self, x: Var, log: bool) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lz = m + z.ln();
            for v in row.iter_mut() {
                *v = if log { *v - lz } else { (*v - lz).exp() };
            }
        }
        let op = if log { Op::LogSoftmax(x) } else { Op::Softmax(x) };
        self.push(r, c, out, op)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, false)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            let name = op.name();
            return self.fail(name, sa.0, sa.1, format!("{sa:?} vs {sb:?}"));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(sa.0, sa.1, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Min(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![s], Op::Mean(x))
    }

    pub fn squared_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        self.push(1, 1, vec![s], Op::SquaredNorm(x))
    }

    /// Sums each row to a single column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).chunks(c).map(|row| row.iter().sum()).collect();
        self.push(r, 1, out, Op::RowSum(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.is_empty() {
            return self.fail("concat_cols", 1, 1, "no parts".into());
        }
        let r = self.shape(parts[0]).0;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).0 != r) {
            let got = self.shape(*bad).0;
            return self.fail("concat_cols", r, 1, format!("row count {got} vs {r}"));
        }
        let c: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.row(*p, i));
            }
        }
        self.push(r, c, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.is_empty() {
            return self.fail("concat_rows", 1, 1, "no parts".into());
        }
        let c = self.shape(parts[0]).1;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).1 != c) {
            let got = self.shape(*bad).1;
            return self.fail("concat_rows", 1, c, format!("column count {got} vs {c}"));
        }
        let r: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        self.push(r, c, out, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects (and possibly repeats) rows by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        if idx.is_empty() {
            return self.fail("gather_rows", 1, c, "empty index list".into());
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return self.fail("gather_rows", idx.len(), c, format!("row {bad} of {r}"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(x, i));
        }
        self.push(idx.len(), c, out, Op::GatherRows(x, idx.to_vec()))
    }

    /// Picks one column per row, producing an `r x 1` column.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        if cols.len() != r {
            return self.fail("pick", r, 1, format!("{} picks for {r} rows", cols.len()));
        }
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            return self.fail("pick", r, 1, format!("column {bad} of {c}"));
        }
        let out = cols.iter().enumerate().map(|(i, &j)| self.value(x)[i * c + j]).collect();
        self.push(r, 1, out, Op::Pick(x, cols.to_vec()))
    }

    /// Masked multi-head attention in a single block.
    ///
    /// `q` holds one query row per group, `k`/`v` one row per key; key `j`
    /// is visible only to the query of `groups[j]`. Heads split the columns
    /// of `q`/`k` and of `v` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: &[usize], heads: usize) -> Var {
        let (g, dq) = self.shape(q);
        let (nk, dk) = self.shape(k);
        let (nv, dv) = self.shape(v);
        if dq != dk || nk != nv || groups.len() != nk || heads == 0 || dk % heads != 0 || dv % heads != 0 {
            return self.fail(
                "attention",
                g,
                dv,
                format!("q {g}x{dq}, k {nk}x{dk}, v {nv}x{dv}, {} groups, {heads} heads", groups.len()),
            );
        }
        let mut count = vec![0usize; g];
        for &gi in groups {
            if gi >= g {
                return self.fail("attention", g, dv, format!("group {gi} of {g}"));
            }
            count[gi] += 1;
        }
        if let Some(empty) = count.iter().position(|&c| c == 0) {
            return self.fail("attention", g, dv, format!("group {empty} has no members"));
        }
        let hk = dk / heads;
        let hv = dv / heads;
        let scale = 1.0 / (hk as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![0.0; nk * heads];
        let mut out = vec![0.0; g * dv];
        for h in 0..heads {
            let mut maxes = vec![f64::NEG_INFINITY; g];
            for j in 0..nk {
                let gi = groups[j];
                let s: f64 = (0..hk).map(|c| qv[gi * dk + h * hk + c] * kv[j * dk + h * hk + c]).sum::<f64>() * scale;
                probs[j * heads + h] = s;
                maxes[gi] = maxes[gi].max(s);
            }
            let mut norms = vec![0.0; g];
            for j in 0..nk {
                let e = (probs[j * heads + h] - maxes[groups[j]]).exp();
                probs[j * heads + h] = e;
                norms[groups[j]] += e;
            }
            for j in 0..nk {
                let gi = groups[j];
                let p = probs[j * heads + h] / norms[gi];
                probs[j * heads + h] = p;
                for c in 0..hv {
                    out[gi * dv + h * hv + c] += p * vv[j * dv + h * hv + c];
                }
            }
        }
        self.push(
            g,
            dv,
            out,
            Op::Attention {
                q,
                k,
                v,
                groups: groups.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape {
                node: loss.0,
                op: self.nodes[loss.0].op.name(),
                detail: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param { name, shape } => Some((name.clone(), (Var(i), shape.clone()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Input | Op::Param { .. } | Op::StopGrad => {}
            Op::Affine { x, w, b } => {
                let (_, i) = self.shape(*x);
                gemm(r, c, i, g, false, self.value(*w), true, acc(grads, *x, r * i), 1.0);
                gemm(i, r, c, self.value(*x), true, g, false, acc(grads, *w, i * c), 1.0);
                if let Some(b) = b {
                    let gb = acc(grads, *b, c);
                    for row in g.chunks(c) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = acc(grads, *x, g.len());
                for ((a, gi), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *a += gi * (1.0 - y * y);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = acc(grads, *x, g.len());
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *a += gi;
                    }
                }
            }
            Op::Exp(x) => {
                let gx = acc(grads, *x, g.len());
                for ((a, gi), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *a += gi * y;
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, g.len());
                for (a, gi) in gx.iter_mut().zip(g) {
                    *a += gi * s;
                }
            }
            Op::AddConst(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let gx = acc(grads, *x, g.len());
                for ((a, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi >= lo && xi <= hi {
                        *a += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let gx = acc(grads, *x, g.len());
                for ((grow, yrow), arow) in g.chunks(c).zip(node.value.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((a, gi), y) in arow.iter_mut().zip(grow).zip(yrow) {
                        *a += y * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let gx = acc(grads, *x, g.len());
                for ((grow, yrow), arow) in g.chunks(c).zip(node.value.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = grow.iter().sum();
                    for ((a, gi), y) in arow.iter_mut().zip(grow).zip(yrow) {
                        *a += gi - y.exp() * total;
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                let gb = acc(grads, *b, g.len());
                for (x, gi) in gb.iter_mut().zip(g) {
                    *x -= gi;
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b);
                let ga = acc(grads, *a, g.len());
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                    *x += gi * y;
                }
                let av = self.value(*a);
                let gb = acc(grads, *b, g.len());
                for ((x, gi), y) in gb.iter_mut().zip(g).zip(av) {
                    *x += gi * y;
                }
            }
            Op::Min(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // Ties route the gradient to the first operand.
                let pick_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                let ga = acc(grads, *a, g.len());
                for ((x, gi), p) in ga.iter_mut().zip(g).zip(&pick_a) {
                    if *p {
                        *x += gi;
                    }
                }
                let gb = acc(grads, *b, g.len());
                for ((x, gi), p) in gb.iter_mut().zip(g).zip(&pick_a) {
                    if !*p {
                        *x += gi;
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                for a in acc(grads, *x, n).iter_mut() {
                    *a += g[0];
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g[0] / n as f64;
                for a in acc(grads, *x, n).iter_mut() {
                    *a += s;
                }
            }
            Op::SquaredNorm(x) => {
                let xv = self.value(*x);
                let gx = acc(grads, *x, xv.len());
                for (a, v) in gx.iter_mut().zip(xv) {
                    *a += 2.0 * v * g[0];
                }
            }
            Op::RowSum(x) => {
                let (xr, xc) = self.shape(*x);
                let gx = acc(grads, *x, xr * xc);
                for (row, gi) in gx.chunks_mut(xc).zip(g) {
                    for a in row.iter_mut() {
                        *a += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    let gp = acc(grads, *p, pr * pc);
                    for i in 0..pr {
                        for j in 0..pc {
                            gp[i * pc + j] += g[i * c + offset + j];
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    add_into(acc(grads, *p, n), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let n = self.value(*x).len();
                let gx = acc(grads, *x, n);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
            }
            Op::Pick(x, cols) => {
                let (xr, xc) = self.shape(*x);
                let gx = acc(grads, *x, xr * xc);
                for (i, &j) in cols.iter().enumerate() {
                    gx[i * xc + j] += g[i];
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let heads = *heads;
                let (gq, dk) = self.shape(*q);
                let (nk, dv) = self.shape(*v);
                let hk = dk / heads;
                let hv = dv / heads;
                let scale = 1.0 / (hk as f64).sqrt();
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let mut gq_buf = vec![0.0; gq * dk];
                let mut gk_buf = vec![0.0; nk * dk];
                let mut gv_buf = vec![0.0; nk * dv];
                for h in 0..heads {
                    // dp_j = <g_out, v_j> within the head
                    let mut dp = vec![0.0; nk];
                    let mut weighted = vec![0.0; gq];
                    for j in 0..nk {
                        let gi = groups[j];
                        let p = probs[j * heads + h];
                        let mut d = 0.0;
                        for cc in 0..hv {
                            let go = g[gi * dv + h * hv + cc];
                            gv_buf[j * dv + h * hv + cc] += p * go;
                            d += go * vv[j * dv + h * hv + cc];
                        }
                        dp[j] = d;
                        weighted[gi] += p * d;
                    }
                    for j in 0..nk {
                        let gi = groups[j];
                        let ds = probs[j * heads + h] * (dp[j] - weighted[gi]) * scale;
                        for cc in 0..hk {
                            gq_buf[gi * dk + h * hk + cc] += ds * kv[j * dk + h * hk + cc];
                            gk_buf[j * dk + h * hk + cc] += ds * qv[gi * dk + h * hk + cc];
                        }
                    }
                }
                add_into(acc(grads, *q, gq * dk), &gq_buf);
                add_into(acc(grads, *k, nk * dk), &gk_buf);
                add_into(acc(grads, *v, nk * dv), &gv_buf);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, (Var, Vec<usize>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node, `None` when the node
    /// does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient tensor for the named parameter, zero when unreached.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let (var, shape) = self.params.get(name)?;
        let data = match self.wrt(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; shape.iter().product()],
        };
        Some(Tensor::new(shape.clone(), data).expect("param gradient shape"))
    }

    /// Gradients shaped like `set` (parameters absent from the tape get zeros).
    pub fn for_set(&self, set: &ParameterSet) -> ParameterSet {
        let mut out = ParameterSet::new(set.role());
        for (name, t) in set.iter() {
            let g = self.param(name).unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g);
        }
        out
    }
}
