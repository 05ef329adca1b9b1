use rand::Rng;

use super::params::ParameterSet;
use super::tape::{Bound, Tape, Var};
use super::tensor::gemm;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected stack; hidden layers use `activation`, the output is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
    activation: Activation,
    output_bias: bool,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: &[usize], activation: Activation, output_bias: bool) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Self {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
            activation,
            output_bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Layer widths from input to output.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn has_bias(&self, layer: usize) -> bool {
        layer + 1 < self.layers() || self.output_bias
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}/l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}/l{layer}.b", self.prefix)
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) {
        for l in 0..self.layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (i as f64).sqrt();
            params.insert_uniform(&self.weight_name(l), &[i, o], bound, rng);
            if self.has_bias(l) {
                params.insert_uniform(&self.bias_name(l), &[1, o], bound, rng);
            }
        }
    }

    /// Multiplies the output layer by `s` (used for small-logit policy heads).
    pub fn scale_output(&self, params: &mut ParameterSet, s: f64) {
        let l = self.layers() - 1;
        for name in [self.weight_name(l), self.bias_name(l)] {
            if let Some(t) = params.get_mut(&name) {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        for l in 0..self.layers() {
            let w = bound[&self.weight_name(l)];
            let b = self.has_bias(l).then(|| bound[&self.bias_name(l)]);
            h = tape.affine(h, w, b);
            if l + 1 < self.layers() {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        h
    }

    /// Tape-free forward pass over `rows` stacked inputs.
    pub fn infer(&self, params: &ParameterSet, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for l in 0..self.layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = params.require(&self.weight_name(l))?;
            let mut out = vec![0.0; rows * o];
            if self.has_bias(l) {
                let b = params.require(&self.bias_name(l))?;
                for row in out.chunks_mut(o) {
                    row.copy_from_slice(b.data());
                }
            }
            gemm(rows, i, o, &h, false, w.data(), false, &mut out, 1.0);
            if l + 1 < self.layers() {
                match self.activation {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            h = out;
        }
        Ok(h)
    }
}

/// In-place row-wise log-softmax.
pub fn log_softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lz);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Role, Tensor};
    use crate::rng::stream;

    #[test]
    fn infer_matches_tape_forward() {
        let mlp = Mlp::new("m", &[5, 7, 3], Activation::Tanh, true);
        let mut p = ParameterSet::new(Role::Decoder);
        mlp.init(&mut p, &mut stream(3, "init"));
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).sin()).collect();
        let direct = mlp.infer(&p, &x, 2).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&p);
        let xv = tape.input(&Tensor::matrix(2, 5, x).unwrap());
        let y = mlp.forward(&mut tape, &b, xv);
        assert_eq!(tape.value(y), direct.as_slice());
    }

    #[test]
    fn no_output_bias_is_linear_at_zero() {
        let mlp = Mlp::new("e", &[4, 6, 2], Activation::Tanh, false);
        let mut p = ParameterSet::new(Role::Encoder);
        mlp.init(&mut p, &mut stream(1, "init"));
        assert!(p.get("e/l1.b").is_none());
        let y = mlp.infer(&p, &[0.0; 4], 1).unwrap();
        // the hidden layer still has a bias, the output does not
        assert_eq!(y.len(), 2);
    }
}
