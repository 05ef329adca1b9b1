//! Whole-graph evaluation and the central-difference gradient oracle.

use super::params::ParameterSet;
use super::tape::{Bound, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// What a graph closure hands back: the scalar loss and any extra outputs.
#[derive(Debug, Clone)]
pub struct GraphOutputs {
    pub loss: Var,
    pub outputs: Vec<Var>,
}

impl From<Var> for GraphOutputs {
    fn from(loss: Var) -> Self {
        Self { loss, outputs: vec![] }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub outputs: Vec<Tensor>,
    pub grads: ParameterSet,
}

/// Evaluates `graph` over `params` and `inputs` and differentiates its loss.
pub fn evaluate_with_gradients<F, O>(params: &ParameterSet, inputs: &[Tensor], graph: F) -> Result<Evaluation>
where
    F: FnOnce(&mut Tape, &Bound, &[Var]) -> O,
    O: Into<GraphOutputs>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let ins: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = graph(&mut tape, &bound, &ins).into();
    let grads = tape.backward(out.loss)?;
    Ok(Evaluation {
        loss: tape.scalar(out.loss),
        outputs: out.outputs.iter().map(|v| tape.to_tensor(*v)).collect(),
        grads: grads.for_set(params),
    })
}

/// Largest per-tensor relative error between reverse-mode gradients and
/// central differences.
///
/// Each parameter tensor is compared as a whole:
/// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)` in the L2
/// norm, falling back to the absolute error when both norms are below
/// `1e-12`. Stop-gradient outputs are held at their unperturbed values,
/// which is what makes straight-through paths checkable.
pub fn finite_diff_check<F>(params: &ParameterSet, inputs: &[Tensor], eps: f64, graph: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Var,
{
    Ok(finite_diff_report(params, inputs, eps, graph)?
        .into_iter()
        .map(|t| t.error)
        .fold(0.0, f64::max))
}

/// Per-tensor outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub error: f64,
    pub analytic_norm: f64,
}

/// [`finite_diff_check`] with the error of every tensor.
pub fn finite_diff_report<F>(params: &ParameterSet, inputs: &[Tensor], eps: f64, graph: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Var,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-3]")));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let ins: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = graph(&mut tape, &bound, &ins);
    let analytic = tape.backward(loss)?.for_set(params);
    let frozen = tape.stop_grad_values().to_vec();

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::replaying(frozen.clone());
        let b = t.bind(p);
        let ins: Vec<Var> = inputs.iter().map(|x| t.input(x)).collect();
        let l = graph(&mut t, &b, &ins);
        t.check()?;
        Ok(t.scalar(l))
    };

    let mut report = Vec::new();
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let mut numeric = vec![0.0; tensor.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let base = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = base + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = base - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = base;
            *slot = (up - down) / (2.0 * eps);
        }
        let a = analytic.get(name).unwrap().data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let err = if denom < 1e-12 { diff } else { diff / denom };
        report.push(TensorCheck {
            name: name.clone(),
            error: err,
            analytic_norm: na,
        });
    }
    Ok(report)
}
