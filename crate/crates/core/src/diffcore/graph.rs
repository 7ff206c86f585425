use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named input tensors bound into a graph.
pub type Inputs = BTreeMap<String, Tensor>;

/// A computation description: records its forward pass onto a tape and
/// names the outputs it exposes.
pub trait Graph {
    fn build(&self, tape: &mut Tape<'_>) -> Result<Vec<(String, Var)>>;
}

impl<F> Graph for F
where
    F: Fn(&mut Tape<'_>) -> Result<Vec<(String, Var)>>,
{
    fn build(&self, tape: &mut Tape<'_>) -> Result<Vec<(String, Var)>> {
        self(tape)
    }
}

pub fn forward_eval(graph: &dyn Graph, inputs: &Inputs, params: &ParamSet) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::with_inputs(params, inputs);
    let outs = graph.build(&mut tape)?;
    Ok(outs
        .into_iter()
        .map(|(name, v)| (name, tape.value(v).clone()))
        .collect())
}

fn find_output(outs: &[(String, Var)], name: &str) -> Result<Var> {
    outs.iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Validation(format!("graph has no output `{name}`")))
}

pub fn backward_grad(graph: &dyn Graph, inputs: &Inputs, params: &ParamSet, loss_name: &str) -> Result<Gradients> {
    let mut tape = Tape::with_inputs(params, inputs);
    let outs = graph.build(&mut tape)?;
    let loss = find_output(&outs, loss_name)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::NonScalarLoss(
            loss_name.to_string(),
            tape.value(loss).shape().to_vec(),
        ));
    }
    tape.backward(loss)
}

/// Options for [`finite_diff_check_with`].
#[derive(Debug, Clone)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many components per tensor (sampled); `None` checks all.
    pub max_per_tensor: Option<usize>,
    /// Also perturb named inputs, not just parameters.
    pub include_inputs: bool,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_per_tensor: None,
            include_inputs: false,
            floor: 1e-3,
            seed: 0,
        }
    }
}

/// Worst component found by a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_value(graph: &dyn Graph, inputs: &Inputs, params: &ParamSet, loss_name: &str) -> Result<f64> {
    let mut tape = Tape::with_inputs(params, inputs);
    let outs = graph.build(&mut tape)?;
    Ok(tape.value(find_output(&outs, loss_name)?).item())
}

/// Compares reverse-mode gradients of `loss_name` with central differences.
///
/// Never fails on a large error; the caller decides what is acceptable.
pub fn finite_diff_check_with(
    graph: &dyn Graph,
    inputs: &Inputs,
    params: &ParamSet,
    loss_name: &str,
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::Config(format!("eps {} outside [1e-7, 1e-4]", opts.eps)));
    }
    let grads = backward_grad(graph, inputs, params, loss_name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.max_per_tensor {
            Some(m) if m < len => {
                let mut idx = sample(rng, len, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    };
    let mut record = |name: &str, j: usize, analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let e = rel_error(analytic, numeric, opts.floor);
        report.checked += 1;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((name.to_string(), j));
        }
    };

    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let len = params.get(name).expect("listed").len();
        for j in pick(len, &mut rng) {
            let orig = params.get(name).expect("listed").data()[j];
            work.get_mut(name).expect("listed").data_mut()[j] = orig + opts.eps;
            let plus = loss_value(graph, inputs, &work, loss_name)?;
            work.get_mut(name).expect("listed").data_mut()[j] = orig - opts.eps;
            let minus = loss_value(graph, inputs, &work, loss_name)?;
            work.get_mut(name).expect("listed").data_mut()[j] = orig;
            record(name, j, grads.params[name].data()[j], plus, minus);
        }
    }

    if opts.include_inputs {
        let mut work_in = inputs.clone();
        for (name, analytic) in &grads.inputs {
            let len = analytic.len();
            for j in pick(len, &mut rng) {
                let orig = inputs[name].data()[j];
                work_in.get_mut(name).expect("bound").data_mut()[j] = orig + opts.eps;
                let plus = loss_value(graph, &work_in, params, loss_name)?;
                work_in.get_mut(name).expect("bound").data_mut()[j] = orig - opts.eps;
                let minus = loss_value(graph, &work_in, params, loss_name)?;
                work_in.get_mut(name).expect("bound").data_mut()[j] = orig;
                record(name, j, analytic.data()[j], plus, minus);
            }
        }
    }
    Ok(report)
}

/// Full finite-difference check over every parameter component; returns the
/// worst relative error.
pub fn finite_diff_check(graph: &dyn Graph, inputs: &Inputs, params: &ParamSet, loss_name: &str, eps: f64) -> Result<f64> {
    let opts = FdOptions {
        eps,
        ..FdOptions::default()
    };
    Ok(finite_diff_check_with(graph, inputs, params, loss_name, &opts)?.max_rel_error)
}
