//! Central-difference gradient oracle (64-bit only).

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms: central
/// differences of an O(1) loss carry ~1e-11 of roundoff, which would swamp
/// the relative error of an exactly-zero gradient.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)
    pub max_rel_error: f64,
    /// Which input (or parameter, in store order) holds the worst coordinate.
    pub worst_input: usize,
    pub worst_index: usize,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            coordinates: 0,
        }
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.coordinates += 1;
        if rel > self.max_rel_error || rel.is_nan() {
            self.max_rel_error = rel;
            self.worst_input = input;
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

fn eval_scalar(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::dim("finite_diff_check", tape.shape(out), &[1]));
    }
    Ok(v[0])
}

/// Compares autodiff gradients of scalar `f` against central differences
/// for every coordinate of every input that requires grad.
pub fn finite_diff_check<Func>(f: Func, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    eval_scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let run = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        eval_scalar(&tape, out)
    };

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (n, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads
            .get(vars[n])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            work[n].data_mut()[i] = x0 + h;
            let plus = run(&work)?;
            work[n].data_mut()[i] = x0 - h;
            let minus = run(&work)?;
            work[n].data_mut()[i] = x0;
            report.record(n, i, analytic[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Same check over every trainable parameter of `store`; `f` builds the
/// loss from the store on a fresh tape.
pub fn finite_diff_check_params<Func>(store: &ParamStore<f64>, f: Func, h: f64) -> Result<GradCheckReport>
where
    Func: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&analytic_store, &mut tape)?;
    eval_scalar(&tape, out)?;
    tape.backward_into(out, &mut analytic_store)?;

    let run = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(s, &mut tape)?;
        eval_scalar(&tape, out)
    };

    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    for (n, id) in store.ids().enumerate() {
        if store.is_frozen(id) {
            continue;
        }
        let numel = store.get(id).numel();
        let analytic = analytic_store
            .get(id)
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        for i in 0..numel {
            let x0 = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x0 + h;
            let plus = run(&work)?;
            work.get_mut(id).data_mut()[i] = x0 - h;
            let minus = run(&work)?;
            work.get_mut(id).data_mut()[i] = x0;
            report.record(n, i, analytic[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
