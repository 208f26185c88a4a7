//! Central finite-difference checks of tape gradients.
//!
//! The error for one scalar is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps exactly-zero gradients from dividing by zero.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Worst disagreement found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst scalar.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            max_rel_error: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, k: usize, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        // NaN must never compare as "better"
        if !(err <= self.max_rel_error) {
            self.max_rel_error = err;
            self.worst = format!("{name}[{k}]");
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.checked += other.checked;
        if !(other.max_rel_error <= self.max_rel_error) {
            GradReport {
                checked: self.checked,
                ..other
            }
        } else {
            self
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks `d loss / d param` for every parameter in `store`. `loss` must
/// build a scalar and be a pure function of the stored values.
pub fn check_params(
    store: &mut ParamStore,
    step: f64,
    floor: f64,
    loss: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradReport> {
    store.zero_grad();
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    tape.backward(l, store)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_nan_check(false);
        let l = loss(&mut tape, store)?;
        Ok(tape.scalar(l))
    };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut report = GradReport::new();
    for name in names {
        let id = store.id(&name).expect("listed parameter");
        let base = store.value(id).clone();
        let analytic = store.grad(id).to_vec();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += step;
            store.set_value(id, plus)?;
            let fp = eval(store)?;
            let mut minus = base.clone();
            minus.data_mut()[k] -= step;
            store.set_value(id, minus)?;
            let fm = eval(store)?;
            report.record(&name, k, analytic[k], (fp - fm) / (2.0 * step), floor);
        }
        store.set_value(id, base)?;
    }
    Ok(report)
}

/// Checks `d loss / d x` for a constant input `x`.
pub fn check_input(
    x: &Tensor,
    step: f64,
    floor: f64,
    loss: &dyn Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let l = loss(&mut tape, v)?;
    let grads = tape.gradients(l)?;
    let analytic = grads[v.index()].clone().unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::with_nan_check(false);
        let v = tape.constant(x);
        let l = loss(&mut tape, v)?;
        Ok(tape.scalar(l))
    };
    let mut report = GradReport::new();
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[k] += step;
        let mut minus = x.clone();
        minus.data_mut()[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        report.record("input", k, analytic[k], numeric, floor);
    }
    Ok(report)
}
