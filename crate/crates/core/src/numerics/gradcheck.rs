//! Central-difference gradient oracle.

use super::dd::Dd;
use super::scalar::Scalar;
use super::tape::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Check every `stride`-th coordinate of each parameter (1 = all).
    pub stride: usize,
    /// Only parameters whose name contains one of these substrings; empty = all.
    pub only: Vec<String>,
    /// Evaluate the objective in double-double for the differences.
    pub extended: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            only: Vec::new(),
            extended: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |a - b| / max(|a|, |b|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index attaining the maximum.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A scalar objective that can be built on a tape of any precision.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var>;
}

fn eval<T: Scalar>(store: &ParamStore<T>, obj: &impl Objective) -> Result<Dd> {
    let mut tape = Tape::inference(store);
    let v = obj.eval(&mut tape)?;
    let val = tape.value(v);
    if val.len() != 1 {
        return Err(Error::Graph(format!("objective must be scalar, got {:?}", val.shape())));
    }
    Ok(val.data()[0].widen())
}

/// Compare `f64` tape gradients of `obj` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every trainable coordinate. The divisor is
/// the step actually taken after rounding `θ ± h`.
///
/// The perturbed parameters are formed in `f64`; with `opts.extended` the two
/// objective values are evaluated in double-double so that the subtraction
/// does not cancel away the digits being checked.
pub fn finite_diff_check(
    store: &ParamStore<f64>,
    h: f64,
    opts: &FdOptions,
    obj: &impl Objective,
) -> Result<FdReport> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::arg("finite_diff_check", format!("step h = {h} must be > 0")));
    }
    let grads = {
        let mut tape = Tape::new(store);
        let loss = obj.eval(&mut tape)?;
        tape.backward(loss)?
    };
    let mut work = store.clone();
    let mut wide = opts.extended.then(|| store.cast::<Dd>());
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut at = |id, i, v: f64, run: bool| -> Result<Dd> {
        if let Some(w) = wide.as_mut() {
            w.get_mut(id).data_mut()[i] = Dd::from_f64(v);
            return if run { eval(w, obj) } else { Ok(Dd::default()) };
        }
        work.get_mut(id).data_mut()[i] = v;
        if run {
            eval(&work, obj)
        } else {
            Ok(Dd::default())
        }
    };
    for id in store.ids() {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        if !opts.only.is_empty() && !opts.only.iter().any(|s| entry.name.contains(s.as_str())) {
            continue;
        }
        let g = grads.param(id);
        for i in (0..entry.value.len()).step_by(opts.stride.max(1)) {
            let orig = entry.value.data()[i];
            let (xp, xm) = (orig + h, orig - h);
            let fp = at(id, i, xp, true)?;
            let fm = at(id, i, xm, true)?;
            at(id, i, orig, false)?;
            if !fp.hi.is_finite() || !fm.hi.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_diff_check",
                    location: format!("{}[{i}]", entry.name),
                });
            }
            let numeric = ((fp - fm) / (Dd::from_f64(xp) - Dd::from_f64(xm))).to_f64();
            let analytic = g.data()[i];
            let e = rel_error(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((entry.name.clone(), i));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
