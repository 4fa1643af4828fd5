//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A collection of named trainable tensors with a fixed order.
pub trait ParamSet: Clone {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamSet for Vec<(String, Tensor)> {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().map(|(_, t)| t).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so near-zero gradients
    /// are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-4,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares tape gradients of `f` with central differences
/// `(f(p+h) − f(p−h)) / 2h` for every element of every parameter.
///
/// `f` must record its loss on the given tape and return it together with
/// the variables bound to the parameters, in `named_tensors` order.
pub fn grad_check<P, F>(params: &P, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: Fn(&mut Tape, &P) -> Result<(Var, Vec<Var>)>,
{
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();

    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, params)?;
    if vars.len() != names.len() {
        return Err(Error::Contract(format!(
            "grad_check: {} parameter vars for {} tensors",
            vars.len(),
            names.len()
        )));
    }
    check_finite(tape.value(loss).item(), "loss")?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let eval = |p: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = f(&mut tape, p)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.clone();
    let mut report = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let len = work.tensors_mut()[pi].len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..len {
            let orig = work.tensors_mut()[pi].data()[k];
            work.tensors_mut()[pi].data_mut()[k] = orig + opts.step;
            let plus = eval(&work)?;
            work.tensors_mut()[pi].data_mut()[k] = orig - opts.step;
            let minus = eval(&work)?;
            work.tensors_mut()[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            check_finite(numeric, name)?;
            let a = analytic[pi].data()[k];
            check_finite(a, name)?;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        report.push(ParamCheck {
            name: name.clone(),
            elements: len,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel <= opts.tol,
        });
    }
    Ok(GradCheckReport {
        step: opts.step,
        tol: opts.tol,
        params: report,
    })
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}
