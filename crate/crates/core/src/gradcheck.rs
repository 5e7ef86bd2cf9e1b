//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::params::{find_mut, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor in the relative-error metric.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + REL_FLOOR)
}

fn eval_scalar<F>(f: &F, theta: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(theta);
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::Oracle(format!("f returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` at `theta` against central differences
/// and returns the max relative error over entries.
pub fn finite_diff_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_report(f, theta, h).map(|r| r.max_rel_err)
}

pub fn finite_diff_report<F>(f: F, theta: &Tensor, h: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Oracle(format!("step h must be positive, got {h}")));
    }
    let theta = theta.clone().trainable();

    let mut tape = Tape::new();
    let x = tape.leaf(&theta);
    let loss = f(&mut tape, x)?;
    let base = tape.value(loss).item();
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; theta.numel()]);

    let again = eval_scalar(&f, &theta)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Oracle(format!(
            "non-deterministic objective: {base} then {again}"
        )));
    }

    let mut numeric = Vec::with_capacity(theta.numel());
    let mut probe = theta.clone();
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(CheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Finite-difference check of every trainable tensor in `model` against the
/// tape gradient of `loss`. `loss` must build the full objective on the given
/// tape from the model's current state.
pub fn check_parameters<M, F>(model: &mut M, loss: F, h: f64) -> Result<Vec<ParamCheck>>
where
    M: Parameters,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(m, &mut tape)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    let base = tape.value(l).item();
    tape.backward(l)?;
    let again = eval(model)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Oracle(format!(
            "non-deterministic objective: {base} then {again}"
        )));
    }

    let mut targets = Vec::new();
    model.visit(&mut |name, t| {
        if t.requires_grad() {
            targets.push((name.to_string(), t.numel()));
        }
    });

    let mut out = Vec::with_capacity(targets.len());
    for (name, numel) in targets {
        let analytic = tape
            .param_grad(&name)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut check = ParamCheck {
            name: name.clone(),
            numel,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..numel {
            let mut orig = 0.0;
            find_mut(model, &name, |t| {
                orig = t.data()[i];
                t.data_mut()[i] = orig + h;
            });
            let up = eval(model)?;
            find_mut(model, &name, |t| t.data_mut()[i] = orig - h);
            let down = eval(model)?;
            find_mut(model, &name, |t| t.data_mut()[i] = orig);
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[i], numeric);
            if e > check.max_rel_err || i == 0 {
                check.max_rel_err = e;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(out)
}
