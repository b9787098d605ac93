//! Central finite-difference gradient checks.

use super::array::Array;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradient magnitude below which central differences at step `eps` cannot reach
/// relative accuracy `rel` on a function of size `value`, assuming evaluations carry
/// about a hundred ulps of accumulated rounding.
pub fn roundoff_floor(value: f64, eps: f64, rel: f64) -> f64 {
    100.0 * f64::EPSILON * value.abs().max(1.0) / (eps * rel)
}

fn eval_scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Max over all parameter entries of `|analytic - central| / max(|central|, 1e-8)`.
///
/// `f` receives one differentiable leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Array], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {eps}")));
    }
    let run = |vals: &[Array]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = vals.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok((tape, leaves, out))
    };
    let (mut tape, leaves, out) = run(params)?;
    let base = eval_scalar(&tape, out)?;
    let (tape2, _, out2) = run(params)?;
    let again = eval_scalar(&tape2, out2)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic((base - again).abs()));
    }
    tape.backward(out)?;
    let analytic: Vec<Array> = leaves
        .iter()
        .zip(params)
        .map(|(&l, p)| tape.grad(l).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Array> = params.to_vec();
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + eps;
            let (t, _, o) = run(&work)?;
            let plus = eval_scalar(&t, o)?;
            work[p].data_mut()[e] = orig - eps;
            let (t, _, o) = run(&work)?;
            let minus = eval_scalar(&t, o)?;
            work[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[p].data()[e], numeric, 1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((p, e));
            }
        }
    }
    Ok(report)
}

/// Gradient check over every scalar of a [`ParamStore`].
///
/// `f` must register parameters through [`Tape::param`].
pub fn grad_check_store<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store_check(store, eps, 1e-8, false, f)
}

/// Fourth-order central differences `(8 (f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h`, with
/// errors measured as `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check_store_with_floor<F>(store: &ParamStore, eps: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store_check(store, eps, floor, true, f)
}

fn store_check<F>(store: &ParamStore, eps: f64, floor: f64, fourth_order: bool, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base = eval_scalar(&tape, out)?;
    let mut t2 = Tape::new();
    let o2 = f(&mut t2, store)?;
    let again = eval_scalar(&t2, o2)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic((base - again).abs()));
    }
    tape.backward(out)?;
    let grads = tape.param_grads();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut work = store.clone();
    for (id, g) in grads {
        for e in 0..g.len() {
            let orig = store.get(id).data()[e];
            let mut at = |x: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[e] = x;
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                eval_scalar(&t, o)
            };
            let d1 = at(orig + eps)? - at(orig - eps)?;
            let numeric = if fourth_order {
                let d2 = at(orig + 2.0 * eps)? - at(orig - 2.0 * eps)?;
                (8.0 * d1 - d2) / (12.0 * eps)
            } else {
                d1 / (2.0 * eps)
            };
            work.get_mut(id).data_mut()[e] = orig;
            let err = rel_error(g.data()[e], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((id.0, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, p| {
                let s = t.mul(p[0], p[0]);
                Ok(t.sum(s))
            },
            &[Array::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(|t, _| Ok(t.scalar(4.0)), &[Array::from_vec(vec![1.0, 2.0])], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let r = grad_check(
            |t, p| {
                calls.set(calls.get() + 1.0);
                let c = t.scalar(calls.get());
                let m = t.mul(p[0], c);
                Ok(t.sum(m))
            },
            &[Array::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn bad_step_rejected() {
        assert!(grad_check(|t, _| Ok(t.scalar(0.0)), &[], 0.0).is_err());
    }
}
