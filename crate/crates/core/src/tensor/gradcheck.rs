use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst coordinate found when comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    fn empty() -> Self {
        GradCheck { max_rel_error: 0.0, worst_index: None, analytic: 0.0, numeric: 0.0 }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::input(format!("gradient check needs a scalar function, got {:?}", value.shape())));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v} during gradient check")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` against central differences, for every
/// coordinate of every input. Returns one result per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }

    let mut work = inputs.to_vec();
    let mut results = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut check = GradCheck::empty();
        for j in 0..work[i].len() {
            let original = work[i].data()[j];
            work[i].data_mut()[j] = original + eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = original - eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            if check.worst_index.is_none() || err > check.max_rel_error {
                check = GradCheck { max_rel_error: err, worst_index: Some(j), analytic: a, numeric };
            }
        }
        results.push(check);
    }
    Ok(results)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut results = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(results.remove(0))
}
