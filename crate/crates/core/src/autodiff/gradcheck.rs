//! Central finite-difference gradient checker.
//!
//! Evaluates the function purely through forward passes on fresh tapes, so it
//! is independent of every backward rule it is used to verify.

use rand::seq::index::sample;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(param index, element index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error used throughout: `|a − n| / (|a| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Compares analytic gradients of `f` with central differences of step `eps`.
///
/// `f` must build a scalar from the supplied parameter vars. When `budget`
/// is `Some((n, seed))`, `n` coordinates are sampled uniformly over all
/// parameters; otherwise every coordinate is checked.
pub fn check<F>(params: &[Tensor], f: F, eps: f64, budget: Option<(usize, u64)>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let total: usize = params.iter().map(Tensor::len).sum();
    let coords: Vec<usize> = match budget {
        Some((n, seed)) if n < total => {
            let mut r = rng::stream(seed, "gradcheck");
            let mut picked = sample(&mut r, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value().data()[0];
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for flat in coords {
        let (pi, ei) = locate(params, flat);
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + eps;
        let plus = eval(&work)?;
        work[pi].data_mut()[ei] = orig - eps;
        let minus = eval(&work)?;
        work[pi].data_mut()[ei] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[pi].data()[ei];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pi, ei, a, numeric));
        }
    }
    Ok(report)
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.len() {
            return (i, flat);
        }
        flat -= p.len();
    }
    panic!("coordinate out of range");
}
