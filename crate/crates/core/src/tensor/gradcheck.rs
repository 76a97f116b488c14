//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for [`Tape::backward`].

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Perturbation used by default for central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Per-input comparison of analytic vs. numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    /// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` for input `i`
    /// (0 when both gradients vanish).
    pub fn rel_error(&self, i: usize) -> f64 {
        rel_error(&self.analytic[i], &self.numeric[i])
    }

    pub fn max_rel_error(&self) -> f64 {
        (0..self.analytic.len())
            .map(|i| self.rel_error(i))
            .fold(0.0, f64::max)
    }
}

pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let denom = norm(a).max(norm(n));
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Checks `f` (which must return a scalar) with respect to every tensor in
/// `inputs`, using a fresh tape for each evaluation.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * step);
        }
        numeric.push(g);
    }
    Ok(GradCheck { analytic, numeric })
}
