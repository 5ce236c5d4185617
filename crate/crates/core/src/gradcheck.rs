//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over all coordinates of all inputs of
/// |analytic - central difference| / max(1, |analytic|),
/// with the central difference (f(x+h) - f(x-h)) / 2h.
///
/// `build` must construct a scalar loss on the given tape from leaves that
/// mirror `inputs` (registered in order, requires_grad on).
pub fn finite_diff_check_multi<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Contract("finite_diff_check: loss is not scalar".into()));
        }
        Ok(tape.value(loss).item())
    };

    // Analytic gradients in one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract("finite_diff_check: loss is not scalar".into()));
    }
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for c in 0..input.numel() {
            let orig = input.data()[c];
            work[k].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.map_or(0.0, |g| g.data()[c]);
            let rel = (an - fd).abs() / an.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_multi(|tape, vars| build(tape, vars[0]), std::slice::from_ref(x), h)
}
