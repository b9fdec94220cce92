use super::{Tape, Tensor, Var};
use crate::error::{FimError, Result};

/// Largest relative discrepancy between the tape gradient and central
/// differences, for a scalar function of a flat parameter vector.
///
/// `f` records its computation on a fresh tape given the parameter leaf.
/// Perturbed evaluations replay the same tape with stop-gradient outputs held
/// at their recorded values, so both sides differentiate the same function.
/// The relative error uses `max(|g|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, theta: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(FimError::InvalidArgument(format!("finite-difference step {step} must be positive")));
    }
    let mut tape = Tape::new();
    let leaf = tape.param(Tensor::vector(theta.to_vec()));
    let root = f(&mut tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get(leaf).expect("parameters always receive a gradient").data().to_vec();

    let eval_at = |point: Vec<f64>, tape: &mut Tape| -> Result<f64> {
        tape.set_value(leaf, Tensor::vector(point))?;
        tape.replay_frozen()?;
        Ok(tape.value(root).item())
    };

    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let mut plus = theta.to_vec();
        plus[i] += step;
        let mut minus = theta.to_vec();
        minus[i] -= step;
        let numeric = (eval_at(plus, &mut tape)? - eval_at(minus, &mut tape)?) / (2.0 * step);
        let g = analytic[i];
        worst = worst.max((g - numeric).abs() / g.abs().max(1e-8));
    }
    Ok(worst)
}
