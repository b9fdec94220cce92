use nalgebra::DMatrix;

use super::task::Dataset;
use crate::ad::{Tape, Tensor};
use crate::error::{FimError, Result};
use crate::network::{forward_logits, record_logits, NetworkSpec, ParamVector};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: ParamVector,
    /// Mean cross-entropy before each step.
    pub losses: Vec<f64>,
}

/// Mean cross-entropy and its gradient, from a fresh tape.
pub fn cross_entropy(spec: &NetworkSpec, theta: &ParamVector, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let theta_var = tape.param(Tensor::vector(theta.flat.clone()));
    let x = tape.constant(Tensor::from_dmatrix(&data.x));
    let logits = record_logits(&mut tape, spec, theta_var, x)?;
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.gather(lsm, data.labels.clone())?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0 / data.len() as f64)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.get(theta_var).expect("parameter gradient").data().to_vec()))
}

/// Full-batch gradient descent on the mean cross-entropy. `steps = 0`
/// returns the initialization untouched.
pub fn train_sgd(
    spec: &NetworkSpec,
    init: &ParamVector,
    data: &Dataset,
    steps: usize,
    lr: f64,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(FimError::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut theta = init.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = cross_entropy(spec, &theta, data)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(FimError::Diverged { step, loss });
        }
        losses.push(loss);
        for (t, g) in theta.flat.iter_mut().zip(&grad) {
            *t -= lr * g;
        }
    }
    Ok(TrainOutcome { theta, losses })
}

pub fn accuracy(spec: &NetworkSpec, theta: &ParamVector, data: &Dataset) -> Result<f64> {
    let logits: DMatrix<f64> = forward_logits(spec, theta, &data.x)?;
    let correct = logits
        .row_iter()
        .zip(&data.labels)
        .filter(|(row, &y)| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i) == Some(y))
        .count();
    Ok(correct as f64 / data.len() as f64)
}
