use super::FimEstimate;
use crate::error::{FimError, Result};

/// `||g||^2`, an unbiased single-probe estimate of `tr(F)` when `g` comes from
/// the full Hutchinson variant.
pub fn trace_estimate(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum()
}

/// `beta * acc + (1 - beta) * new`, for `beta` in `[0, 1)`.
pub fn ema_update(acc: &FimEstimate, new: &FimEstimate, beta: f64) -> Result<FimEstimate> {
    if !(0.0..1.0).contains(&beta) {
        return Err(FimError::InvalidArgument(format!("decay {beta} outside [0, 1)")));
    }
    acc.ensure_compatible(new)?;
    let mut out = acc.clone();
    for (o, n) in out.values.iter_mut().zip(&new.values) {
        *o = beta * *o + (1.0 - beta) * n;
    }
    out.meta.probe_count += new.meta.probe_count;
    out.meta.backward_passes += new.meta.backward_passes;
    Ok(out)
}

/// Uniform mean of compatible estimates.
pub fn average(estimates: &[FimEstimate]) -> Result<FimEstimate> {
    let first = estimates.first().ok_or_else(|| FimError::InvalidArgument("nothing to average".into()))?;
    let mut out = first.clone();
    for e in &estimates[1..] {
        out.ensure_compatible(e)?;
        for (o, v) in out.values.iter_mut().zip(&e.values) {
            *o += v;
        }
        out.meta.probe_count += e.meta.probe_count;
        out.meta.backward_passes += e.meta.backward_passes;
    }
    out.scale(1.0 / estimates.len() as f64);
    Ok(out)
}
