//! Heavy-tailed inputs and the coefficient of variation of the Monte-Carlo
//! FIM for the scalar logistic model at `theta = 0`.
//!
//! There `F = E[x^2] / 4` and the estimator `F_hat = (1/4m) sum x_k^2` has
//! `CV = sqrt((K - 1) / m)` with kurtosis-like ratio `K = E[x^4] / E[x^2]^2`.
//! For Student-t inputs `K = 3 (nu - 2) / (nu - 4)`, which diverges as nu
//! approaches 4.
//!
//! The plain sample ratio converges badly for small nu: below nu = 8 the
//! eighth moment is infinite, so the sample fourth moment has infinite
//! variance and is typically far below its mean. The report therefore also
//! carries an importance-sampled ratio drawn from a heavier t proposal, which
//! has finite variance whenever the proposal's degrees of freedom are below
//! `2 nu - 8`.

use rand::Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{FimError, Result};

/// Degrees of freedom of the importance proposal; below `2 nu - 8` for every
/// nu > 4.25.
pub const PROPOSAL_NU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub nu: f64,
    pub m: usize,
    pub trials: usize,
    /// `3 (nu - 2) / (nu - 4)`.
    pub closed_form_ratio: f64,
    /// `mean(x^4) / mean(x^2)^2` over all `m * trials` plain draws.
    pub sample_ratio: f64,
    /// The same ratio with both moments importance-sampled.
    pub importance_ratio: f64,
    /// `sqrt((K - 1) / m)` with the closed-form `K`.
    pub closed_form_cv: f64,
    /// Std/mean of `F_hat` across trials.
    pub empirical_cv: f64,
    /// `E[x^2] / 4 = nu / (4 (nu - 2))`.
    pub true_fim: f64,
    pub mean_estimate: f64,
}

pub fn t_kurtosis_ratio(nu: f64) -> f64 {
    3.0 * (nu - 2.0) / (nu - 4.0)
}

fn t_log_density(x: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()
}

pub fn cv_demo<R: Rng + ?Sized>(nu: f64, m: usize, trials: usize, rng: &mut R) -> Result<CvReport> {
    if !(nu > 4.0 && nu.is_finite()) {
        return Err(FimError::InvalidArgument(format!("the fourth moment needs nu > 4, got {nu}")));
    }
    if m == 0 || trials < 2 {
        return Err(FimError::InvalidArgument("cv_demo needs m >= 1 and trials >= 2".into()));
    }
    let target = StudentT::new(nu).map_err(|e| FimError::InvalidArgument(e.to_string()))?;
    let proposal = StudentT::new(PROPOSAL_NU).map_err(|e| FimError::InvalidArgument(e.to_string()))?;

    let (mut s2, mut s4) = (0.0, 0.0);
    let mut estimates = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut trial = 0.0;
        for _ in 0..m {
            let x: f64 = target.sample(rng);
            let x2 = x * x;
            trial += x2;
            s2 += x2;
            s4 += x2 * x2;
        }
        estimates.push(trial / (4.0 * m as f64));
    }
    let n = (m * trials) as f64;
    let sample_ratio = (s4 / n) / (s2 / n).powi(2);

    let (mut w2, mut w4) = (0.0, 0.0);
    for _ in 0..m * trials {
        let x: f64 = proposal.sample(rng);
        let w = (t_log_density(x, nu) - t_log_density(x, PROPOSAL_NU)).exp();
        let x2 = x * x;
        w2 += w * x2;
        w4 += w * x2 * x2;
    }
    let importance_ratio = (w4 / n) / (w2 / n).powi(2);

    let mean_estimate = estimates.iter().sum::<f64>() / trials as f64;
    let var = estimates.iter().map(|e| (e - mean_estimate).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let closed_form_ratio = t_kurtosis_ratio(nu);
    Ok(CvReport {
        nu,
        m,
        trials,
        closed_form_ratio,
        sample_ratio,
        importance_ratio,
        closed_form_cv: ((closed_form_ratio - 1.0) / m as f64).sqrt(),
        empirical_cv: var.sqrt() / mean_estimate,
        true_fim: nu / (4.0 * (nu - 2.0)),
        mean_estimate,
    })
}
