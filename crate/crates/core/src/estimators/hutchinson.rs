//! Hutchinson-probe FIM estimators.
//!
//! Each variant builds a scalar `h(theta)` that is linear in a random probe
//! `xi` and whose gradient `g` satisfies `E[g g^T] = target`. One backward
//! pass per probe yields `g`; the estimate is `g g^T` (or `g o g`).
//!
//! | variant | `h`                                      | target             |
//! |---------|------------------------------------------|--------------------|
//! | full    | `sum sqrt(sg p_y) l_y xi`                | exact FIM          |
//! | diag    | `sum sqrt(sg zeta_y) z_y xi`             | `sum J^T diag(zeta) J` |
//! | lr(k)   | `sum_i sqrt(sg lambda_i) sg(v_i)^T z xi` | top-k core pullback |
//! | sqrt    | `2 sum sqrt(p_y) xi`                     | exact FIM          |
//!
//! `sg` is stop-gradient. Probe entries are indexed by (sample, slot) where a
//! slot is a class (C per sample) or an eigen-index (k per sample).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_storage, EstimatorKind, FimEstimate, Normalization, ProbeDist, Storage};
use crate::ad::{Tape, Tensor, Var};
use crate::core_space::{simplex_fim, spectrum, top_eigenpair, EigenMethod, PowerIteration, ProbVector};
use crate::error::{FimError, Result};
use crate::network::{batch_geometry, record_logits, NetworkSpec, ParamVector};

/// Probabilities are clamped to at least this before a square root.
pub const PROB_FLOOR: f64 = 1e-30;

/// Seed for the power-iteration start vector of low-rank estimators, so the
/// estimate is a deterministic function of the probe.
pub const LR_POWER_SEED: u64 = 0x0f15_4e57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagWeights {
    /// `zeta = p`: the target is the upper Loewner bound.
    Probs,
    /// `zeta = p (1 - p)`: the hypercube (independent-sigmoid) core.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HutchVariant {
    Full,
    Diag(DiagWeights),
    LowRank { k: usize, method: EigenMethod },
    Sqrt,
}

impl HutchVariant {
    /// Rank-k variant with the default eigen-solver: power iteration for the
    /// top pair when `k = 1`, a full decomposition otherwise.
    pub fn low_rank(k: usize) -> Self {
        let method = if k == 1 { EigenMethod::Power(PowerIteration::default()) } else { EigenMethod::Full };
        Self::LowRank { k, method }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Self::Full => EstimatorKind::HutchFull,
            Self::Diag(_) => EstimatorKind::HutchDg,
            Self::LowRank { k, .. } => EstimatorKind::HutchLr { k: *k },
            Self::Sqrt => EstimatorKind::HutchSqrt,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if let Self::LowRank { k, method } = self {
            if *k == 0 || *k >= classes {
                return Err(FimError::RankOutOfRange { k: *k, max: classes - 1 });
            }
            if *k > 1 && matches!(method, EigenMethod::Power(_)) {
                return Err(FimError::InvalidArgument("power iteration only yields the top eigenpair; use k = 1".into()));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for HutchVariant {
    type Err = FimError;

    /// `full`, `dg`, `dg-bernoulli`, `sqrt`, `lr1`, `lr2`, ...
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "dg" => Ok(Self::Diag(DiagWeights::Probs)),
            "dg-bernoulli" => Ok(Self::Diag(DiagWeights::Bernoulli)),
            "sqrt" => Ok(Self::Sqrt),
            other => other
                .strip_prefix("lr")
                .and_then(|k| k.parse().ok())
                .map(Self::low_rank)
                .ok_or_else(|| FimError::InvalidArgument(format!("unknown Hutchinson variant '{other}'"))),
        }
    }
}

/// Probe entries per sample.
pub fn probe_width(variant: &HutchVariant, classes: usize) -> usize {
    match variant {
        HutchVariant::LowRank { k, .. } => *k,
        _ => classes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeVector {
    pub samples: usize,
    pub width: usize,
    pub dist: ProbeDist,
    /// Row-major `samples x width`.
    pub entries: Vec<f64>,
}

impl ProbeVector {
    pub fn new(samples: usize, width: usize, dist: ProbeDist, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != samples * width {
            return Err(FimError::ShapeMismatch {
                op: "probe",
                detail: format!("{} entries for {samples} x {width}", entries.len()),
            });
        }
        Ok(Self { samples, width, dist, entries })
    }

    pub fn get(&self, sample: usize, slot: usize) -> f64 {
        self.entries[sample * self.width + slot]
    }

    fn as_tensor(&self, scale: f64) -> Tensor {
        Tensor::matrix(self.samples, self.width, self.entries.iter().map(|v| scale * v).collect())
            .expect("shape checked at construction")
    }
}

/// Fresh independent entries: `+-1` with equal odds, or standard normal.
pub fn sample_probe<R: Rng + ?Sized>(samples: usize, width: usize, dist: ProbeDist, rng: &mut R) -> ProbeVector {
    let entries = (0..samples * width)
        .map(|_| match dist {
            ProbeDist::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            ProbeDist::Gaussian => rng.sample(StandardNormal),
        })
        .collect();
    ProbeVector { samples, width, dist, entries }
}

/// Top-k eigenpairs of `diag(p) - p p^T`, largest first.
fn top_k_eigenpairs(p: &ProbVector, k: usize, method: EigenMethod) -> Result<Vec<(f64, DVector<f64>)>> {
    match method {
        EigenMethod::Power(_) => {
            let mut rng = ChaCha8Rng::seed_from_u64(LR_POWER_SEED);
            let top = top_eigenpair(p, method, &mut rng)?;
            Ok(vec![(top.value, top.vector)])
        }
        EigenMethod::Full => {
            let decomp = spectrum(&simplex_fim(p))?;
            let c = p.classes();
            Ok((0..k)
                .map(|i| (decomp.eigenvalues[c - 1 - i], decomp.eigenvectors.column(c - 1 - i).into_owned()))
                .collect())
        }
    }
}

fn prob_rows(tape: &Tape, sp: Var) -> Result<Vec<ProbVector>> {
    let t = tape.value(sp);
    let (n, c) = t.rows_cols();
    (0..n).map(|r| ProbVector::new(t.data()[r * c..(r + 1) * c].to_vec())).collect()
}

/// Records the variant's scalar `h` for the batch `x` and probe `xi`.
pub fn record_h(
    tape: &mut Tape,
    spec: &NetworkSpec,
    theta: Var,
    x: Var,
    variant: &HutchVariant,
    probe: &ProbeVector,
) -> Result<Var> {
    let c = spec.classes();
    variant.validate(c)?;
    let logits = record_logits(tape, spec, theta, x)?;
    let n = tape.shape(logits)[0];
    if probe.samples != n || probe.width != probe_width(variant, c) {
        return Err(FimError::ShapeMismatch {
            op: "hutchinson probe",
            detail: format!("probe {}x{}, expected {}x{}", probe.samples, probe.width, n, probe_width(variant, c)),
        });
    }
    let lsm = tape.log_softmax(logits)?;
    match variant {
        HutchVariant::Full => {
            let p = tape.exp(lsm)?;
            let sp = tape.stop_gradient(p)?;
            let clamped = tape.clamp_min(sp, PROB_FLOOR)?;
            let coef = tape.sqrt(clamped)?;
            let term = tape.mul(coef, lsm)?;
            tape.weighted_sum(term, probe.as_tensor(1.0))
        }
        HutchVariant::Sqrt => {
            let half = tape.scale(lsm, 0.5)?;
            let sqrt_p = tape.exp(half)?;
            tape.weighted_sum(sqrt_p, probe.as_tensor(2.0))
        }
        HutchVariant::Diag(weights) => {
            let p = tape.exp(lsm)?;
            let sp = tape.stop_gradient(p)?;
            let mut w = Vec::with_capacity(n * c);
            for (r, probs) in prob_rows(tape, sp)?.iter().enumerate() {
                for (y, &py) in probs.as_slice().iter().enumerate() {
                    let zeta = match weights {
                        DiagWeights::Probs => py,
                        DiagWeights::Bernoulli => py * (1.0 - py),
                    };
                    w.push(zeta.max(PROB_FLOOR).sqrt() * probe.get(r, y));
                }
            }
            tape.weighted_sum(logits, Tensor::matrix(n, c, w)?)
        }
        HutchVariant::LowRank { k, method } => {
            let p = tape.exp(lsm)?;
            let sp = tape.stop_gradient(p)?;
            let mut w = vec![0.0; n * c];
            for (r, probs) in prob_rows(tape, sp)?.iter().enumerate() {
                for (i, (lambda, v)) in top_k_eigenpairs(probs, *k, *method)?.into_iter().enumerate() {
                    let s = lambda.max(0.0).sqrt() * probe.get(r, i);
                    for y in 0..c {
                        w[r * c + y] += s * v[y];
                    }
                }
            }
            tape.weighted_sum(logits, Tensor::matrix(n, c, w)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct HutchGradient {
    pub h: f64,
    pub g: Vec<f64>,
    pub backward_passes: usize,
}

/// `g = dh/dtheta` for one probe: one forward and one backward pass.
pub fn hutchinson_gradient(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    variant: &HutchVariant,
    probe: &ProbeVector,
) -> Result<HutchGradient> {
    if theta.layout != spec.layout() {
        return Err(FimError::ShapeMismatch { op: "hutchinson", detail: "parameter layout mismatch".into() });
    }
    let mut tape = Tape::new();
    let theta_var = tape.param(Tensor::vector(theta.flat.clone()));
    let x_var = tape.constant(Tensor::from_dmatrix(x));
    let h = record_h(&mut tape, spec, theta_var, x_var, variant, probe)?;
    let grads = tape.backward(h)?;
    Ok(HutchGradient {
        h: tape.value(h).item(),
        g: grads.get(theta_var).expect("parameter gradient").data().to_vec(),
        backward_passes: tape.backward_passes(),
    })
}

/// The rank-one estimate `g g^T` for an explicit probe.
pub fn hutchinson_from_probe(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    variant: &HutchVariant,
    probe: &ProbeVector,
    storage: Storage,
) -> Result<FimEstimate> {
    check_storage(storage, theta.dim())?;
    let hg = hutchinson_gradient(spec, theta, x, variant, probe)?;
    let mut est = FimEstimate::zeros(variant.kind(), storage, Normalization::Sum, theta.dim())?;
    est.add_outer(&hg.g, 1.0);
    est.meta.probe_count = 1;
    est.meta.probe_dist = Some(probe.dist);
    est.meta.backward_passes = hg.backward_passes;
    Ok(est)
}

/// Mean of `probes` independent single-probe estimates over the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn hutchinson_fim<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    variant: &HutchVariant,
    dist: ProbeDist,
    probes: usize,
    storage: Storage,
    rng: &mut R,
) -> Result<FimEstimate> {
    if probes == 0 {
        return Err(FimError::InvalidArgument("at least one probe is required".into()));
    }
    check_storage(storage, theta.dim())?;
    variant.validate(spec.classes())?;
    let width = probe_width(variant, spec.classes());
    let mut est = FimEstimate::zeros(variant.kind(), storage, Normalization::Sum, theta.dim())?;
    for _ in 0..probes {
        let probe = sample_probe(x.nrows(), width, dist, rng);
        let hg = hutchinson_gradient(spec, theta, x, variant, &probe)?;
        est.add_outer(&hg.g, 1.0 / probes as f64);
        est.meta.backward_passes += hg.backward_passes;
    }
    est.meta.probe_count = probes;
    est.meta.probe_dist = Some(dist);
    Ok(est)
}

/// Sum over minibatches of single-probe estimates, each batch with its own
/// fresh probe.
pub fn hutchinson_batched<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    theta: &ParamVector,
    batches: &[DMatrix<f64>],
    variant: &HutchVariant,
    dist: ProbeDist,
    storage: Storage,
    rng: &mut R,
) -> Result<FimEstimate> {
    check_storage(storage, theta.dim())?;
    variant.validate(spec.classes())?;
    let width = probe_width(variant, spec.classes());
    let mut est = FimEstimate::zeros(variant.kind(), storage, Normalization::Sum, theta.dim())?;
    for batch in batches {
        let probe = sample_probe(batch.nrows(), width, dist, rng);
        let hg = hutchinson_gradient(spec, theta, batch, variant, &probe)?;
        est.add_outer(&hg.g, 1.0);
        est.meta.backward_passes += hg.backward_passes;
    }
    est.meta.probe_count = batches.len();
    est.meta.probe_dist = Some(dist);
    Ok(est)
}

/// Rows `a_j` with `g = sum_j xi_j a_j`, one per (sample, slot), computed
/// from per-sample Jacobians rather than the tape of `h`.
pub fn coefficient_rows(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    variant: &HutchVariant,
) -> Result<DMatrix<f64>> {
    let c = spec.classes();
    variant.validate(c)?;
    let width = probe_width(variant, c);
    let geoms = batch_geometry(spec, theta, x)?;
    let mut rows = DMatrix::zeros(geoms.len() * width, theta.dim());
    for (s, geom) in geoms.iter().enumerate() {
        let jac = &geom.jacobian.matrix;
        let p = geom.probs.to_dvector();
        let mut coeffs: Vec<DVector<f64>> = Vec::with_capacity(width);
        match variant {
            HutchVariant::Full | HutchVariant::Sqrt => {
                for y in 0..c {
                    // sqrt(p_y) (e_y - p)
                    let scale = if matches!(variant, HutchVariant::Sqrt) { p[y].sqrt() } else { p[y].max(PROB_FLOOR).sqrt() };
                    let mut u = -&p;
                    u[y] += 1.0;
                    coeffs.push(u * scale);
                }
            }
            HutchVariant::Diag(weights) => {
                for y in 0..c {
                    let zeta = match weights {
                        DiagWeights::Probs => p[y],
                        DiagWeights::Bernoulli => p[y] * (1.0 - p[y]),
                    };
                    let mut u = DVector::zeros(c);
                    u[y] = zeta.max(PROB_FLOOR).sqrt();
                    coeffs.push(u);
                }
            }
            HutchVariant::LowRank { k, method } => {
                for (lambda, v) in top_k_eigenpairs(&geom.probs, *k, *method)? {
                    coeffs.push(v * lambda.max(0.0).sqrt());
                }
            }
        }
        for (slot, u) in coeffs.iter().enumerate() {
            let a = jac.transpose() * u;
            rows.row_mut(s * width + slot).copy_from(&a.transpose());
        }
    }
    Ok(rows)
}

/// `E[g g^T] = sum_j a_j a_j^T` for either probe distribution.
pub fn target_matrix(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    variant: &HutchVariant,
) -> Result<DMatrix<f64>> {
    let a = coefficient_rows(spec, theta, x, variant)?;
    Ok(a.transpose() * a)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub variant: HutchVariant,
    pub dist: ProbeDist,
    /// `E[F_ii]`, the diagonal of the variant's target.
    pub mean: Vec<f64>,
    pub closed_form: Vec<f64>,
    /// `sqrt(Var) / mean`; zero where the mean vanishes.
    pub cv: Vec<f64>,
    pub empirical: Option<Vec<f64>>,
    pub trials: usize,
}

/// Per-coordinate variance of a single-probe diagonal estimate.
///
/// With `s_i = sum_j a_ji^2` and `q_i = sum_j a_ji^4`, the estimate `g_i^2`
/// has variance `2 s_i^2 - 2 q_i` under Rademacher probes and `2 s_i^2`
/// under Gaussian ones.
pub fn variance_closed_form(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    variant: &HutchVariant,
    dist: ProbeDist,
) -> Result<VarianceReport> {
    let a = coefficient_rows(spec, theta, x, variant)?;
    let mut mean = Vec::with_capacity(a.ncols());
    let mut closed_form = Vec::with_capacity(a.ncols());
    let mut cv = Vec::with_capacity(a.ncols());
    for col in a.column_iter() {
        let s: f64 = col.iter().map(|v| v * v).sum();
        let q: f64 = col.iter().map(|v| v.powi(4)).sum();
        let var = match dist {
            ProbeDist::Rademacher => (2.0 * s * s - 2.0 * q).max(0.0),
            ProbeDist::Gaussian => 2.0 * s * s,
        };
        mean.push(s);
        closed_form.push(var);
        cv.push(if s > 0.0 { var.sqrt() / s } else { 0.0 });
    }
    Ok(VarianceReport { variant: *variant, dist, mean, closed_form, cv, empirical: None, trials: 0 })
}

impl VarianceReport {
    /// Fills `empirical` with the sample variance of `g_i^2` over `trials`
    /// independent probes, each run through the tape.
    pub fn with_empirical<R: Rng + ?Sized>(
        mut self,
        spec: &NetworkSpec,
        theta: &ParamVector,
        x: &DMatrix<f64>,
        trials: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if trials < 2 {
            return Err(FimError::InvalidArgument("empirical variance needs at least two trials".into()));
        }
        let width = probe_width(&self.variant, spec.classes());
        let dim = theta.dim();
        let (mut mean, mut m2) = (vec![0.0; dim], vec![0.0; dim]);
        for t in 0..trials {
            let probe = sample_probe(x.nrows(), width, self.dist, rng);
            let hg = hutchinson_gradient(spec, theta, x, &self.variant, &probe)?;
            for i in 0..dim {
                let v = hg.g[i] * hg.g[i];
                let delta = v - mean[i];
                mean[i] += delta / (t + 1) as f64;
                m2[i] += delta * (v - mean[i]);
            }
        }
        self.empirical = Some(m2.into_iter().map(|s| s / (trials - 1) as f64).collect());
        self.trials = trials;
        Ok(self)
    }
}
