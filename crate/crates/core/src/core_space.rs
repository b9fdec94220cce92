//! Geometry of the low-dimensional output ("core") space.
//!
//! A classifier's FIM pulls back the metric of the space its outputs live in:
//! the probability simplex for softmax heads, the hypercube for independent
//! sigmoid heads. Everything here is C x C and cheap.
//!
//! Class indices are 0-based throughout. Order statistics `p_(1) <= ... <= p_(C)`
//! come from a stable ascending sort, so ties keep their input order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::linalg::{self, SymmetricEigen};

/// Tolerance on `sum(p) == 1`.
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// Fixed power-iteration budget used by the low-rank estimators.
pub const DEFAULT_POWER_ITERS: usize = 30;

/// Below this spectral gap the top eigenvector is treated as non-unique.
pub const DEGENERATE_GAP: f64 = 1e-10;

/// A point of the closed probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = FimError;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(FimError::InvalidProbVector(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(FimError::InvalidProbVector(format!("entry {i} is {v}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(FimError::InvalidProbVector(format!("entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / classes as f64; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|p| p * p).sum()
    }

    /// Entries sorted ascending (stable).
    pub fn ascending(&self) -> Vec<f64> {
        let mut sorted = self.0.clone();
        sorted.sort_by(f64::total_cmp);
        sorted
    }

    /// `max_i p_i (1 - p_i)`.
    pub fn max_bernoulli_variance(&self) -> f64 {
        self.0.iter().map(|p| p * (1.0 - p)).fold(0.0, f64::max)
    }
}

/// Draws from a symmetric Dirichlet(alpha) by normalizing Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(classes: usize, alpha: f64, rng: &mut R) -> Result<ProbVector> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FimError::InvalidArgument(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return ProbVector::new(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    Simplex,
    Hypercube,
    DiagWeights,
}

/// The FIM of the core space, a C x C symmetric psd matrix.
#[derive(Debug, Clone)]
pub struct CoreFim {
    pub matrix: DMatrix<f64>,
    pub kind: CoreKind,
}

impl CoreFim {
    pub fn new(matrix: DMatrix<f64>, kind: CoreKind) -> Result<Self> {
        linalg::ensure_symmetric(&matrix)?;
        Ok(Self { matrix, kind })
    }
}

/// `diag(p) - p p^T`.
pub fn simplex_fim(p: &ProbVector) -> CoreFim {
    let v = p.to_dvector();
    let matrix = DMatrix::from_diagonal(&v) - &v * v.transpose();
    CoreFim { matrix, kind: CoreKind::Simplex }
}

/// `diag(p_i (1 - p_i))` for independent Bernoulli coordinates.
pub fn hypercube_fim(p: &[f64]) -> Result<CoreFim> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(FimError::InvalidProbVector(format!("hypercube coordinate {i} is {v}")));
    }
    let diag = DVector::from_iterator(p.len(), p.iter().map(|q| q * (1.0 - q)));
    Ok(CoreFim { matrix: DMatrix::from_diagonal(&diag), kind: CoreKind::Hypercube })
}

/// Generic diagonal core `diag(zeta)`.
pub fn diag_weights_fim(zeta: &[f64]) -> Result<CoreFim> {
    if let Some((i, v)) = zeta.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(FimError::InvalidArgument(format!("diagonal weight {i} is {v}")));
    }
    let diag = DVector::from_column_slice(zeta);
    Ok(CoreFim { matrix: DMatrix::from_diagonal(&diag), kind: CoreKind::DiagWeights })
}

#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    /// Ascending.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal columns matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// `lambda_C - lambda_{C-1}`.
    pub spectral_gap: f64,
}

impl SpectralDecomp {
    pub fn top(&self) -> (f64, DVector<f64>) {
        let last = self.eigenvalues.len() - 1;
        (self.eigenvalues[last], self.eigenvectors.column(last).into_owned())
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        SymmetricEigen { values: self.eigenvalues.clone(), vectors: self.eigenvectors.clone() }.reconstruct()
    }
}

impl From<SymmetricEigen> for SpectralDecomp {
    fn from(eig: SymmetricEigen) -> Self {
        let n = eig.values.len();
        let spectral_gap = if n >= 2 { eig.values[n - 1] - eig.values[n - 2] } else { 0.0 };
        Self { eigenvalues: eig.values, eigenvectors: eig.vectors, spectral_gap }
    }
}

pub fn spectrum(m: &CoreFim) -> Result<SpectralDecomp> {
    Ok(linalg::jacobi_eigen(&m.matrix)?.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBracket {
    pub lower: f64,
    pub upper: f64,
}

impl SpectrumBracket {
    pub fn contains(&self, x: f64, tol: f64) -> bool {
        self.lower - tol <= x && x <= self.upper + tol
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Closed-form bracket on the largest eigenvalue of the simplex FIM.
pub fn lambda_max_bracket(p: &ProbVector) -> SpectrumBracket {
    let c = p.classes();
    let sorted = p.ascending();
    let largest = sorted[c - 1];
    let second = sorted[c - 2];
    let bern = p.max_bernoulli_variance();
    let trace = 1.0 - p.norm_sq();
    let lower = bern.max(second).max(trace / (c - 1) as f64);
    let upper = largest.min(2.0 * bern).min(trace);
    SpectrumBracket { lower, upper }
}

/// Settings for power iteration on the simplex FIM.
///
/// With `residual_tol == 0` the loop runs exactly `max_iters` steps; otherwise
/// it stops early once `||I v - lambda v|| <= residual_tol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub max_iters: usize,
    pub residual_tol: f64,
}

impl PowerIteration {
    pub const fn fixed(iters: usize) -> Self {
        Self { max_iters: iters, residual_tol: 0.0 }
    }

    pub const fn until_converged(max_iters: usize, residual_tol: f64) -> Self {
        Self { max_iters, residual_tol }
    }
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self::fixed(DEFAULT_POWER_ITERS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMethod {
    Full,
    Power(PowerIteration),
}

#[derive(Debug, Clone)]
pub struct TopEigenpair {
    pub value: f64,
    pub vector: DVector<f64>,
    pub iterations: usize,
}

/// `I^Delta v = p o v - (p^T v) p`, without forming the matrix.
fn apply_simplex_fim(p: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    p.component_mul(v) - p * p.dot(v)
}

/// `||I^Delta v - lambda v||`.
pub fn rayleigh_residual(p: &ProbVector, v: &DVector<f64>, lambda: f64) -> f64 {
    let pv = p.to_dvector();
    (apply_simplex_fim(&pv, v) - v * lambda).norm()
}

/// Largest eigenpair of the simplex FIM.
///
/// The power variant starts from a Gaussian vector projected orthogonal to the
/// all-ones kernel direction, iterates `v <- normalize(p o v - (p^T v) p)` and
/// reads off `lambda = p^T (v o v) - (p^T v)^2`.
pub fn top_eigenpair<R: Rng + ?Sized>(p: &ProbVector, method: EigenMethod, rng: &mut R) -> Result<TopEigenpair> {
    let settings = match method {
        EigenMethod::Full => {
            let (value, vector) = spectrum(&simplex_fim(p))?.top();
            return Ok(TopEigenpair { value, vector, iterations: 0 });
        }
        EigenMethod::Power(settings) => settings,
    };
    if settings.max_iters == 0 {
        return Err(FimError::InvalidArgument("power iteration needs at least one step".into()));
    }
    let c = p.classes();
    let pv = p.to_dvector();

    let mut v = DVector::from_iterator(c, (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mean = v.mean();
    v.add_scalar_mut(-mean);
    if v.norm() == 0.0 {
        v = DVector::zeros(c);
        v[0] = 1.0;
        v[1] = -1.0;
    }
    v /= v.norm();

    let mut iterations = 0;
    while iterations < settings.max_iters {
        let w = apply_simplex_fim(&pv, &v);
        if settings.residual_tol > 0.0 {
            let lambda = v.dot(&w);
            if (&w - &v * lambda).norm() <= settings.residual_tol {
                break;
            }
        }
        let norm = w.norm();
        if norm == 0.0 {
            // v lies in the kernel; the whole matrix vanishes (one-hot p).
            break;
        }
        v = w / norm;
        iterations += 1;
    }
    let pv_dot = pv.dot(&v);
    let value = pv.dot(&v.component_mul(&v)) - pv_dot * pv_dot;
    linalg::canonicalize_sign(&mut v);
    Ok(TopEigenpair { value, vector: v, iterations })
}

/// The upper (diagonal) envelope `diag(p)`.
pub fn diagonal_envelope(p: &ProbVector) -> DMatrix<f64> {
    DMatrix::from_diagonal(&p.to_dvector())
}

/// The lower (rank-1) envelope `lambda_C v_C v_C^T`.
pub fn rank1_envelope(p: &ProbVector) -> Result<DMatrix<f64>> {
    let (lambda, v) = spectrum(&simplex_fim(p))?.top();
    Ok(lambda * &v * v.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeErrors {
    /// `||p||^2`, the closed form of the diagonal-envelope error.
    pub diag_error: f64,
    /// `||I^Delta - diag(p)||_F` computed from the matrices.
    pub diag_error_realized: f64,
    /// `min{1 - ||p||^2 - p_(C-1), ||trimmed p||}`.
    pub rank1_error_bound: f64,
    /// `||I^Delta - lambda_C v_C v_C^T||_F` from the eigendecomposition.
    pub rank1_error_realized: f64,
}

pub fn envelope_errors(p: &ProbVector) -> Result<EnvelopeErrors> {
    let c = p.classes();
    let fim = simplex_fim(p);
    let sorted = p.ascending();
    let norm_sq = p.norm_sq();
    // trimmed p: drop the smallest and the largest entries
    let trimmed = sorted[1..c - 1].iter().map(|x| x * x).sum::<f64>().sqrt();
    let rank1_error_bound = (1.0 - norm_sq - sorted[c - 2]).min(trimmed);

    let eig = spectrum(&fim)?;
    let rank1_error_realized = eig.eigenvalues.iter().take(c - 1).map(|l| l * l).sum::<f64>().sqrt();
    Ok(EnvelopeErrors {
        diag_error: norm_sq,
        diag_error_realized: (&fim.matrix - diagonal_envelope(p)).norm(),
        rank1_error_bound,
        rank1_error_realized,
    })
}

/// The single-label core estimate `R(y) = (e_y - p)(e_y - p)^T`.
#[derive(Debug, Clone)]
pub struct EmpiricalCore {
    pub matrix: DMatrix<f64>,
    pub label: usize,
}

pub fn empirical_core(p: &ProbVector, label: usize) -> Result<EmpiricalCore> {
    let c = p.classes();
    if label >= c {
        return Err(FimError::IndexOutOfRange { index: label, bound: c });
    }
    let mut d = -p.to_dvector();
    d[label] += 1.0;
    Ok(EmpiricalCore { matrix: &d * d.transpose(), label })
}

/// Entrywise `Var(R_ij)` of `R(y)` for `y ~ p`.
pub fn empirical_core_variance(p: &ProbVector) -> DMatrix<f64> {
    let q = p.as_slice();
    let c = q.len();
    DMatrix::from_fn(c, c, |i, j| {
        if i == j {
            let b = q[i] * (1.0 - q[i]);
            b * (1.0 - 4.0 * b)
        } else {
            q[i] * q[j] * (q[i] + q[j] - 4.0 * q[i] * q[j])
        }
    })
}

/// Entrywise coefficient of variation `Std(R_ij) / |I^Delta_ij|`.
///
/// Entries where both the mean and the variance vanish report 0; a vanishing
/// mean with positive variance reports infinity.
pub fn empirical_core_cv(p: &ProbVector) -> DMatrix<f64> {
    let var = empirical_core_variance(p);
    let fim = simplex_fim(p).matrix;
    DMatrix::from_fn(var.nrows(), var.ncols(), |i, j| {
        let sd = var[(i, j)].max(0.0).sqrt();
        let mean = fim[(i, j)].abs();
        match (sd == 0.0, mean == 0.0) {
            (true, _) => 0.0,
            (false, true) => f64::INFINITY,
            (false, false) => sd / mean,
        }
    })
}

/// Lower bounds on the worst-label error of `R(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EfimCoreFloor {
    /// `1 + ||p||^2 - lambda_C - 2 p_(1)`.
    pub tight: f64,
    /// `2 ||p||^2 - 2 p_(1)`.
    pub relaxed: f64,
}

pub fn efim_core_floor(p: &ProbVector) -> Result<EfimCoreFloor> {
    let lambda_max = spectrum(&simplex_fim(p))?.top().0;
    let smallest = p.ascending()[0];
    let norm_sq = p.norm_sq();
    Ok(EfimCoreFloor {
        tight: 1.0 + norm_sq - lambda_max - 2.0 * smallest,
        relaxed: 2.0 * norm_sq - 2.0 * smallest,
    })
}

/// The label maximizing `||R(y) - I^Delta||_F` by exhaustive search, with that
/// error. Ties resolve to the lowest label.
pub fn adversarial_label(p: &ProbVector) -> Result<(usize, f64)> {
    let fim = simplex_fim(p).matrix;
    let mut best = (0, f64::NEG_INFINITY);
    for y in 0..p.classes() {
        let err = (empirical_core(p, y)?.matrix - &fim).norm();
        if err > best.1 {
            best = (y, err);
        }
    }
    Ok(best)
}
