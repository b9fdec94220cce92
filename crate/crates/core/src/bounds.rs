//! Deterministic Loewner-order bounds on the FIM and how tight they are.
//!
//! Everything here is computed per sample from the logits' probabilities `p`
//! and the Jacobian `J = dz/dtheta` (singular values `sigma_1 <= ... <=
//! sigma_C`), then summed over the dataset.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::core_space::{empirical_core, simplex_fim, spectrum, ProbVector};
use crate::error::{FimError, Result};
use crate::estimators::{check_storage, Storage};
use crate::linalg;
use crate::network::{batch_geometry, NetworkSpec, ParamVector, SampleGeometry};

/// `lower <= F <= upper` in the Loewner order.
#[derive(Debug, Clone)]
pub struct BoundPair {
    /// `sum_x sum_(top k) lambda_i J^T v_i v_i^T J`; rank at most `k |D_x|`.
    pub lower: DMatrix<f64>,
    /// `sum_x sum_y p_y dz_y dz_y^T`, i.e. `J^T diag(p) J`.
    pub upper: DMatrix<f64>,
    pub k: usize,
}

fn check_k(k: usize, classes: usize) -> Result<()> {
    if k == 0 || k >= classes {
        return Err(FimError::RankOutOfRange { k, max: classes - 1 });
    }
    Ok(())
}

fn sym_pullback(jac: &DMatrix<f64>, core: &DMatrix<f64>) -> DMatrix<f64> {
    let m = jac.transpose() * (core * jac);
    (&m + m.transpose()) * 0.5
}

/// The top-k part of the simplex core, `sum_(top k) lambda_i v_i v_i^T`.
fn top_k_core(p: &ProbVector, k: usize) -> Result<DMatrix<f64>> {
    let decomp = spectrum(&simplex_fim(p))?;
    let c = p.classes();
    let mut core = DMatrix::zeros(c, c);
    for i in (c - k)..c {
        let v = decomp.eigenvectors.column(i);
        core += decomp.eigenvalues[i] * &v * v.transpose();
    }
    Ok(core)
}

pub fn bounds_from_geometry(geoms: &[SampleGeometry], k: usize, dim: usize) -> Result<BoundPair> {
    let mut lower = DMatrix::zeros(dim, dim);
    let mut upper = DMatrix::zeros(dim, dim);
    for g in geoms {
        check_k(k, g.probs.classes())?;
        lower += sym_pullback(&g.jacobian.matrix, &top_k_core(&g.probs, k)?);
        upper += sym_pullback(&g.jacobian.matrix, &DMatrix::from_diagonal(&g.probs.to_dvector()));
    }
    Ok(BoundPair { lower, upper, k })
}

pub fn pullback_bounds(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>, k: usize) -> Result<BoundPair> {
    check_k(k, spec.classes())?;
    check_storage(Storage::Dense, theta.dim())?;
    bounds_from_geometry(&batch_geometry(spec, theta, x)?, k, theta.dim())
}

/// Exact FIM from geometry, `sum_x J^T (diag(p) - p p^T) J`.
pub fn fim_from_geometry(geoms: &[SampleGeometry], dim: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(dim, dim);
    for g in geoms {
        f += sym_pullback(&g.jacobian.matrix, &simplex_fim(&g.probs).matrix);
    }
    f
}

/// The trace chain `lower <= vn_lower <= trace <= upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceBounds {
    /// `sum_x lambda_C sigma_1^2`.
    pub lower: f64,
    /// `sum_x sum_(i >= 2) lambda_i sigma_(C+1-i)^2`.
    pub vn_lower: f64,
    pub trace: f64,
    /// `sum_x sum_y p_y ||dz_y||^2`.
    pub upper: f64,
}

impl TraceBounds {
    pub fn is_ordered(&self, tol: f64) -> bool {
        self.lower <= self.vn_lower + tol && self.vn_lower <= self.trace + tol && self.trace <= self.upper + tol
    }
}

pub fn trace_bounds_from_geometry(geoms: &[SampleGeometry]) -> Result<TraceBounds> {
    let mut out = TraceBounds { lower: 0.0, vn_lower: 0.0, trace: 0.0, upper: 0.0 };
    for g in geoms {
        let c = g.probs.classes();
        let lambda = spectrum(&simplex_fim(&g.probs))?.eigenvalues;
        let sigma = &g.jacobian.singular_values;
        let jac = &g.jacobian.matrix;
        out.lower += lambda[c - 1] * sigma[0] * sigma[0];
        out.vn_lower += (1..c).map(|i| lambda[i] * sigma[c - 1 - i].powi(2)).sum::<f64>();
        out.trace += sym_pullback(jac, &simplex_fim(&g.probs).matrix).trace();
        out.upper += g.probs.as_slice().iter().enumerate().map(|(y, py)| py * jac.row(y).norm_squared()).sum::<f64>();
    }
    Ok(out)
}

pub fn trace_bounds(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>) -> Result<TraceBounds> {
    trace_bounds_from_geometry(&batch_geometry(spec, theta, x)?)
}

/// `||J^T A J||_2` through the C x C reduction `G^(1/2) A G^(1/2)`, `G = J J^T`,
/// which has the same non-zero spectrum.
pub fn pullback_spectral_norm(jac: &DMatrix<f64>, core: &DMatrix<f64>) -> Result<f64> {
    let root = linalg::psd_sqrt(&(jac * jac.transpose()))?;
    let reduced = &root * core * &root;
    linalg::spectral_norm_symmetric(&((&reduced + reduced.transpose()) * 0.5))
}

/// Per-sample eFIM error: worst label by exhaustive search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleEfimGap {
    pub worst_label: usize,
    /// `max_y ||J^T (I(z) - R(y)) J||_2`.
    pub worst_gap: f64,
    /// `(1 + ||p||^2) sigma_C^2`, which bounds the gap for every label.
    pub universal_bound: f64,
    /// `sigma_1^2 |1 + ||p||^2 - lambda_C - 2 p_(1)|`, reached by some label.
    pub adversarial_floor: f64,
}

pub fn sample_efim_gap(geom: &SampleGeometry) -> Result<SampleEfimGap> {
    let p = &geom.probs;
    let c = p.classes();
    let sigma = &geom.jacobian.singular_values;
    let core = simplex_fim(p).matrix;
    let lambda_c = spectrum(&simplex_fim(p))?.eigenvalues[c - 1];
    let mut worst = (0, f64::NEG_INFINITY);
    for y in 0..c {
        let diff = &core - empirical_core(p, y)?.matrix;
        let gap = pullback_spectral_norm(&geom.jacobian.matrix, &diff)?;
        if gap > worst.1 {
            worst = (y, gap);
        }
    }
    let norm_sq = p.norm_sq();
    let p_min = p.ascending()[0];
    Ok(SampleEfimGap {
        worst_label: worst.0,
        worst_gap: worst.1,
        universal_bound: (1.0 + norm_sq) * sigma[c - 1].powi(2),
        adversarial_floor: sigma[0].powi(2) * (1.0 + norm_sq - lambda_c - 2.0 * p_min).abs(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TightnessReport {
    pub k: usize,
    /// `sqrt(sum_x ||J^T p||^4)`.
    pub upper_gap_lhs: f64,
    /// `||upper - F||_F`.
    pub upper_gap: f64,
    /// `sum_x ||p||^2 sigma_C^2`.
    pub upper_gap_rhs: f64,
    /// `||F - lower||_F`.
    pub lower_gap: f64,
    /// `sum_x sqrt(sum_(i=2)^(C-k) sigma_(i+k)^4 p_(i)^2)`.
    pub lower_gap_rhs: f64,
    /// `sum_x sqrt(sum_(i=2)^(C-k) p_(i)^2) sigma_C^2`.
    pub lower_gap_rhs_relaxed: f64,
    /// Samples whose lower-gap term exceeds their upper-gap term. The lower
    /// bound is usually the tighter one, but not always.
    pub lower_not_tighter: usize,
    /// `sum_x (1 + ||p||^2) sigma_C^2`.
    pub efim_gap_bound: f64,
    /// `||F - eFIM||_2` at the supplied labels.
    pub efim_gap: Option<f64>,
    /// Sum of per-sample adversarial floors.
    pub efim_adversarial_floor: f64,
    pub per_sample: Vec<SampleEfimGap>,
    pub trace: TraceBounds,
}

pub fn tightness_report(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    k: usize,
    labels: Option<&[usize]>,
) -> Result<TightnessReport> {
    check_k(k, spec.classes())?;
    check_storage(Storage::Dense, theta.dim())?;
    let geoms = batch_geometry(spec, theta, x)?;
    let dim = theta.dim();
    let c = spec.classes();
    let f = fim_from_geometry(&geoms, dim);
    let pair = bounds_from_geometry(&geoms, k, dim)?;

    let mut lhs_sq = 0.0;
    let mut upper_gap_rhs = 0.0;
    let mut lower_gap_rhs = 0.0;
    let mut lower_gap_rhs_relaxed = 0.0;
    let mut lower_not_tighter = 0;
    let mut per_sample = Vec::with_capacity(geoms.len());
    for g in &geoms {
        let sigma = &g.jacobian.singular_values;
        let asc = g.probs.ascending();
        let jtp = g.jacobian.matrix.transpose() * g.probs.to_dvector();
        lhs_sq += jtp.norm_squared().powi(2);
        let upper_term = g.probs.norm_sq() * sigma[c - 1].powi(2);
        // 0-based: i runs over 1..C-k
        let lower_term = (1..c - k).map(|i| sigma[i + k].powi(4) * asc[i].powi(2)).sum::<f64>().sqrt();
        let relaxed = (1..c - k).map(|i| asc[i].powi(2)).sum::<f64>().sqrt() * sigma[c - 1].powi(2);
        if lower_term > upper_term {
            lower_not_tighter += 1;
        }
        upper_gap_rhs += upper_term;
        lower_gap_rhs += lower_term;
        lower_gap_rhs_relaxed += relaxed;
        per_sample.push(sample_efim_gap(g)?);
    }

    let efim_gap = match labels {
        Some(labels) => {
            if labels.len() != geoms.len() {
                return Err(FimError::ShapeMismatch {
                    op: "labels",
                    detail: format!("{} labels for {} inputs", labels.len(), geoms.len()),
                });
            }
            let mut efim = DMatrix::zeros(dim, dim);
            for (g, &y) in geoms.iter().zip(labels) {
                efim += sym_pullback(&g.jacobian.matrix, &empirical_core(&g.probs, y)?.matrix);
            }
            Some(linalg::spectral_norm_symmetric(&(&f - efim))?)
        }
        None => None,
    };

    Ok(TightnessReport {
        k,
        upper_gap_lhs: lhs_sq.sqrt(),
        upper_gap: (&pair.upper - &f).norm(),
        upper_gap_rhs,
        lower_gap: (&f - &pair.lower).norm(),
        lower_gap_rhs,
        lower_gap_rhs_relaxed,
        lower_not_tighter,
        efim_gap_bound: per_sample.iter().map(|s| s.universal_bound).sum(),
        efim_gap,
        efim_adversarial_floor: per_sample.iter().map(|s| s.adversarial_floor).sum(),
        per_sample,
        trace: trace_bounds_from_geometry(&geoms)?,
    })
}

/// Smallest eigenvalue of `b - a`; non-negative iff `a <= b`.
pub fn loewner_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FimError::ShapeMismatch {
            op: "loewner_margin",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    linalg::ensure_symmetric(a)?;
    linalg::ensure_symmetric(b)?;
    linalg::min_eigenvalue(&(b - a))
}
