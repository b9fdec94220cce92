use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{check_storage, EstimatorKind, FimEstimate, Normalization, Storage};
use crate::ad::Tensor;
use crate::core_space::{empirical_core, simplex_fim, ProbVector};
use crate::error::{FimError, Result};
use crate::network::{batch_geometry, trace_forward, NetworkSpec, ParamVector, SampleGeometry};

fn ensure_nonempty(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(FimError::InvalidArgument("empty dataset".into()));
    }
    Ok(())
}

fn one_hot(classes: usize, y: usize) -> Tensor {
    let mut v = vec![0.0; classes];
    v[y] = 1.0;
    Tensor::matrix(1, classes, v).expect("1 x C")
}

/// Log-likelihood gradients `dl_y/dtheta` for every class at one input, by
/// `C` reverse sweeps through `log_softmax`. Returns the probabilities too.
fn loglik_gradients(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &[f64],
    labels: Option<&[usize]>,
) -> Result<(Vec<f64>, Vec<(usize, Vec<f64>)>, usize)> {
    let c = spec.classes();
    let mut traced = trace_forward(spec, theta, &DMatrix::from_row_slice(1, x.len(), x))?;
    let lsm = traced.tape.log_softmax(traced.logits)?;
    let probs: Vec<f64> = traced.tape.value(lsm).data().iter().map(|v| v.exp()).collect();
    let ys: Vec<usize> = labels.map_or_else(|| (0..c).collect(), <[usize]>::to_vec);
    let mut grads = Vec::with_capacity(ys.len());
    for y in ys {
        let root = traced.tape.weighted_sum(lsm, one_hot(c, y))?;
        let g = traced.tape.backward(root)?;
        grads.push((y, g.get(traced.theta).expect("parameter gradient").data().to_vec()));
    }
    Ok((probs, grads, traced.tape.backward_passes()))
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Ground truth: `sum_x sum_y p_y (dl_y/dtheta)(dl_y/dtheta)^T`.
pub fn exact_fim_definition(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    storage: Storage,
) -> Result<FimEstimate> {
    ensure_nonempty(x)?;
    let mut est = FimEstimate::zeros(EstimatorKind::ExactDef, storage, Normalization::Sum, theta.dim())?;
    for row in rows(x) {
        let (probs, grads, passes) = loglik_gradients(spec, theta, &row, None)?;
        for (y, g) in grads {
            est.add_outer(&g, probs[y]);
        }
        est.meta.backward_passes += passes;
    }
    Ok(est)
}

/// `sum_x J^T I(z) J` with the simplex core `diag(p) - p p^T`.
pub fn exact_fim_pullback(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    storage: Storage,
) -> Result<FimEstimate> {
    ensure_nonempty(x)?;
    check_storage(storage, theta.dim())?;
    let geoms = batch_geometry(spec, theta, x)?;
    pullback_from_geometry(&geoms, storage, theta.dim(), spec.classes())
}

pub(crate) fn pullback_from_geometry(
    geoms: &[SampleGeometry],
    storage: Storage,
    dim: usize,
    classes: usize,
) -> Result<FimEstimate> {
    let mut est = FimEstimate::zeros(EstimatorKind::ExactPullback, storage, Normalization::Sum, dim)?;
    for g in geoms {
        est.add_pullback(&g.jacobian.matrix, &simplex_fim(&g.probs).matrix);
    }
    est.meta.backward_passes = classes * geoms.len();
    Ok(est)
}

fn check_labels(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != x.nrows() {
        return Err(FimError::ShapeMismatch {
            op: "labels",
            detail: format!("{} labels for {} inputs", labels.len(), x.nrows()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(FimError::IndexOutOfRange { index: bad, bound: classes });
    }
    Ok(())
}

/// Empirical FIM `sum_(x,y) (dl_y/dtheta)(dl_y/dtheta)^T` at the given labels,
/// one reverse sweep per sample.
pub fn efim(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    labels: &[usize],
    storage: Storage,
) -> Result<FimEstimate> {
    ensure_nonempty(x)?;
    check_labels(x, labels, spec.classes())?;
    let mut est = FimEstimate::zeros(EstimatorKind::Efim, storage, Normalization::Sum, theta.dim())?;
    for (row, &y) in rows(x).iter().zip(labels) {
        let (_, grads, passes) = loglik_gradients(spec, theta, row, Some(&[y]))?;
        est.add_outer(&grads[0].1, 1.0);
        est.meta.backward_passes += passes;
    }
    Ok(est)
}

/// The same quantity through the core-space identity `sum_x J^T R(y) J`.
pub fn efim_pullback(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    labels: &[usize],
    storage: Storage,
) -> Result<FimEstimate> {
    ensure_nonempty(x)?;
    check_labels(x, labels, spec.classes())?;
    let geoms = batch_geometry(spec, theta, x)?;
    let mut est = FimEstimate::zeros(EstimatorKind::Efim, storage, Normalization::Sum, theta.dim())?;
    for (g, &y) in geoms.iter().zip(labels) {
        est.add_pullback(&g.jacobian.matrix, &empirical_core(&g.probs, y)?.matrix);
    }
    est.meta.backward_passes = spec.classes() * geoms.len();
    Ok(est)
}

/// Draws a class from `p`.
pub fn sample_label<R: Rng + ?Sized>(p: &ProbVector, rng: &mut R) -> usize {
    WeightedIndex::new(p.as_slice()).expect("probabilities sum to one").sample(rng)
}

/// Monte-Carlo FIM `(1/m) sum_k g_k g_k^T` with `x` uniform over the dataset
/// and `y ~ p(y|x)`. Mean-normalized: its expectation is `F / |D_x|`.
pub fn mc_fim<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    m: usize,
    rng: &mut R,
    storage: Storage,
) -> Result<FimEstimate> {
    ensure_nonempty(x)?;
    if m == 0 {
        return Err(FimError::InvalidArgument("Monte-Carlo FIM needs m >= 1 draws".into()));
    }
    let mut est = FimEstimate::zeros(EstimatorKind::Mc, storage, Normalization::Mean, theta.dim())?;
    let data = rows(x);
    let mut cache: Vec<Option<SampleGeometry>> = vec![None; data.len()];
    for _ in 0..m {
        let i = rng.random_range(0..data.len());
        if cache[i].is_none() {
            cache[i] = Some(crate::network::sample_geometry(spec, theta, &data[i])?);
        }
        let geom = cache[i].as_ref().expect("filled above");
        let y = sample_label(&geom.probs, rng);
        // dl_y/dtheta = J^T (e_y - p)
        let mut resid = -geom.probs.to_dvector();
        resid[y] += 1.0;
        let g: DVector<f64> = geom.jacobian.matrix.transpose() * resid;
        est.add_outer(g.as_slice(), 1.0 / m as f64);
        est.meta.backward_passes += 1;
    }
    est.meta.probe_count = m;
    Ok(est)
}
