//! Test fixtures and independent oracles shared by the integration suites.
#![allow(dead_code)]

use fimlab::network::{forward_logits, init_params, Activation, NetworkSpec, ParamVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    // row by row so fixtures do not depend on nalgebra's storage order
    let data: Vec<f64> = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

#[derive(Debug, Clone, Copy)]
pub enum Arch {
    Logistic,
    Linear,
    TanhMlp,
}

pub const ARCHS: [Arch; 3] = [Arch::Logistic, Arch::Linear, Arch::TanhMlp];

/// The three default test architectures: scalar logistic, linear softmax
/// `d -> C`, and `d -> 16 -> C` tanh.
pub fn arch_spec(arch: Arch, d: usize, classes: usize) -> NetworkSpec {
    match arch {
        Arch::Logistic => NetworkSpec::logistic_scalar(),
        Arch::Linear => NetworkSpec::linear_softmax(d, classes, true).unwrap(),
        Arch::TanhMlp => NetworkSpec::mlp(d, &[16], classes, Activation::Tanh).unwrap(),
    }
}

/// Parameters scaled up from the default initialization so that
/// probabilities spread away from uniform.
pub fn spread_params<R: Rng>(spec: &NetworkSpec, scale: f64, rng: &mut R) -> ParamVector {
    let mut theta = init_params(spec, rng);
    for v in &mut theta.flat {
        *v *= scale;
    }
    theta
}

/// A random small instance: network with `classes` outputs and at most
/// `max_dim` parameters, `n` inputs.
pub fn small_instance<R: Rng>(
    classes: usize,
    n: usize,
    max_dim: usize,
    rng: &mut R,
) -> (NetworkSpec, ParamVector, DMatrix<f64>) {
    let spec = loop {
        let d = rng.random_range(1..=4);
        let candidate = if rng.random::<bool>() {
            NetworkSpec::linear_softmax(d, classes, rng.random::<bool>()).unwrap()
        } else {
            let h = rng.random_range(1..=4);
            let act = if rng.random::<bool>() { Activation::Tanh } else { Activation::Relu };
            NetworkSpec::mlp(d, &[h], classes, act).unwrap()
        };
        if candidate.dim() <= max_dim {
            break candidate;
        }
        if classes * 2 > max_dim {
            break NetworkSpec::linear_softmax(1, classes, false).unwrap();
        }
    };
    let scale = rng.random_range(0.5..2.5);
    let theta = spread_params(&spec, scale, rng);
    let x = gaussian_matrix(n, spec.input_dim(), 1.0, rng);
    (spec, theta, x)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Central-difference Jacobian of the logits, `C x dim`.
pub fn fd_jacobian(spec: &NetworkSpec, theta: &ParamVector, x: &[f64], h: f64) -> DMatrix<f64> {
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let c = spec.classes();
    let mut jac = DMatrix::zeros(c, theta.dim());
    for k in 0..theta.dim() {
        let mut plus = theta.clone();
        plus.flat[k] += h;
        let mut minus = theta.clone();
        minus.flat[k] -= h;
        let zp = forward_logits(spec, &plus, &xm).unwrap();
        let zm = forward_logits(spec, &minus, &xm).unwrap();
        for i in 0..c {
            jac[(i, k)] = (zp[(0, i)] - zm[(0, i)]) / (2.0 * h);
        }
    }
    jac
}

/// Closed-form Jacobian of a linear-softmax model: `dz_i/dW[k, i] = x_k`,
/// `dz_i/db_i = 1`.
pub fn linear_jacobian(spec: &NetworkSpec, x: &[f64]) -> DMatrix<f64> {
    let c = spec.classes();
    let d = spec.input_dim();
    let mut jac = DMatrix::zeros(c, spec.dim());
    for i in 0..c {
        for k in 0..d {
            jac[(i, k * c + i)] = x[k];
        }
        if spec.bias {
            jac[(i, d * c + i)] = 1.0;
        }
    }
    jac
}

/// Linear-softmax logits by hand: `z = W^T x + b`.
pub fn linear_logits(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Vec<f64> {
    let c = spec.classes();
    let d = spec.input_dim();
    (0..c)
        .map(|i| {
            let mut z: f64 = (0..d).map(|k| x[k] * theta.flat[k * c + i]).sum();
            if spec.bias {
                z += theta.flat[d * c + i];
            }
            z
        })
        .collect()
}

/// Exact FIM of a linear-softmax model from the closed forms above:
/// `sum_x J^T (diag(p) - p p^T) J`.
pub fn linear_fim_oracle(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(spec.dim(), spec.dim());
    for r in 0..x.nrows() {
        let row: Vec<f64> = x.row(r).iter().copied().collect();
        let p = DVector::from_vec(softmax(&linear_logits(spec, theta, &row)));
        let core = DMatrix::from_diagonal(&p) - &p * p.transpose();
        let j = linear_jacobian(spec, &row);
        f += j.transpose() * core * j;
    }
    f
}

/// Smallest eigenvalue through nalgebra's own solver, independent of the
/// crate's Jacobi implementation.
pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.max()
}

/// Spectral norm through nalgebra's SVD.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Every vector in `{-1, +1}^n`, in binary counting order.
pub fn all_sign_vectors(n: usize) -> impl Iterator<Item = Vec<f64>> {
    assert!(n <= 20, "2^{n} probes is too many");
    (0u32..(1 << n)).map(move |bits| (0..n).map(|j| if bits >> j & 1 == 1 { 1.0 } else { -1.0 }).collect())
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}
