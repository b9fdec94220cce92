mod common;

use common::{max_eig, min_eig, rng};
use fimlab::core_space::{
    diagonal_envelope, efim_core_floor, empirical_core, empirical_core_cv, empirical_core_variance, envelope_errors,
    hypercube_fim, lambda_max_bracket, rank1_envelope, rayleigh_residual, sample_dirichlet, simplex_fim, spectrum,
    top_eigenpair, CoreKind, EigenMethod, PowerIteration, ProbVector,
};
use fimlab::FimError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn pv(v: &[f64]) -> ProbVector {
    ProbVector::new(v.to_vec()).unwrap()
}

/// `diag(p) - p p^T` entry by entry.
fn simplex_oracle(p: &[f64]) -> DMatrix<f64> {
    let c = p.len();
    DMatrix::from_fn(c, c, |i, j| if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] })
}

fn sorted(p: &[f64]) -> Vec<f64> {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn simplex_fim_examples() {
    let m = simplex_fim(&pv(&[0.5, 0.5]));
    assert_eq!(m.kind, CoreKind::Simplex);
    assert_eq!(m.matrix, DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]));

    let third = 1.0 / 3.0;
    let m = simplex_fim(&pv(&[third; 3]));
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 2.0 / 9.0 } else { -1.0 / 9.0 };
            assert!(close(m.matrix[(i, j)], want, 1e-15));
        }
    }

    let m = simplex_fim(&pv(&[0.25, 0.75]));
    let want = DMatrix::from_row_slice(2, 2, &[0.1875, -0.1875, -0.1875, 0.1875]);
    assert!((m.matrix - want).abs().max() < 1e-15);
}

#[test]
fn prob_vector_rejects_invalid_points() {
    assert!(matches!(ProbVector::new(vec![0.5, 0.6]), Err(FimError::InvalidProbVector(_))));
    assert!(matches!(ProbVector::new(vec![1.2, -0.2]), Err(FimError::InvalidProbVector(_))));
    assert!(matches!(ProbVector::new(vec![1.0]), Err(FimError::InvalidProbVector(_))));
    assert!(ProbVector::new(vec![0.0, 1.0]).is_ok());
}

#[test]
fn hypercube_examples() {
    assert_eq!(hypercube_fim(&[0.5, 0.5]).unwrap().matrix, DMatrix::from_diagonal_element(2, 2, 0.25));
    assert_eq!(hypercube_fim(&[0.0, 1.0]).unwrap().matrix, DMatrix::zeros(2, 2));
    let m = hypercube_fim(&[0.25, 0.75, 0.5]).unwrap();
    assert_eq!(m.kind, CoreKind::Hypercube);
    let want = DVector::from_vec(vec![0.1875, 0.1875, 0.25]);
    assert!((m.matrix.diagonal() - want).abs().max() < 1e-15);
    assert!(hypercube_fim(&[0.5, 1.5]).is_err());
    assert!(hypercube_fim(&[-0.1, 0.5]).is_err());
}

#[test]
fn spectrum_examples() {
    let third = 1.0 / 3.0;
    let s = spectrum(&simplex_fim(&pv(&[third; 3]))).unwrap();
    assert!(close(s.eigenvalues[0], 0.0, 1e-14));
    assert!(close(s.eigenvalues[1], third, 1e-14) && close(s.eigenvalues[2], third, 1e-14));

    let s = spectrum(&simplex_fim(&pv(&[0.5, 0.5]))).unwrap();
    assert!(close(s.eigenvalues[0], 0.0, 1e-15) && close(s.eigenvalues[1], 0.5, 1e-15));

    // characteristic polynomial on the complement of e: for C = 3 the nonzero
    // eigenvalues solve t^2 - (1 - |p|^2) t + 3 p1 p2 p3 = 0
    let p = [0.1, 0.2, 0.7];
    let s = spectrum(&simplex_fim(&pv(&p))).unwrap();
    let tr: f64 = 0.46;
    let det = 3.0 * p[0] * p[1] * p[2];
    let disc = (tr * tr - 4.0 * det).sqrt();
    assert!(close(s.eigenvalues[0], 0.0, 1e-14));
    assert!(close(s.eigenvalues[1], (tr - disc) / 2.0, 1e-13));
    assert!(close(s.eigenvalues[2], (tr + disc) / 2.0, 1e-13));
    assert!(close(s.eigenvalues[1] + s.eigenvalues[2], tr, 1e-14));
}

#[test]
fn spectrum_rejects_asymmetric_input() {
    let mut m = simplex_fim(&pv(&[0.2, 0.3, 0.5]));
    m.matrix[(0, 1)] += 1e-6;
    assert!(matches!(spectrum(&m), Err(FimError::NotSymmetric { .. })));
}

#[test]
fn bracket_examples() {
    let b = lambda_max_bracket(&pv(&[0.5, 0.5]));
    assert!(close(b.lower, 0.5, 1e-15) && close(b.upper, 0.5, 1e-15));
    let third = 1.0 / 3.0;
    let b = lambda_max_bracket(&pv(&[third; 3]));
    assert!(close(b.lower, third, 1e-15) && close(b.upper, third, 1e-15));

    let p = pv(&[0.1, 0.2, 0.7]);
    let b = lambda_max_bracket(&p);
    // lower = max(0.21, 0.2, 0.23), upper = min(0.7, 0.42, 0.46)
    assert!(close(b.lower, 0.23, 1e-15), "{b:?}");
    assert!(close(b.upper, 0.42, 1e-15), "{b:?}");
    let top = max_eig(&simplex_oracle(p.as_slice()));
    assert!(b.contains(top, 0.0));
}

#[test]
fn top_eigenpair_examples() {
    let mut r = rng(5);
    let p = pv(&[0.5, 0.5]);
    for method in [EigenMethod::Full, EigenMethod::Power(PowerIteration::default())] {
        let t = top_eigenpair(&p, method, &mut r).unwrap();
        assert!(close(t.value, 0.5, 1e-14));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // canonical sign puts the positive component first on a tie
        assert!(close(t.vector[0], h, 1e-12) && close(t.vector[1], -h, 1e-12), "{:?}", t.vector);
    }
    let u = ProbVector::uniform(3).unwrap();
    let t = top_eigenpair(&u, EigenMethod::Power(PowerIteration::default()), &mut r).unwrap();
    assert!(close(t.value, 1.0 / 3.0, 1e-14));
    assert!(rayleigh_residual(&u, &t.vector, t.value) <= 1e-8);
    assert!(t.vector.sum().abs() < 1e-12);
}

#[test]
fn power_iteration_matches_full_on_gapped_dirichlet() {
    let mut r = rng(11);
    let mut checked = 0;
    while checked < 50 {
        let p = sample_dirichlet(10, 1.0, &mut r).unwrap();
        let full = spectrum(&simplex_fim(&p)).unwrap();
        if full.spectral_gap < 0.01 {
            continue;
        }
        let power = top_eigenpair(&p, EigenMethod::Power(PowerIteration::until_converged(10_000, 1e-12)), &mut r).unwrap();
        assert!((power.value - full.top().0).abs() <= 1e-6);
        checked += 1;
    }
}

#[test]
fn power_iteration_rejects_zero_budget() {
    let mut r = rng(0);
    let p = pv(&[0.3, 0.7]);
    assert!(top_eigenpair(&p, EigenMethod::Power(PowerIteration::fixed(0)), &mut r).is_err());
}

#[test]
fn envelope_examples() {
    let e = envelope_errors(&pv(&[0.5, 0.5])).unwrap();
    assert!(close(e.diag_error, 0.5, 1e-15));
    let third = 1.0 / 3.0;
    let e = envelope_errors(&pv(&[third; 3])).unwrap();
    assert!(close(e.diag_error, third, 1e-15));

    let e = envelope_errors(&pv(&[0.98, 0.01, 0.01])).unwrap();
    assert!(close(e.rank1_error_bound, 0.01, 1e-15), "{e:?}");
    assert!(e.rank1_error_realized <= 0.01 + 1e-14, "{e:?}");
}

#[test]
fn empirical_core_examples() {
    let p = pv(&[0.5, 0.5]);
    let r = empirical_core(&p, 0).unwrap();
    assert_eq!(r.matrix, simplex_fim(&p).matrix);
    assert!(matches!(empirical_core(&p, 2), Err(FimError::IndexOutOfRange { index: 2, bound: 2 })));

    let p = pv(&[0.1, 0.2, 0.7]);
    let fim = simplex_oracle(p.as_slice());
    let err = (empirical_core(&p, 0).unwrap().matrix - &fim).norm();
    assert!(err >= 0.88 - 1e-12, "{err}");
    let floor = efim_core_floor(&p).unwrap();
    assert!(close(floor.relaxed, 0.88, 1e-14));
}

#[test]
fn variance_examples() {
    let v = empirical_core_variance(&pv(&[0.5, 0.5]));
    assert_eq!(v[(0, 0)], 0.0);
    assert_eq!(v[(0, 1)], 0.0);
    let p = [0.25, 0.75];
    let v = empirical_core_variance(&pv(&p));
    // exhaustive: R_11(y=0) = 0.75^2, R_11(y=1) = 0.25^2
    let mean = 0.25 * 0.5625 + 0.75 * 0.0625;
    let second = 0.25 * 0.5625f64.powi(2) + 0.75 * 0.0625f64.powi(2);
    assert!(close(v[(0, 0)], second - mean * mean, 1e-15));
    assert!(close(v[(0, 0)], 0.046875, 1e-15));
}

#[test]
fn cv_grows_without_bound_for_small_probability() {
    let mut last = 0.0;
    for k in 1..=6 {
        let pi = 10f64.powi(-k);
        let p = pv(&[pi, 0.5 - pi / 2.0, 0.5 - pi / 2.0]);
        let cv = empirical_core_cv(&p)[(0, 0)];
        assert!(cv > last, "{k}: {cv} <= {last}");
        last = cv;
    }
    assert!(last > 100.0, "{last}");
}

#[test]
fn boundary_point_has_extra_kernel() {
    let p = pv(&[0.0, 0.3, 0.7]);
    let s = spectrum(&simplex_fim(&p)).unwrap();
    assert!(s.eigenvalues[0].abs() < 1e-14 && s.eigenvalues[1].abs() < 1e-14);
    assert!(lambda_max_bracket(&p).contains(s.top().0, 1e-14));
}

fn dirichlet_strategy() -> impl Strategy<Value = ProbVector> {
    (2usize..=50, 0.05f64..3.0, any::<u64>()).prop_map(|(c, alpha, seed)| sample_dirichlet(c, alpha, &mut rng(seed)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn simplex_fim_structure(p in dirichlet_strategy()) {
        let m = simplex_fim(&p).matrix;
        prop_assert!((&m - simplex_oracle(p.as_slice())).abs().max() <= 1e-15);
        prop_assert!((&m - m.transpose()).abs().max() <= 1e-14);
        prop_assert!(min_eig(&m) >= -1e-12);
        let row_sums = &m * DVector::from_element(p.classes(), 1.0);
        prop_assert!(row_sums.abs().max() <= 1e-12);
        prop_assert!(close(m.trace(), 1.0 - p.norm_sq(), 1e-12));
    }

    #[test]
    fn spectral_decomposition_invariants(p in dirichlet_strategy()) {
        let m = simplex_fim(&p);
        let s = spectrum(&m).unwrap();
        let c = p.classes();
        for i in 1..c {
            prop_assert!(s.eigenvalues[i] >= s.eigenvalues[i - 1]);
        }
        prop_assert!(s.eigenvalues[0].abs() <= 1e-12);
        let v = &s.eigenvectors;
        prop_assert!((v * v.transpose() - DMatrix::identity(c, c)).norm() <= 1e-10);
        prop_assert!((s.reconstruct() - &m.matrix).norm() <= 1e-10);
        // against nalgebra's solver
        let mut oracle: Vec<f64> = m.matrix.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in s.eigenvalues.iter().zip(&oracle) {
            prop_assert!(close(*a, *b, 1e-12));
        }
        prop_assert!(close(s.spectral_gap, oracle[c - 1] - oracle[c - 2], 1e-12));
    }

    #[test]
    fn bracket_contains_top_eigenvalue(p in dirichlet_strategy()) {
        let b = lambda_max_bracket(&p);
        let top = max_eig(&simplex_oracle(p.as_slice()));
        prop_assert!(b.lower <= b.upper + 1e-14);
        prop_assert!(b.lower >= 0.0 && b.upper <= 1.0);
        prop_assert!(b.contains(top, 1e-10), "{:?} vs {}", b, top);
        let s = sorted(p.as_slice());
        let c = s.len();
        let gap_claim = (s[c - 1] - s[c - 2]).min(p.max_bernoulli_variance());
        prop_assert!(b.width() <= gap_claim + 1e-12, "width {} > {}", b.width(), gap_claim);
    }

    #[test]
    fn cauchy_interlacing(p in dirichlet_strategy()) {
        let s = spectrum(&simplex_fim(&p)).unwrap();
        let q = sorted(p.as_slice());
        let c = q.len();
        let lam = &s.eigenvalues;
        prop_assert!(lam[c - 2] <= q[c - 2] + 1e-10);
        prop_assert!(q[c - 2] <= lam[c - 1] + 1e-10);
        prop_assert!(lam[c - 1] <= q[c - 1] + 1e-10);
    }

    #[test]
    fn loewner_envelopes(p in dirichlet_strategy()) {
        let m = simplex_fim(&p).matrix;
        prop_assert!(min_eig(&(diagonal_envelope(&p) - &m)) >= -1e-12);
        prop_assert!(min_eig(&(&m - rank1_envelope(&p).unwrap())) >= -1e-10);
    }

    #[test]
    fn envelope_error_bounds(p in dirichlet_strategy()) {
        let e = envelope_errors(&p).unwrap();
        let c = p.classes() as f64;
        let norm_sq: f64 = p.as_slice().iter().map(|v| v * v).sum();
        prop_assert!(close(e.diag_error, norm_sq, 1e-12));
        prop_assert!(close(e.diag_error_realized, norm_sq, 1e-12));
        prop_assert!(e.diag_error >= 1.0 / c - 1e-12);
        // realized rank-1 error from nalgebra's decomposition
        let m = simplex_oracle(p.as_slice());
        let eig = m.clone().symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top);
        let realized = (&m - eig.eigenvalues[top] * v * v.transpose()).norm();
        prop_assert!(close(e.rank1_error_realized, realized, 1e-10));
        prop_assert!(realized <= e.rank1_error_bound + 1e-10, "{} > {}", realized, e.rank1_error_bound);
    }

    #[test]
    fn empirical_core_expectation_and_variance(p in dirichlet_strategy()) {
        let c = p.classes();
        let q = p.as_slice();
        let fim = simplex_oracle(q);
        let mut mean = DMatrix::zeros(c, c);
        let mut var = DMatrix::zeros(c, c);
        for (y, &py) in q.iter().enumerate() {
            let r = empirical_core(&p, y).unwrap();
            let mut d = DVector::from_column_slice(q) * -1.0;
            d[y] += 1.0;
            prop_assert_eq!(&r.matrix, &(&d * d.transpose()));
            let sv = r.matrix.clone().svd(false, false).singular_values;
            let mut svs: Vec<f64> = sv.iter().copied().collect();
            svs.sort_by(|a, b| b.total_cmp(a));
            prop_assert!(svs[1] <= 1e-12);
            mean += py * &r.matrix;
            let dev = &r.matrix - &fim;
            var += py * dev.component_mul(&dev);
        }
        prop_assert!((&mean - &fim).abs().max() <= 1e-14);
        let formula = empirical_core_variance(&p);
        prop_assert!((&formula - &var).abs().max() <= 1e-12);
        prop_assert!(formula.max() <= 1.0 / 16.0 + 1e-14);
    }

    #[test]
    fn adversarial_floor_is_attained(p in dirichlet_strategy()) {
        let floor = efim_core_floor(&p).unwrap();
        let fim = simplex_oracle(p.as_slice());
        let worst = (0..p.classes())
            .map(|y| (empirical_core(&p, y).unwrap().matrix - &fim).norm())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(floor.tight >= floor.relaxed - 1e-12);
        prop_assert!(worst >= floor.tight - 1e-10, "{} < {}", worst, floor.tight);
        prop_assert!(worst >= floor.relaxed - 1e-10);
    }

    #[test]
    fn power_iteration_residual_small(p in dirichlet_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let full = spectrum(&simplex_fim(&p)).unwrap();
        let t = top_eigenpair(&p, EigenMethod::Power(PowerIteration::until_converged(100_000, 1e-12)), &mut r).unwrap();
        let res = rayleigh_residual(&p, &t.vector, t.value);
        prop_assert!(close(t.vector.norm(), 1.0, 1e-12));
        if full.spectral_gap >= 0.01 {
            prop_assert!((t.value - full.top().0).abs() <= 1e-6);
        }
        if full.spectral_gap < 1e-10 {
            prop_assert!(res <= 1e-8);
        }
    }
}
