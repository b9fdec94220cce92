mod common;

use common::{all_sign_vectors, gaussian_matrix, rng, spread_params};
use fimlab::estimators::{
    exact_fim_definition, hutchinson_gradient, target_matrix, EstimatorKind, FimEstimate, HutchVariant,
    Normalization, ProbeDist, ProbeVector, Storage,
};
use fimlab::harness::{
    accuracy, bench, bench_csv, cv_demo, gen_task, histogram, prepare, relmae, run_estimator, t_kurtosis_ratio,
    train_sgd, variance_reports, Config, EstimatorChoice, Generator, SyntheticTask, TaskKind, DEFAULT_EPSILON,
    HISTOGRAM_BINS,
};
use fimlab::network::{init_params, load_checkpoint, Activation, NetworkSpec, ParamVector};
use fimlab::FimError;
use nalgebra::{DMatrix, DVector};

fn blobs(separation: f64, n: usize, seed: u64) -> SyntheticTask {
    SyntheticTask { generator: Generator::GaussianBlobs { d: 4, classes: 3, separation }, n_samples: n, seed }
}

fn diag_estimate(values: Vec<f64>) -> FimEstimate {
    let mut e = FimEstimate::zeros(EstimatorKind::ExactDef, Storage::Diagonal, Normalization::Sum, values.len()).unwrap();
    e.values = values;
    e
}

fn small_config() -> Config {
    Config::parse(
        "seed = 3\nd = 4\nclasses = 3\nn_samples = 64\nhidden = 8\ntrain_steps = 30\n\
         batch_size = 16\nn_batches = 2\nestimators = efim, mc, full, dg, lr1, sqrt\nvariance_trials = 50\n",
    )
    .unwrap()
}

#[test]
fn tasks_are_reproducible() {
    let a = gen_task(&blobs(2.0, 50, 9)).unwrap();
    let b = gen_task(&blobs(2.0, 50, 9)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.x, gen_task(&blobs(2.0, 50, 10)).unwrap().x);
    assert_eq!(a.labels[..6], [0, 1, 2, 0, 1, 2]);
    assert!(gen_task(&blobs(-1.0, 5, 0)).is_err());
    let bad_t = SyntheticTask { generator: Generator::StudentT { nu: 0.0 }, n_samples: 5, seed: 0 };
    assert!(gen_task(&bad_t).is_err());
}

#[test]
fn student_t_second_moment() {
    let task = SyntheticTask { generator: Generator::StudentT { nu: 5.0 }, n_samples: 1_000_000, seed: 1 };
    let data = gen_task(&task).unwrap();
    assert!(data.labels.iter().all(|&y| y == 0));
    let m2 = data.x.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
    assert!((m2 / (5.0 / 3.0) - 1.0).abs() < 0.1, "{m2}");
}

#[test]
fn zero_steps_return_init() {
    let spec = NetworkSpec::mlp(4, &[5], 3, Activation::Tanh).unwrap();
    let init = init_params(&spec, &mut rng(0));
    let data = gen_task(&blobs(3.0, 30, 0)).unwrap();
    let out = train_sgd(&spec, &init, &data, 0, 0.5).unwrap();
    assert_eq!(out.theta, init);
    assert!(out.losses.is_empty());
}

#[test]
fn training_separable_blobs() {
    let spec = NetworkSpec::mlp(4, &[16], 3, Activation::Tanh).unwrap();
    let init = init_params(&spec, &mut rng(1));
    let data = gen_task(&blobs(4.0, 300, 2)).unwrap();
    let out = train_sgd(&spec, &init, &data, 500, 0.5).unwrap();
    assert!(accuracy(&spec, &out.theta, &data).unwrap() >= 0.95);
    let windows: Vec<f64> = out.losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "{windows:?}");
    }
}

#[test]
fn indistinguishable_classes_stay_near_chance() {
    let spec = NetworkSpec::mlp(4, &[16], 3, Activation::Tanh).unwrap();
    let init = init_params(&spec, &mut rng(3));
    let train = gen_task(&blobs(0.0, 300, 4)).unwrap();
    let held_out = gen_task(&blobs(0.0, 3000, 5)).unwrap();
    let out = train_sgd(&spec, &init, &train, 300, 0.5).unwrap();
    let acc = accuracy(&spec, &out.theta, &held_out).unwrap();
    assert!((acc - 1.0 / 3.0).abs() < 0.08, "{acc}");
}

#[test]
fn divergence_is_reported() {
    let spec = NetworkSpec::linear_softmax(4, 3, true).unwrap();
    let init = init_params(&spec, &mut rng(0));
    let data = gen_task(&blobs(3.0, 30, 0)).unwrap();
    // a huge finite step keeps the stable log-softmax finite; an infinite
    // one poisons the parameters
    assert!(train_sgd(&spec, &init, &data, 5, 1e300).is_ok());
    let err = train_sgd(&spec, &init, &data, 5, f64::INFINITY).unwrap_err();
    assert!(matches!(err, FimError::Diverged { step: 1, .. }), "{err}");
}

#[test]
fn relmae_examples() {
    let truth = diag_estimate(vec![1.0, 2.0, 0.5]);
    assert_eq!(relmae(&truth, &truth, DEFAULT_EPSILON).unwrap(), 0.0);
    let double = diag_estimate(vec![2.0, 4.0, 1.0]);
    assert!((relmae(&double, &truth, DEFAULT_EPSILON).unwrap() - 1.0).abs() < 1e-11);
    let mut mean = double.clone();
    mean.normalization = Normalization::Mean;
    assert!(matches!(relmae(&mean, &truth, DEFAULT_EPSILON), Err(FimError::Incompatible(_))));
    assert!(relmae(&diag_estimate(vec![1.0]), &truth, DEFAULT_EPSILON).is_err());
}

#[test]
fn exhaustive_hutchinson_has_zero_relmae() {
    let mut r = rng(6);
    let spec = NetworkSpec::mlp(2, &[3], 3, Activation::Tanh).unwrap();
    let theta = spread_params(&spec, 1.5, &mut r);
    let x = gaussian_matrix(3, 2, 1.0, &mut r);
    let truth = exact_fim_definition(&spec, &theta, &x, Storage::Diagonal).unwrap();
    let mut mean = vec![0.0; spec.dim()];
    let mut count = 0.0;
    for signs in all_sign_vectors(9) {
        let probe = ProbeVector::new(3, 3, ProbeDist::Rademacher, signs).unwrap();
        let g = hutchinson_gradient(&spec, &theta, &x, &HutchVariant::Full, &probe).unwrap().g;
        for (m, v) in mean.iter_mut().zip(&g) {
            *m += v * v;
        }
        count += 1.0;
    }
    let est = diag_estimate(mean.into_iter().map(|v| v / count).collect());
    assert!(relmae(&est, &truth, DEFAULT_EPSILON).unwrap() < 1e-10);
}

#[test]
fn cv_demo_examples() {
    assert!((t_kurtosis_ratio(12.0) - 3.75).abs() < 1e-15);
    assert!((t_kurtosis_ratio(4.5) - 15.0).abs() < 1e-12);
    let mut r = rng(7);
    assert!(cv_demo(4.0, 10, 10, &mut r).is_err());
    assert!(cv_demo(5.0, 0, 10, &mut r).is_err());
    let heavy = cv_demo(4.5, 10, 100_000, &mut r).unwrap();
    let light = cv_demo(12.0, 10, 100_000, &mut r).unwrap();
    assert!(heavy.empirical_cv > light.empirical_cv);
    assert!(heavy.closed_form_cv > light.closed_form_cv);
    assert!((light.importance_ratio / 3.75 - 1.0).abs() < 0.05, "{light:?}");
    assert!((light.mean_estimate / light.true_fim - 1.0).abs() < 0.02);
}

#[test]
fn histogram_examples() {
    let rep = histogram(&diag_estimate(vec![0.0; 8])).unwrap();
    assert_eq!(rep.zeta, 1.0);
    assert_eq!(rep.median, None);

    let rep = histogram(&diag_estimate(vec![0.0, 3e-4, 0.0])).unwrap();
    assert_eq!(rep.median, Some(3e-4));
    assert_eq!(rep.p95, Some(3e-4));
    assert_eq!(rep.counts.iter().sum::<usize>(), 1);

    // 30 zeros among 100 entries spread over six decades
    let values: Vec<f64> = (0..100).map(|i| if i % 10 < 3 { 0.0 } else { 10f64.powf(-(i as f64) / 16.0) }).collect();
    let rep = histogram(&diag_estimate(values.clone())).unwrap();
    assert_eq!(rep.zeta, 0.30);
    assert_eq!(rep.counts.len(), HISTOGRAM_BINS);
    assert_eq!(rep.counts.iter().sum::<usize>() + rep.zero_atom, rep.total);
    assert!((rep.mean - values.iter().sum::<f64>() / 100.0).abs() < 1e-15);
    let mut positive: Vec<f64> = values.into_iter().filter(|&v| v > 0.0).collect();
    positive.sort_by(f64::total_cmp);
    // 70 positives: the median interpolates order statistics 34 and 35
    assert_eq!(rep.median, Some(positive[34] + 0.5 * (positive[35] - positive[34])));
    assert_eq!(rep.csv_rows(), HISTOGRAM_BINS);

    let dense = FimEstimate::from_matrix(EstimatorKind::ExactDef, Normalization::Sum, &DMatrix::identity(2, 2)).unwrap();
    assert!(histogram(&dense).is_err());
}

trait CsvRows {
    fn csv_rows(&self) -> usize;
}

impl CsvRows for fimlab::harness::HistogramReport {
    fn csv_rows(&self) -> usize {
        self.to_csv().lines().count() - 1
    }
}

#[test]
fn config_parsing() {
    let cfg = Config::parse("task = student_t\nnu = 6.5\nprobe_dist = gaussian\nstorage = dense\n").unwrap();
    assert_eq!(cfg.task, TaskKind::StudentT);
    assert_eq!(cfg.nu, 6.5);
    assert_eq!(cfg.probe_dist, ProbeDist::Gaussian);
    assert_eq!(cfg.storage, Storage::Dense);
    assert_eq!(Config::parse("").unwrap(), Config::default());
    assert!(Config::parse("probe_dist = cauchy").is_err());
    assert!(Config::parse("lr = fast").is_err());
    assert!(Config::parse("epsilon = 0").is_err());
    assert!(Config::parse("n_samples = 10").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "seed = 11\n").unwrap();
    let mut cfg = Config::load(&path).unwrap();
    cfg.apply_seed_override(Some("99")).unwrap();
    assert_eq!(cfg.seed, 99);
    assert!(cfg.apply_seed_override(Some("minus one")).is_err());
}

#[test]
fn low_rank_beats_diagonal_near_one_hot() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let spec = NetworkSpec::linear_softmax(4, 5, true).unwrap();
        let mut theta = spread_params(&spec, 0.1, &mut r);
        // bias block follows the 4 x 5 weights; class `top` leads by 10
        let top = (seed % 5) as usize;
        theta.flat[20 + top] += 10.0;
        let x = gaussian_matrix(6, 4, 1.0, &mut r);
        let truth = exact_fim_definition(&spec, &theta, &x, Storage::Diagonal).unwrap();
        let mean_of = |v: HutchVariant| {
            let t = target_matrix(&spec, &theta, &x, &v).unwrap();
            diag_estimate(t.diagonal().iter().copied().collect())
        };
        let dg = relmae(&mean_of("dg".parse().unwrap()), &truth, DEFAULT_EPSILON).unwrap();
        for k in [1, 2] {
            let lr = relmae(&mean_of(HutchVariant::low_rank(k)), &truth, DEFAULT_EPSILON).unwrap();
            assert!(lr < dg, "seed {seed} k {k}: {lr} vs {dg}");
        }
    }
}

#[test]
fn prepare_and_run_are_deterministic() {
    let cfg = small_config();
    let a = prepare(&cfg).unwrap();
    let b = prepare(&cfg).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.batches.len(), 2);
    for name in ["full", "mc", "efim"] {
        let choice: EstimatorChoice = name.parse().unwrap();
        let ea = run_estimator(&a, choice, &cfg, Storage::Diagonal).unwrap();
        let eb = run_estimator(&b, choice, &cfg, Storage::Diagonal).unwrap();
        assert_eq!(ea.values, eb.values, "{name}");
        assert_eq!(ea.meta.seed, Some(3));
        assert_eq!(ea.normalization, Normalization::Sum);
    }
    assert!("nope".parse::<EstimatorChoice>().is_err());
}

#[test]
fn student_t_task_uses_scalar_model_at_origin() {
    let cfg = Config::parse("task = student_t\nn_samples = 64\nbatch_size = 16\nn_batches = 4\n").unwrap();
    let prep = prepare(&cfg).unwrap();
    assert_eq!(prep.spec, NetworkSpec::logistic_scalar());
    assert_eq!(prep.theta, ParamVector::zeros(&prep.spec));
    let exact = run_estimator(&prep, EstimatorChoice::Exact, &cfg, Storage::Dense).unwrap();
    let want: f64 = prep.batches.iter().flat_map(|b| b.x.iter()).map(|v| v * v / 4.0).sum();
    assert!((exact.values[0] - want).abs() < 1e-12 * want);
}

#[test]
fn checkpoint_written_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta.bin");
    let mut cfg = small_config();
    cfg.checkpoint = Some(path.clone());
    let prep = prepare(&cfg).unwrap();
    let (spec, theta) = load_checkpoint(&path).unwrap();
    assert_eq!(spec, prep.spec);
    assert_eq!(theta, prep.theta);
}

#[test]
fn bench_smoke() {
    let cfg = small_config();
    let rows = bench(&cfg).unwrap();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert!(row.relmae.is_finite() && row.relmae >= 0.0, "{row:?}");
        assert!(row.speedup.is_some());
    }
    let passes = |name: &str| rows.iter().find(|r| r.estimator == name).unwrap().backward_passes;
    // one backward pass per batch and probe
    assert_eq!(passes("full"), 2);
    assert_eq!(passes("lr1"), 2);
    assert_eq!(passes("efim"), 32);
    let csv = bench_csv(&rows);
    assert!(csv.starts_with("estimator,relmae,seconds,speedup,backward_passes\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn variance_reports_cover_hutchinson_choices() {
    let cfg = small_config();
    let reports = variance_reports(&cfg).unwrap();
    assert_eq!(reports.len(), 4);
    for rep in &reports {
        let emp = rep.empirical.as_ref().unwrap();
        assert_eq!(emp.len(), rep.closed_form.len());
        for (i, &m) in rep.mean.iter().enumerate() {
            if m > 0.0 {
                assert!(rep.cv[i] <= 2f64.sqrt() + 1e-12);
            }
        }
    }
}

#[test]
fn efim_is_rank_deficient_relative_to_fim_on_one_sample() {
    // sanity for the bench's eFIM row: with one sample eFIM has rank one
    let mut r = rng(8);
    let spec = NetworkSpec::linear_softmax(3, 4, true).unwrap();
    let theta = spread_params(&spec, 1.0, &mut r);
    let x = gaussian_matrix(1, 3, 1.0, &mut r);
    let e = fimlab::estimators::efim(&spec, &theta, &x, &[2], Storage::Dense).unwrap().matrix().unwrap();
    let eig: DVector<f64> = e.symmetric_eigen().eigenvalues;
    assert_eq!(eig.iter().filter(|&&v| v > 1e-10).count(), 1);
}
