//! Synthetic tasks, training, benchmarking and reporting.

mod bench;
mod config;
mod cv;
mod metrics;
mod task;
mod train;

pub use bench::{bench, bench_csv, prepare, run_estimator, stream, variance_reports, BenchRow, EstimatorChoice, Prepared};
pub use config::{Config, TaskKind, SEED_ENV};
pub use cv::{cv_demo, t_kurtosis_ratio, CvReport, PROPOSAL_NU};
pub use metrics::{histogram, relmae, HistogramReport, DEFAULT_EPSILON, HISTOGRAM_BINS, ZERO_ATOM};
pub use task::{gen_task, Dataset, Generator, SyntheticTask};
pub use train::{accuracy, cross_entropy, train_sgd, TrainOutcome};
