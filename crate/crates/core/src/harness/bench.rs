use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Config, TaskKind};
use super::metrics::relmae;
use super::task::{gen_task, Dataset, Generator, SyntheticTask};
use super::train::{accuracy, train_sgd};
use crate::error::{FimError, Result};
use crate::estimators::{
    efim, exact_fim_definition, exact_fim_pullback, hutchinson_fim, mc_fim, variance_closed_form, FimEstimate,
    HutchVariant, Normalization, Storage, VarianceReport,
};
use crate::network::{init_params, save_checkpoint, NetworkSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorChoice {
    Exact,
    Pullback,
    Efim,
    Mc,
    Hutch(HutchVariant),
}

impl FromStr for EstimatorChoice {
    type Err = FimError;

    /// `exact`, `pullback`, `efim`, `mc`, or a Hutchinson variant name
    /// (`full`, `dg`, `dg-bernoulli`, `lr<k>`, `sqrt`).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "pullback" => Ok(Self::Pullback),
            "efim" => Ok(Self::Efim),
            "mc" => Ok(Self::Mc),
            other => other.parse().map(Self::Hutch),
        }
    }
}

/// Model, trained parameters and batches shared by every harness command.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: NetworkSpec,
    pub theta: ParamVector,
    pub data: Dataset,
    pub batches: Vec<Dataset>,
    pub train_accuracy: f64,
}

/// Independent RNG streams derived from the config seed.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let salt = tag.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

pub fn prepare(cfg: &Config) -> Result<Prepared> {
    cfg.validate()?;
    let (spec, generator) = match cfg.task {
        TaskKind::Blobs => (
            NetworkSpec::mlp(cfg.d, &cfg.hidden, cfg.classes, cfg.activation)?,
            Generator::GaussianBlobs { d: cfg.d, classes: cfg.classes, separation: cfg.separation },
        ),
        TaskKind::StudentT => (NetworkSpec::logistic_scalar(), Generator::StudentT { nu: cfg.nu }),
    };
    let data = gen_task(&SyntheticTask { generator, n_samples: cfg.n_samples, seed: cfg.seed })?;
    let theta = match cfg.task {
        TaskKind::Blobs => {
            let init = init_params(&spec, &mut stream(cfg.seed, "init"));
            train_sgd(&spec, &init, &data, cfg.train_steps, cfg.lr)?.theta
        }
        // The scalar model is studied at theta = 0.
        TaskKind::StudentT => ParamVector::zeros(&spec),
    };
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, &spec, &theta)?;
    }
    let batches = data.batches(cfg.batch_size, cfg.n_batches)?;
    let train_accuracy = accuracy(&spec, &theta, &data)?;
    Ok(Prepared { spec, theta, data, batches, train_accuracy })
}

/// Sums the chosen estimator over all batches. Monte-Carlo batch estimates
/// are rescaled by the batch size so every result estimates the summed FIM.
pub fn run_estimator(prep: &Prepared, choice: EstimatorChoice, cfg: &Config, storage: Storage) -> Result<FimEstimate> {
    let (spec, theta) = (&prep.spec, &prep.theta);
    let mut rng = stream(cfg.seed, &format!("{choice:?}"));
    let mut total: Option<FimEstimate> = None;
    for batch in &prep.batches {
        let est = match choice {
            EstimatorChoice::Exact => exact_fim_definition(spec, theta, &batch.x, storage)?,
            EstimatorChoice::Pullback => exact_fim_pullback(spec, theta, &batch.x, storage)?,
            EstimatorChoice::Efim => efim(spec, theta, &batch.x, &batch.labels, storage)?,
            EstimatorChoice::Mc => {
                let mut e = mc_fim(spec, theta, &batch.x, cfg.mc_samples, &mut rng, storage)?;
                e.scale(batch.len() as f64);
                e.normalization = Normalization::Sum;
                e
            }
            EstimatorChoice::Hutch(variant) => {
                hutchinson_fim(spec, theta, &batch.x, &variant, cfg.probe_dist, cfg.probes, storage, &mut rng)?
            }
        };
        total = Some(match total {
            None => est,
            Some(mut acc) => {
                for (a, v) in acc.values.iter_mut().zip(&est.values) {
                    *a += v;
                }
                acc.meta.backward_passes += est.meta.backward_passes;
                acc.meta.probe_count += est.meta.probe_count;
                acc
            }
        });
    }
    let mut out = total.expect("at least one batch");
    out.meta.seed = Some(cfg.seed);
    out.meta.dataset_id = Some(format!("{:?}-n{}-seed{}", cfg.task, cfg.n_samples, cfg.seed).to_lowercase());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub estimator: String,
    pub relmae: f64,
    pub seconds: f64,
    /// eFIM time over this estimator's time, when eFIM was benchmarked.
    pub speedup: Option<f64>,
    pub backward_passes: usize,
}

/// RelMAE of each configured estimator's diagonal against the exact FIM, with
/// wall-clock time.
pub fn bench(cfg: &Config) -> Result<Vec<BenchRow>> {
    let prep = prepare(cfg)?;
    let truth = run_estimator(&prep, EstimatorChoice::Exact, cfg, Storage::Diagonal)?;
    let mut rows = Vec::new();
    for name in &cfg.estimators {
        let choice: EstimatorChoice = name.parse()?;
        let start = Instant::now();
        let est = run_estimator(&prep, choice, cfg, Storage::Diagonal)?;
        let seconds = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            estimator: name.clone(),
            relmae: relmae(&est, &truth, cfg.epsilon)?,
            seconds,
            speedup: None,
            backward_passes: est.meta.backward_passes,
        });
    }
    if let Some(efim_time) = rows.iter().find(|r| r.estimator == "efim").map(|r| r.seconds) {
        for r in &mut rows {
            r.speedup = Some(efim_time / r.seconds.max(f64::MIN_POSITIVE));
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("estimator,relmae,seconds,speedup,backward_passes\n");
    for r in rows {
        let speedup = r.speedup.map_or_else(String::new, |s| format!("{s:.3}"));
        out.push_str(&format!("{},{:.6e},{:.6},{},{}\n", r.estimator, r.relmae, r.seconds, speedup, r.backward_passes));
    }
    out
}

/// Closed-form and empirical single-probe variances on the first batch, for
/// each configured Hutchinson estimator.
pub fn variance_reports(cfg: &Config) -> Result<Vec<VarianceReport>> {
    let prep = prepare(cfg)?;
    let batch = &prep.batches[0];
    let mut out = Vec::new();
    for name in &cfg.estimators {
        if let EstimatorChoice::Hutch(variant) = name.parse()? {
            let report = variance_closed_form(&prep.spec, &prep.theta, &batch.x, &variant, cfg.probe_dist)?;
            let mut rng = stream(cfg.seed, &format!("variance-{name}"));
            out.push(report.with_empirical(&prep.spec, &prep.theta, &batch.x, cfg.variance_trials, &mut rng)?);
        }
    }
    Ok(out)
}
