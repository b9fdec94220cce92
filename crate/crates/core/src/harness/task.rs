use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Generator {
    /// Unit-variance Gaussian clusters around centers drawn as
    /// `separation * N(0, I_d)`; classes assigned round-robin.
    GaussianBlobs { d: usize, classes: usize, separation: f64 },
    /// Scalar Student-t inputs; every label is 0.
    StudentT { nu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub generator: Generator,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Contiguous rows `start .. start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        Dataset { x: self.x.rows(start, len).into_owned(), labels: self.labels[start..start + len].to_vec() }
    }

    /// Consecutive batches of `size` rows; a short tail is dropped.
    pub fn batches(&self, size: usize, count: usize) -> Result<Vec<Dataset>> {
        if size == 0 || size * count > self.len() {
            return Err(FimError::InvalidArgument(format!(
                "{count} batches of {size} need {} samples, have {}",
                size * count,
                self.len()
            )));
        }
        Ok((0..count).map(|b| self.slice(b * size, size)).collect())
    }
}

pub fn gen_task(task: &SyntheticTask) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let n = task.n_samples;
    if n == 0 {
        return Err(FimError::InvalidArgument("a task needs at least one sample".into()));
    }
    match task.generator {
        Generator::GaussianBlobs { d, classes, separation } => {
            if d == 0 || classes < 2 || !separation.is_finite() || separation < 0.0 {
                return Err(FimError::InvalidArgument(format!(
                    "blobs need d >= 1, classes >= 2, separation >= 0 (got {d}, {classes}, {separation})"
                )));
            }
            let centers = DMatrix::from_fn(classes, d, |_, _| separation * rng.sample::<f64, _>(StandardNormal));
            let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            let mut x = DMatrix::from_fn(n, d, |i, j| centers[(labels[i], j)]);
            // noise drawn row by row; from_fn would visit column-major
            for i in 0..n {
                for j in 0..d {
                    x[(i, j)] += rng.sample::<f64, _>(StandardNormal);
                }
            }
            Ok(Dataset { x, labels })
        }
        Generator::StudentT { nu } => {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(FimError::InvalidArgument(format!("Student-t needs nu > 0, got {nu}")));
            }
            let dist = StudentT::new(nu).map_err(|e| FimError::InvalidArgument(e.to_string()))?;
            let x = DMatrix::from_iterator(n, 1, (0..n).map(|_| dist.sample(&mut rng)));
            Ok(Dataset { x, labels: vec![0; n] })
        }
    }
}
