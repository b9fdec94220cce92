//! FIM estimators and the [`FimEstimate`] container they produce.
//!
//! Exact, empirical and Hutchinson estimates sum over the dataset; the
//! Monte-Carlo estimate averages over its draws. The convention travels with
//! the estimate in [`Normalization`] so the two are never compared silently.

mod accumulate;
mod exact;
mod hutchinson;

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::linalg;

pub use accumulate::{average, ema_update, trace_estimate};
pub use exact::{efim, efim_pullback, exact_fim_definition, exact_fim_pullback, mc_fim, sample_label};
pub use hutchinson::{
    coefficient_rows, hutchinson_batched, hutchinson_fim, hutchinson_from_probe, hutchinson_gradient, probe_width,
    record_h, sample_probe, target_matrix, variance_closed_form, DiagWeights, HutchGradient, HutchVariant,
    ProbeVector, VarianceReport, LR_POWER_SEED, PROB_FLOOR,
};

/// Largest `dim(theta)` for which dense `dim x dim` storage is allowed.
pub const DENSE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum EstimatorKind {
    ExactDef,
    ExactPullback,
    Efim,
    Mc,
    HutchFull,
    HutchDg,
    HutchLr { k: usize },
    HutchSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Dense,
    Diagonal,
}

impl std::str::FromStr for Storage {
    type Err = FimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "diagonal" | "diag" => Ok(Self::Diagonal),
            other => Err(FimError::InvalidArgument(format!("unknown storage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDist {
    Rademacher,
    Gaussian,
}

impl std::str::FromStr for ProbeDist {
    type Err = FimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rademacher" => Ok(Self::Rademacher),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(FimError::InvalidArgument(format!("unknown probe distribution '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateMeta {
    pub probe_count: usize,
    pub probe_dist: Option<ProbeDist>,
    pub seed: Option<u64>,
    pub dataset_id: Option<String>,
    pub backward_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimEstimate {
    pub kind: EstimatorKind,
    pub storage: Storage,
    pub normalization: Normalization,
    pub dim: usize,
    /// Row-major `dim x dim` for dense storage, length `dim` for diagonal.
    pub values: Vec<f64>,
    pub meta: EstimateMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: EstimatorKind,
    storage: Storage,
    normalization: Normalization,
    dim: usize,
    #[serde(flatten)]
    meta: EstimateMeta,
}

impl FimEstimate {
    pub fn zeros(kind: EstimatorKind, storage: Storage, normalization: Normalization, dim: usize) -> Result<Self> {
        check_storage(storage, dim)?;
        let len = match storage {
            Storage::Dense => dim * dim,
            Storage::Diagonal => dim,
        };
        Ok(Self { kind, storage, normalization, dim, values: vec![0.0; len], meta: EstimateMeta::default() })
    }

    pub fn from_matrix(kind: EstimatorKind, normalization: Normalization, m: &DMatrix<f64>) -> Result<Self> {
        let mut est = Self::zeros(kind, Storage::Dense, normalization, m.nrows())?;
        est.values = m.transpose().as_slice().to_vec();
        Ok(est)
    }

    /// The dense matrix; errors for diagonal storage.
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        match self.storage {
            Storage::Dense => Ok(DMatrix::from_row_slice(self.dim, self.dim, &self.values)),
            Storage::Diagonal => Err(FimError::Incompatible("diagonal estimate has no dense matrix".into())),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self.storage {
            Storage::Dense => (0..self.dim).map(|i| self.values[i * self.dim + i]).collect(),
            Storage::Diagonal => self.values.clone(),
        }
    }

    pub fn to_diagonal(&self) -> Self {
        Self { storage: Storage::Diagonal, values: self.diagonal(), ..self.clone() }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// `sum(w * g g^T)` or its diagonal.
    pub(crate) fn add_outer(&mut self, g: &[f64], w: f64) {
        let n = self.dim;
        match self.storage {
            Storage::Diagonal => {
                for (v, gi) in self.values.iter_mut().zip(g) {
                    *v += w * gi * gi;
                }
            }
            Storage::Dense => {
                for i in 0..n {
                    let wi = w * g[i];
                    if wi == 0.0 {
                        continue;
                    }
                    for j in i..n {
                        let x = wi * g[j];
                        self.values[i * n + j] += x;
                        if j != i {
                            self.values[j * n + i] += x;
                        }
                    }
                }
            }
        }
    }

    /// Adds `J^T M J` (or its diagonal) for a `C x dim` Jacobian and a
    /// symmetric `C x C` core matrix.
    pub(crate) fn add_pullback(&mut self, jac: &DMatrix<f64>, core: &DMatrix<f64>) {
        let n = self.dim;
        match self.storage {
            Storage::Diagonal => {
                let mj = core * jac;
                for k in 0..n {
                    self.values[k] += jac.column(k).dot(&mj.column(k));
                }
            }
            Storage::Dense => {
                let full = jac.transpose() * (core * jac);
                for i in 0..n {
                    for j in i..n {
                        let x = 0.5 * (full[(i, j)] + full[(j, i)]);
                        self.values[i * n + j] += x;
                        if j != i {
                            self.values[j * n + i] += x;
                        }
                    }
                }
            }
        }
    }

    /// Symmetry within 1e-12 and PSD within -1e-10 (dense); non-negative
    /// within -1e-12 (diagonal). Both relative to the largest entry when that
    /// exceeds one.
    pub fn check_invariants(&self) -> Result<()> {
        let scale = self.values.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        match self.storage {
            Storage::Diagonal => {
                if let Some(v) = self.values.iter().find(|&&v| v < -1e-12 * scale) {
                    return Err(FimError::InvalidArgument(format!("negative diagonal entry {v:e}")));
                }
            }
            Storage::Dense => {
                let m = self.matrix()?;
                let asym = linalg::max_asymmetry(&m);
                if asym > 1e-12 * scale {
                    return Err(FimError::NotSymmetric { asymmetry: asym });
                }
                let min = linalg::min_eigenvalue(&m)?;
                if min < -1e-10 * scale {
                    return Err(FimError::InvalidArgument(format!("minimum eigenvalue {min:e} below -1e-10")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn ensure_compatible(&self, other: &Self) -> Result<()> {
        if self.kind != other.kind
            || self.storage != other.storage
            || self.normalization != other.normalization
            || self.dim != other.dim
        {
            return Err(FimError::Incompatible(format!(
                "{:?}/{:?}/{:?}/{} vs {:?}/{:?}/{:?}/{}",
                self.kind,
                self.storage,
                self.normalization,
                self.dim,
                other.kind,
                other.storage,
                other.normalization,
                other.dim
            )));
        }
        Ok(())
    }

    /// One JSON header line followed by the values as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind,
            storage: self.storage,
            normalization: self.normalization,
            dim: self.dim,
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| FimError::Format(format!("bad header: {e}")))?;
        let len = match header.storage {
            Storage::Dense => header.dim * header.dim,
            Storage::Diagonal => header.dim,
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * len {
            return Err(FimError::Format(format!("expected {} payload bytes, found {}", 8 * len, bytes.len())));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self {
            kind: header.kind,
            storage: header.storage,
            normalization: header.normalization,
            dim: header.dim,
            values,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub(crate) fn check_storage(storage: Storage, dim: usize) -> Result<()> {
    if storage == Storage::Dense && dim > DENSE_CAP {
        return Err(FimError::DenseCapExceeded { dim, cap: DENSE_CAP });
    }
    Ok(())
}
