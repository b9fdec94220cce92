//! Flat `key = value` configuration for the harness and CLI.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. `FIMLAB_SEED` in the environment overrides `seed`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{FimError, Result};
use crate::estimators::{ProbeDist, Storage};
use crate::network::Activation;

pub const SEED_ENV: &str = "FIMLAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Blobs,
    StudentT,
}

impl FromStr for TaskKind {
    type Err = FimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "student_t" => Ok(Self::StudentT),
            other => Err(FimError::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub task: TaskKind,
    pub d: usize,
    pub classes: usize,
    pub separation: f64,
    pub nu: f64,
    pub n_samples: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_batches: usize,
    pub estimators: Vec<String>,
    pub probes: usize,
    pub probe_dist: ProbeDist,
    pub mc_samples: usize,
    pub epsilon: f64,
    pub storage: Storage,
    pub variance_trials: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Blobs,
            d: 10,
            classes: 5,
            separation: 3.0,
            nu: 5.0,
            n_samples: 512,
            hidden: vec![32],
            activation: Activation::Tanh,
            train_steps: 300,
            lr: 0.5,
            batch_size: 64,
            n_batches: 8,
            estimators: ["efim", "mc", "full", "dg", "lr1", "sqrt"].map(String::from).to_vec(),
            probes: 1,
            probe_dist: ProbeDist::Rademacher,
            mc_samples: 64,
            epsilon: 1e-12,
            storage: Storage::Diagonal,
            variance_trials: 2000,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| FimError::Config(format!("bad value '{value}' for {key}")))
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FimError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(FimError::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            match key {
                "seed" => cfg.seed = parse(key, value)?,
                "task" => cfg.task = value.parse()?,
                "d" => cfg.d = parse(key, value)?,
                "classes" => cfg.classes = parse(key, value)?,
                "separation" => cfg.separation = parse(key, value)?,
                "nu" => cfg.nu = parse(key, value)?,
                "n_samples" => cfg.n_samples = parse(key, value)?,
                "hidden" => {
                    cfg.hidden = list(value).iter().map(|w| parse(key, w)).collect::<Result<_>>()?;
                }
                "activation" => cfg.activation = value.parse().map_err(|e: FimError| FimError::Config(e.to_string()))?,
                "train_steps" => cfg.train_steps = parse(key, value)?,
                "lr" => cfg.lr = parse(key, value)?,
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "n_batches" => cfg.n_batches = parse(key, value)?,
                "estimators" => cfg.estimators = list(value),
                "probes" => cfg.probes = parse(key, value)?,
                "probe_dist" => cfg.probe_dist = value.parse().map_err(|e: FimError| FimError::Config(e.to_string()))?,
                "mc_samples" => cfg.mc_samples = parse(key, value)?,
                "epsilon" => cfg.epsilon = parse(key, value)?,
                "storage" => cfg.storage = value.parse().map_err(|e: FimError| FimError::Config(e.to_string()))?,
                "variance_trials" => cfg.variance_trials = parse(key, value)?,
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
                other => return Err(FimError::Config(format!("line {}: unknown key '{other}'", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the `FIMLAB_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| FimError::Config(format!("{SEED_ENV}='{v}' is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(FimError::Config(msg.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.n_batches == 0 {
            return fail("n_batches must be >= 1");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be > 0");
        }
        if self.probes == 0 || self.mc_samples == 0 {
            return fail("probes and mc_samples must be >= 1");
        }
        if self.task == TaskKind::Blobs && self.classes < 2 {
            return fail("classes must be >= 2");
        }
        if self.n_samples < self.batch_size * self.n_batches {
            return fail("n_samples must cover batch_size * n_batches");
        }
        Ok(())
    }
}
