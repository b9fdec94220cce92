//! MLP classifiers traced on the AD tape.
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix as
//! `[in, out]` row-major followed (optionally) by a length-`out` bias, so a
//! batch `X` of shape `[n, in]` maps to `X W + b`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::core_space::ProbVector;
use crate::error::{FimError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    None,
}

impl std::str::FromStr for Activation {
    type Err = FimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            "none" | "linear" => Ok(Self::None),
            other => Err(FimError::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Architecture of a fully connected classifier.
///
/// `layer_sizes` lists input width, hidden widths and output width. With
/// `reference_logit`, a constant zero logit is appended after the last layer,
/// so a one-unit output layer still yields a two-class softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
    pub reference_logit: bool,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, bias: bool, reference_logit: bool) -> Result<Self> {
        let spec = Self { layer_sizes, activation, bias, reference_logit };
        spec.validate()?;
        Ok(spec)
    }

    /// `d -> hidden... -> classes` with biases.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, activation: Activation) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes, activation, true, false)
    }

    pub fn linear_softmax(input: usize, classes: usize, bias: bool) -> Result<Self> {
        Self::new(vec![input, classes], Activation::None, bias, false)
    }

    /// Scalar logistic model `z = (theta * x, 0)`: one parameter, two classes.
    pub fn logistic_scalar() -> Self {
        Self { layer_sizes: vec![1, 1], activation: Activation::None, bias: false, reference_logit: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(FimError::InvalidArgument("a network needs input and output widths".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(FimError::InvalidArgument(format!("zero width in {:?}", self.layer_sizes)));
        }
        if self.classes() < 2 {
            return Err(FimError::InvalidArgument(format!("{} output classes; need at least 2", self.classes())));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1] + usize::from(self.reference_logit)
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layers = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut offset = 0;
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight_offset = offset;
            offset += fan_in * fan_out;
            let bias_offset = self.bias.then(|| {
                let b = offset;
                offset += fan_out;
                b
            });
            layers.push(LayerSlot { fan_in, fan_out, weight_offset, bias_offset });
        }
        ParamLayout { layers, dim: offset }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub layers: Vec<LayerSlot>,
    pub dim: usize,
}

/// One layer's parameters in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_in x fan_out`.
    pub weights: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn new(spec: &NetworkSpec, flat: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if flat.len() != layout.dim {
            return Err(FimError::ShapeMismatch {
                op: "param vector",
                detail: format!("expected {} parameters, got {}", layout.dim, flat.len()),
            });
        }
        Ok(Self { flat, layout })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = spec.layout();
        Self { flat: vec![0.0; layout.dim], layout }
    }

    pub fn dim(&self) -> usize {
        self.flat.len()
    }

    pub fn unflatten(&self) -> Vec<LayerParams> {
        self.layout
            .layers
            .iter()
            .map(|slot| {
                let w = &self.flat[slot.weight_offset..slot.weight_offset + slot.fan_in * slot.fan_out];
                LayerParams {
                    weights: DMatrix::from_row_slice(slot.fan_in, slot.fan_out, w),
                    bias: slot
                        .bias_offset
                        .map(|b| DVector::from_column_slice(&self.flat[b..b + slot.fan_out])),
                }
            })
            .collect()
    }

    pub fn flatten(spec: &NetworkSpec, layers: &[LayerParams]) -> Result<Self> {
        let layout = spec.layout();
        if layers.len() != layout.layers.len() {
            return Err(FimError::ShapeMismatch {
                op: "flatten",
                detail: format!("{} layers for a {}-layer network", layers.len(), layout.layers.len()),
            });
        }
        let mut flat = vec![0.0; layout.dim];
        for (slot, layer) in layout.layers.iter().zip(layers) {
            if layer.weights.shape() != (slot.fan_in, slot.fan_out) {
                return Err(FimError::ShapeMismatch {
                    op: "flatten",
                    detail: format!("weights {:?}, expected {:?}", layer.weights.shape(), (slot.fan_in, slot.fan_out)),
                });
            }
            for i in 0..slot.fan_in {
                for j in 0..slot.fan_out {
                    flat[slot.weight_offset + i * slot.fan_out + j] = layer.weights[(i, j)];
                }
            }
            match (slot.bias_offset, &layer.bias) {
                (Some(b), Some(bias)) if bias.len() == slot.fan_out => {
                    flat[b..b + slot.fan_out].copy_from_slice(bias.as_slice());
                }
                (None, None) => {}
                _ => {
                    return Err(FimError::ShapeMismatch { op: "flatten", detail: "bias does not match layout".into() })
                }
            }
        }
        Ok(Self { flat, layout })
    }

    fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(FimError::ShapeMismatch {
                op: "parameters",
                detail: format!("layout of {} parameters does not match the network", self.flat.len()),
            });
        }
        Ok(())
    }
}

/// Weights `N(0, 1/fan_in)`, biases `N(0, 0.01)`.
pub fn init_params<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> ParamVector {
    let layout = spec.layout();
    let mut flat = vec![0.0; layout.dim];
    for slot in &layout.layers {
        let scale = 1.0 / (slot.fan_in as f64).sqrt();
        for w in &mut flat[slot.weight_offset..slot.weight_offset + slot.fan_in * slot.fan_out] {
            *w = scale * rng.sample::<f64, _>(StandardNormal);
        }
        if let Some(b) = slot.bias_offset {
            for v in &mut flat[b..b + slot.fan_out] {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    ParamVector { flat, layout }
}

/// Records the forward pass for a batch `x` (`[n, d]` tensor node) and
/// returns the `[n, C]` logits node.
pub fn record_logits(tape: &mut Tape, spec: &NetworkSpec, theta: Var, x: Var) -> Result<Var> {
    spec.validate()?;
    let layout = spec.layout();
    if tape.shape(theta) != [layout.dim] {
        return Err(FimError::ShapeMismatch {
            op: "record_logits",
            detail: format!("theta shape {:?}, expected [{}]", tape.shape(theta), layout.dim),
        });
    }
    match tape.shape(x) {
        [_, d] if *d == spec.input_dim() => {}
        other => {
            return Err(FimError::ShapeMismatch {
                op: "record_logits",
                detail: format!("input shape {other:?}, expected [n, {}]", spec.input_dim()),
            })
        }
    }
    let last = layout.layers.len() - 1;
    let mut h = x;
    for (l, slot) in layout.layers.iter().enumerate() {
        let w = tape.view(theta, slot.weight_offset, &[slot.fan_in, slot.fan_out])?;
        h = tape.matmul(h, w)?;
        if let Some(b) = slot.bias_offset {
            let bias = tape.view(theta, b, &[slot.fan_out])?;
            h = tape.add_bias(h, bias)?;
        }
        if l < last {
            h = match spec.activation {
                Activation::Tanh => tape.tanh(h)?,
                Activation::Relu => tape.relu(h)?,
                Activation::None => h,
            };
        }
    }
    if spec.reference_logit {
        // [I | 0] appends the constant zero logit.
        let out = spec.layer_sizes[spec.layer_sizes.len() - 1];
        let mut pad = vec![0.0; out * (out + 1)];
        for i in 0..out {
            pad[i * (out + 1) + i] = 1.0;
        }
        let pad = tape.constant(Tensor::matrix(out, out + 1, pad)?);
        h = tape.matmul(h, pad)?;
    }
    Ok(h)
}

/// A fresh tape holding `theta` as the parameter leaf, `x` as a constant and
/// the recorded logits.
pub struct TracedForward {
    pub tape: Tape,
    pub theta: Var,
    pub logits: Var,
}

pub fn trace_forward(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>) -> Result<TracedForward> {
    theta.check(spec)?;
    let mut tape = Tape::new();
    let theta_var = tape.param(Tensor::vector(theta.flat.clone()));
    let x_var = tape.constant(Tensor::from_dmatrix(x));
    let logits = record_logits(&mut tape, spec, theta_var, x_var)?;
    Ok(TracedForward { tape, theta: theta_var, logits })
}

/// Logits for a batch, one row per sample.
pub fn forward_logits(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let traced = trace_forward(spec, theta, x)?;
    Ok(traced.tape.value(traced.logits).to_dmatrix())
}

/// Parameter-output Jacobian `dz/dtheta` for one sample.
#[derive(Debug, Clone)]
pub struct JacobianBlock {
    /// `C x dim(theta)`.
    pub matrix: DMatrix<f64>,
    /// Ascending.
    pub singular_values: DVector<f64>,
}

impl JacobianBlock {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let gram = &matrix * matrix.transpose();
        let eig = linalg::jacobi_eigen(&gram)?;
        let singular_values = eig.values.map(|l| l.max(0.0).sqrt());
        Ok(Self { matrix, singular_values })
    }

    /// Smallest singular value.
    pub fn sigma_min(&self) -> f64 {
        self.singular_values[0]
    }

    /// Largest singular value.
    pub fn sigma_max(&self) -> f64 {
        self.singular_values[self.singular_values.len() - 1]
    }
}

/// Everything the estimators need about one input: logits, probabilities and
/// Jacobian.
#[derive(Debug, Clone)]
pub struct SampleGeometry {
    pub logits: DVector<f64>,
    pub probs: ProbVector,
    pub jacobian: JacobianBlock,
}

fn single_row(x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, x.len(), x)
}

/// `C` reverse sweeps, one per logit.
pub fn per_sample_jacobian(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Result<JacobianBlock> {
    Ok(sample_geometry(spec, theta, x)?.jacobian)
}

pub fn sample_geometry(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Result<SampleGeometry> {
    let mut traced = trace_forward(spec, theta, &single_row(x))?;
    let c = spec.classes();
    let logits = DVector::from_column_slice(traced.tape.value(traced.logits).data());
    let mut matrix = DMatrix::zeros(c, theta.dim());
    for i in 0..c {
        let mut seed = vec![0.0; c];
        seed[i] = 1.0;
        let zi = traced.tape.weighted_sum(traced.logits, Tensor::matrix(1, c, seed)?)?;
        let grads = traced.tape.backward(zi)?;
        let g = grads.get(traced.theta).expect("parameter gradient");
        matrix.row_mut(i).copy_from_slice(g.data());
    }
    let probs = ProbVector::from_logits(logits.as_slice())?;
    Ok(SampleGeometry { logits, probs, jacobian: JacobianBlock::from_matrix(matrix)? })
}

/// Geometry of every row of `x`.
pub fn batch_geometry(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>) -> Result<Vec<SampleGeometry>> {
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.iter().map(|r| sample_geometry(spec, theta, r)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSidecar {
    layer_sizes: Vec<usize>,
    activation: Activation,
    bias: bool,
    reference_logit: bool,
    layout: ParamLayout,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `theta` as little-endian f64 to `path` and the architecture to
/// `path.json`.
pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, theta: &ParamVector) -> Result<()> {
    theta.check(spec)?;
    let bytes: Vec<u8> = theta.flat.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let sidecar = CheckpointSidecar {
        layer_sizes: spec.layer_sizes.clone(),
        activation: spec.activation,
        bias: spec.bias,
        reference_logit: spec.reference_logit,
        layout: theta.layout.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, ParamVector)> {
    let sidecar: CheckpointSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let spec = NetworkSpec::new(sidecar.layer_sizes, sidecar.activation, sidecar.bias, sidecar.reference_logit)?;
    if spec.layout() != sidecar.layout {
        return Err(FimError::Format("sidecar layout disagrees with its architecture".into()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(FimError::Format(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    let flat = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let theta = ParamVector::new(&spec, flat).map_err(|e| FimError::Format(e.to_string()))?;
    Ok((spec, theta))
}
