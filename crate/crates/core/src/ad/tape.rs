use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::Tensor;
use crate::error::{FimError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    WeightedSum(Var, Tensor),
    Sum(Var),
    StopGradient(Var),
    View { src: Var, offset: usize, shape: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of primitive operations for reverse-mode AD.
///
/// Parents always precede children, so a reverse walk over the node list is a
/// valid reverse topological order. Leaves are parameters (which receive
/// gradients) and constants (which never do).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_passes: AtomicUsize,
}

/// Gradients from one reverse sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; `None` for values that do not depend on
    /// any parameter (constants, stop-gradient outputs).
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, detail: String) -> FimError {
    FimError::ShapeMismatch { op, detail }
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Number of reverse sweeps run on this tape so far.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes.load(Ordering::Relaxed)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Param, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Constant, value, false)
    }

    fn push_node(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = match &op {
            Op::Param => true,
            Op::Constant | Op::StopGradient(_) => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        Ok(self.push_node(op, value, requires_grad))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Param | Op::Constant => unreachable!("leaves carry their own value"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let (m, k) = a.rows_cols();
                let n = b.shape()[1];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = a.data()[i * k + l];
                        let brow = &b.data()[l * n..(l + 1) * n];
                        for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                            *o += ail * bv;
                        }
                    }
                }
                Tensor::matrix(m, n, out)?
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                if x.shape() != y.shape() {
                    let name = if matches!(op, Op::Add(..)) { "add" } else { "mul" };
                    return Err(mismatch(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                if matches!(op, Op::Add(..)) {
                    x.zip_map(y, |p, q| p + q)
                } else {
                    x.zip_map(y, |p, q| p * q)
                }
            }
            Op::AddBias(a, b) => {
                let (x, bias) = (val(a), val(b));
                if x.shape().len() != 2 || bias.shape() != [x.shape()[1]] {
                    return Err(mismatch("add_bias", format!("{:?} + {:?}", x.shape(), bias.shape())));
                }
                let cols = x.shape()[1];
                let mut out = x.clone();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += bias.data()[i % cols];
                }
                out
            }
            Op::Scale(a, s) => val(a).map(|x| s * x),
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Relu(a) => val(a).map(|x| x.max(0.0)),
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Sqrt(a) => val(a).map(f64::sqrt),
            Op::ClampMin(a, floor) => val(a).map(|x| x.max(*floor)),
            Op::LogSoftmax(a) => {
                let x = val(a);
                if x.shape().is_empty() {
                    return Err(mismatch("log_softmax", "scalar input".into()));
                }
                log_softmax_rows(x)
            }
            Op::Gather(a, idx) => {
                let x = val(a);
                let (rows, cols) = x.rows_cols();
                let expected_rows = if x.shape().len() == 2 { rows } else { 1 };
                if x.shape().is_empty() || idx.len() != expected_rows {
                    return Err(mismatch("gather", format!("{} indices for shape {:?}", idx.len(), x.shape())));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
                    return Err(FimError::IndexOutOfRange { index: bad, bound: cols });
                }
                let picked: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| x.data()[r * cols + c]).collect();
                if x.shape().len() == 2 {
                    Tensor::vector(picked)
                } else {
                    Tensor::scalar(picked[0])
                }
            }
            Op::WeightedSum(a, w) => {
                let x = val(a);
                if x.shape() != w.shape() {
                    return Err(mismatch("weighted_sum", format!("{:?} vs weights {:?}", x.shape(), w.shape())));
                }
                Tensor::scalar(x.data().iter().zip(w.data()).map(|(p, q)| p * q).sum())
            }
            Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
            Op::StopGradient(a) => val(a).clone(),
            Op::View { src, offset, shape } => {
                let x = val(src);
                let len: usize = shape.iter().product();
                if x.shape().len() != 1 || offset + len > x.len() {
                    return Err(mismatch(
                        "view",
                        format!("{shape:?} at offset {offset} of {:?}", x.shape()),
                    ));
                }
                Tensor::new(shape.clone(), x.data()[*offset..offset + len].to_vec())?
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    /// Adds a length-n bias to every row of an m x n matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.record(Op::ClampMin(a, floor))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(a))
    }

    /// Picks `a[r, idx[r]]` for each row (or `a[idx[0]]` for a vector).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.record(Op::Gather(a, idx))
    }

    /// `sum(a o w)` for constant weights `w`.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        self.record(Op::WeightedSum(a, weights))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    /// Identity in the forward pass; blocks every adjoint through this edge.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.record(Op::StopGradient(a))
    }

    /// A reshaped slice `a[offset .. offset + prod(shape)]` of a vector.
    pub fn view(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        self.record(Op::View { src: a, offset, shape: shape.to_vec() })
    }

    /// Replaces the value of a parameter or constant leaf. The shape must stay
    /// the same; call [`Tape::replay`] to propagate.
    pub fn set_value(&mut self, leaf: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Param | Op::Constant) {
            return Err(FimError::InvalidArgument(format!("node {} is not a leaf", leaf.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(mismatch("set_value", format!("{:?} -> {:?}", node.value.shape(), value.shape())));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf value from the current leaves.
    pub fn replay(&mut self) -> Result<()> {
        self.replay_inner(false)
    }

    /// Like [`Tape::replay`], but stop-gradient outputs keep their recorded
    /// values. Finite differences over a replay of this kind see exactly the
    /// function whose gradient [`Tape::backward`] computes.
    pub fn replay_frozen(&mut self) -> Result<()> {
        self.replay_inner(true)
    }

    fn replay_inner(&mut self, freeze_stopped: bool) -> Result<()> {
        for i in 0..self.nodes.len() {
            let skip = match self.nodes[i].op {
                Op::Param | Op::Constant => true,
                Op::StopGradient(_) => freeze_stopped,
                _ => false,
            };
            if skip {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// One reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(FimError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.backward_passes.fetch_add(1, Ordering::Relaxed);

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if matches!(node.op, Op::Param) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut accumulate = |v: Var, contribution: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        };

        match &node.op {
            Op::Param | Op::Constant | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = av.rows_cols();
                let n = bv.shape()[1];
                if needs(a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let brow = &bv.data()[l * n..(l + 1) * n];
                            let grow = &g.data()[i * n..(i + 1) * n];
                            ga[i * k + l] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(*a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if needs(b) {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = av.data()[i * k + l];
                            let grow = &g.data()[i * n..(i + 1) * n];
                            for (o, gv) in gb[l * n..(l + 1) * n].iter_mut().zip(grow) {
                                *o += ail * gv;
                            }
                        }
                    }
                    accumulate(*b, Tensor::new(vec![k, n], gb).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(*a, g.clone());
                }
                if needs(b) {
                    accumulate(*b, g.clone());
                }
            }
            Op::AddBias(a, b) => {
                if needs(a) {
                    accumulate(*a, g.clone());
                }
                if needs(b) {
                    let cols = g.shape()[1];
                    let mut gb = vec![0.0; cols];
                    for (i, gv) in g.data().iter().enumerate() {
                        gb[i % cols] += gv;
                    }
                    accumulate(*b, Tensor::vector(gb));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(*a, g.zip_map(val(b), |x, y| x * y));
                }
                if needs(b) {
                    accumulate(*b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => accumulate(*a, g.map(|x| s * x)),
            Op::Tanh(a) => accumulate(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => accumulate(*a, g.zip_map(val(a), |x, inp| if inp > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => accumulate(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Sqrt(a) => accumulate(*a, g.zip_map(&node.value, |x, y| 0.5 * x / y)),
            Op::ClampMin(a, floor) => {
                accumulate(*a, g.zip_map(val(a), |x, inp| if inp >= *floor { x } else { 0.0 }))
            }
            Op::LogSoftmax(a) => {
                // dx = g - softmax(x) * sum(g), row by row
                let (rows, cols) = node.value.rows_cols();
                let mut gx = g.clone();
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let total: f64 = g.data()[span.clone()].iter().sum();
                    for (o, y) in gx.data_mut()[span.clone()].iter_mut().zip(&node.value.data()[span]) {
                        *o -= y.exp() * total;
                    }
                }
                accumulate(*a, gx);
            }
            Op::Gather(a, idx) => {
                let src = val(a);
                let cols = src.rows_cols().1;
                let mut ga = Tensor::zeros(src.shape());
                for (r, &c) in idx.iter().enumerate() {
                    ga.data_mut()[r * cols + c] += g.data()[r];
                }
                accumulate(*a, ga);
            }
            Op::WeightedSum(a, w) => {
                let s = g.item();
                accumulate(*a, w.map(|x| s * x));
            }
            Op::Sum(a) => {
                let s = g.item();
                accumulate(*a, val(a).map(|_| s));
            }
            Op::View { src, offset, .. } => {
                let mut gs = Tensor::zeros(val(src).shape());
                gs.data_mut()[*offset..offset + g.len()].copy_from_slice(g.data());
                accumulate(*src, gs);
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Param | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::ClampMin(a, _)
        | Op::LogSoftmax(a)
        | Op::Gather(a, _)
        | Op::WeightedSum(a, _)
        | Op::Sum(a)
        | Op::StopGradient(a) => vec![*a],
        Op::View { src, .. } => vec![*src],
    }
}
