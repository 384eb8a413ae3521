//! Dense tensors and a replayable reverse-mode differentiation record.
//!
//! A [`Record`] is built once as a list of primitive operations over declared
//! inputs and constants. Shapes are checked while the record is built, so a
//! record that exists is well-typed. [`Record::forward`] evaluates it on a set
//! of input tensors and keeps every intermediate value; [`Record::backward`]
//! then propagates a seed gradient from any node back to the inputs.
//!
//! ```
//! use makd::numerics::{Record, Tensor};
//!
//! let mut rec = Record::new();
//! let x = rec.input(&[3]);
//! let y = rec.sigmoid(x);
//! let s = rec.sum(y);
//!
//! rec.forward(&[Tensor::zeros(&[3])]).unwrap();
//! assert_eq!(rec.value(s).unwrap().values(), &[1.5]);
//!
//! let grads = rec.backward(s, None).unwrap();
//! assert_eq!(grads[0].values(), &[0.25, 0.25, 0.25]);
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite function value {0} during gradient check")]
    NonFinite(f64),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense array of `f64` with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish_non_exhaustive()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != values.len() {
            return Err(NumericsError::BadLength {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(&[n], values).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(NumericsError::BadLength {
                shape: self.shape.clone(),
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows of a rank-2 tensor (or 1 for a vector).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns of a rank-2 tensor (or the length of a vector).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }
}

/// Handle to a node inside a [`Record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// rank-2 `a` plus a row vector broadcast over rows
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    SliceCols(NodeId, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SliceCols(..) => "slice_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// An ordered list of primitive operations. Nodes only ever reference
/// earlier nodes, so insertion order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Record {
    nodes: Vec<Node>,
    input_nodes: Vec<NodeId>,
    values: Option<Vec<Vec<f64>>>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln Σ exp(x_i)` with the max subtracted first.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn lane_indices(outer: usize, n: usize, inner: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (0..n).map(|k| o * n * inner + k * inner + i).collect()))
}

fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    let mut lane = vec![0.0; n];
    for idx in lane_indices(outer, n, inner) {
        for (slot, &i) in lane.iter_mut().zip(&idx) {
            *slot = x[i];
        }
        let lse = log_sum_exp(&lane);
        for (&i, &v) in idx.iter().zip(&lane) {
            out[i] = if log { v - lse } else { (v - lse).exp() };
        }
    }
    out
}

fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.values = None;
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn mismatch(op: &'static str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch { op, detail }
    }

    /// Declares the next positional input with a fixed shape.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "input extents must be positive"
        );
        let slot = self.input_nodes.len();
        let id = self.push(Op::Input(slot), shape.to_vec());
        self.input_nodes.push(id);
        id
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        let shape = tensor.shape.clone();
        self.push(Op::Constant(tensor), shape)
    }

    pub fn num_inputs(&self) -> usize {
        self.input_nodes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.shape_of(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Self::mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    /// `a[r, c] + row[c]` for every row `r`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape_of(a), self.shape_of(row));
        let ok = sa.len() == 2 && (sr == [sa[1]] || sr == [1, sa[1]]);
        if !ok {
            return Err(Self::mismatch("add_row", format!("{sa:?} + row {sr:?}")));
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::AddRow(a, row), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Scale(a, factor), shape)
    }

    fn unary(&mut self, a: NodeId, make: fn(NodeId) -> Op) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(make(a), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    fn check_axis(&self, op: &'static str, a: NodeId, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape_of(a);
        if axis >= s.len() {
            return Err(Self::mismatch(op, format!("axis {axis} of {s:?}")));
        }
        Ok(s.to_vec())
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.check_axis("softmax", a, axis)?;
        Ok(self.push(Op::Softmax(a, axis), shape))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.check_axis("log_softmax", a, axis)?;
        Ok(self.push(Op::LogSoftmax(a, axis), shape))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape_of(a);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Self::mismatch("slice_cols", format!("{start}..{end} of {s:?}")));
        }
        let shape = vec![s[0], end - start];
        Ok(self.push(Op::SliceCols(a, start, end), shape))
    }

    /// Evaluates every node on `inputs` (one per declared input, in order)
    /// and returns the value of the last node.
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        self.evaluate(inputs)?;
        let last = NodeId(self.nodes.len() - 1);
        self.value(last)
    }

    /// Evaluates every node, keeping all values for [`Record::backward`].
    pub fn evaluate(&mut self, inputs: &[Tensor]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Self::mismatch("forward", "empty record".into()));
        }
        if inputs.len() != self.input_nodes.len() {
            return Err(NumericsError::InputCount {
                expected: self.input_nodes.len(),
                got: inputs.len(),
            });
        }
        for (slot, id) in self.input_nodes.iter().enumerate() {
            let want = &self.nodes[id.0].shape;
            if inputs[slot].shape() != want.as_slice() {
                return Err(Self::mismatch(
                    "input",
                    format!("slot {slot} declared {want:?}, got {:?}", inputs[slot].shape()),
                ));
            }
        }
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input(slot) => inputs[*slot].values.clone(),
                Op::Constant(t) => t.values.clone(),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                    matmul_values(&vals[a.0], &vals[b.0], sa[0], sa[1], sb[1])
                }
                Op::Add(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Sub(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x - y),
                Op::Mul(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x * y),
                Op::AddRow(a, r) => {
                    let row = &vals[r.0];
                    let c = row.len();
                    vals[a.0].iter().enumerate().map(|(i, x)| x + row[i % c]).collect()
                }
                Op::Scale(a, f) => vals[a.0].iter().map(|x| x * f).collect(),
                Op::Relu(a) => vals[a.0].iter().map(|&x| x.max(0.0)).collect(),
                Op::Sigmoid(a) => vals[a.0].iter().map(|&x| sigmoid(x)).collect(),
                Op::Softplus(a) => vals[a.0].iter().map(|&x| softplus(x)).collect(),
                Op::Log(a) => vals[a.0].iter().map(|x| x.ln()).collect(),
                Op::Exp(a) => vals[a.0].iter().map(|x| x.exp()).collect(),
                Op::Sum(a) => vec![vals[a.0].iter().sum()],
                Op::Softmax(a, axis) => softmax_axis(&vals[a.0], &self.nodes[a.0].shape, *axis, false),
                Op::LogSoftmax(a, axis) => softmax_axis(&vals[a.0], &self.nodes[a.0].shape, *axis, true),
                Op::SliceCols(a, start, end) => {
                    let cols = self.nodes[a.0].shape[1];
                    vals[a.0]
                        .chunks(cols)
                        .flat_map(|row| row[*start..*end].iter().copied())
                        .collect()
                }
            };
            vals.push(v);
        }
        self.values = Some(vals);
        Ok(())
    }

    /// Value of `id` from the latest forward pass.
    pub fn value(&self, id: NodeId) -> Result<Tensor> {
        let vals = self.values.as_ref().ok_or(NumericsError::BackwardBeforeForward)?;
        Tensor::new(&self.nodes[id.0].shape, vals[id.0].clone())
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let vals = self.values.as_ref().ok_or(NumericsError::BackwardBeforeForward)?;
        Ok(vals[id.0][0])
    }

    /// Propagates `seed` (ones when `None`) from `output` to every input.
    /// Gradients of a node consumed by several ops are summed.
    pub fn backward(&self, output: NodeId, seed: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let vals = self.values.as_ref().ok_or(NumericsError::BackwardBeforeForward)?;
        let out_shape = &self.nodes[output.0].shape;
        let seed = match seed {
            Some(s) if s.shape() != out_shape.as_slice() => {
                return Err(Self::mismatch(
                    "backward",
                    format!("seed {:?} for output {out_shape:?}", s.shape()),
                ))
            }
            Some(s) => s.values.clone(),
            None => vec![1.0; vals[output.0].len()],
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &vals[idx];
            match &node.op {
                Op::Input(_) | Op::Constant(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av_ip * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, &vals[b.0], |x, y| x * y);
                    let gb = zip_map(&g, &vals[a.0], |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let c = vals[r.0].len();
                    let mut gr = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (o, x) in gr.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *r, gr);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.iter().map(|x| x * f).collect());
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, &vals[a.0], |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, out, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = zip_map(&g, &vals[a.0], |x, v| x * sigmoid(v));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = zip_map(&g, &vals[a.0], |x, v| x / v);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip_map(&g, out, |x, e| x * e);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = vals[a.0].len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Softmax(a, axis) => {
                    let (outer, n, inner) = axis_split(&node.shape, *axis);
                    let mut ga = vec![0.0; g.len()];
                    for idx in lane_indices(outer, n, inner) {
                        let dot: f64 = idx.iter().map(|&i| g[i] * out[i]).sum();
                        for &i in &idx {
                            ga[i] = out[i] * (g[i] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a, axis) => {
                    let (outer, n, inner) = axis_split(&node.shape, *axis);
                    let mut ga = vec![0.0; g.len()];
                    for idx in lane_indices(outer, n, inner) {
                        let total: f64 = idx.iter().map(|&i| g[i]).sum();
                        for &i in &idx {
                            ga[i] = g[i] - out[i].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let cols = self.nodes[a.0].shape[1];
                    let width = end - start;
                    let mut ga = vec![0.0; vals[a.0].len()];
                    for (r, grow) in g.chunks(width).enumerate() {
                        ga[r * cols + start..r * cols + end].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        self.input_nodes
            .iter()
            .map(|id| {
                let shape = &self.nodes[id.0].shape;
                let g = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                Tensor::new(shape, g)
            })
            .collect()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Largest coordinate-wise disagreement between the analytic gradient that
/// `f` reports at `point` and a central difference of its value, each
/// coordinate scaled by `max(1, |analytic|)`.
///
/// `f` returns `(value, gradient)`; only the value is used away from `point`.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) {
        return Err(NumericsError::BadStep(step));
    }
    let (v0, grad) = f(point);
    if !v0.is_finite() {
        return Err(NumericsError::NonFinite(v0));
    }
    if grad.len() != point.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check",
            detail: format!("gradient {} vs point {}", grad.len(), point.len()),
        });
    }
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x).0;
        x[i] = orig - step;
        let down = f(&x).0;
        x[i] = orig;
        for v in [up, down] {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite(v));
            }
        }
        let numeric = (up - down) / (2.0 * step);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_unary(build: impl Fn(&mut Record, NodeId) -> NodeId, x: Vec<f64>) -> Vec<f64> {
        let mut rec = Record::new();
        let n = x.len();
        let a = rec.input(&[n]);
        build(&mut rec, a);
        rec.forward(&[Tensor::vector(x)]).unwrap().into_values()
    }

    #[test]
    fn primitive_examples() {
        assert_eq!(eval_unary(|r, a| r.relu(a), vec![-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(eval_unary(|r, a| r.sigmoid(a), vec![0.0]), vec![0.5]);

        let mut rec = Record::new();
        let a = rec.input(&[2, 3]);
        let b = rec.input(&[3, 1]);
        rec.matmul(a, b).unwrap();
        let out = rec
            .forward(&[Tensor::filled(&[2, 3], 1.0), Tensor::filled(&[3, 1], 1.0)])
            .unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.values(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut rec = Record::new();
        let a = rec.input(&[2, 3]);
        let b = rec.input(&[2, 3]);
        let err = rec.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = rec.input(&[3]);
        assert!(matches!(
            rec.add(a, c),
            Err(NumericsError::ShapeMismatch { op: "add", .. })
        ));
        assert!(rec.slice_cols(a, 2, 4).is_err());

        let mut rec = Record::new();
        let x = rec.input(&[2]);
        rec.exp(x);
        assert!(rec.forward(&[Tensor::zeros(&[3])]).is_err());
        assert!(matches!(rec.forward(&[]), Err(NumericsError::InputCount { .. })));
    }

    #[test]
    fn backward_before_forward() {
        let mut rec = Record::new();
        let x = rec.input(&[2]);
        let s = rec.sum(x);
        assert_eq!(rec.backward(s, None).unwrap_err(), NumericsError::BackwardBeforeForward);
        rec.forward(&[Tensor::vector(vec![3.0, -4.0])]).unwrap();
        assert_eq!(rec.backward(s, None).unwrap()[0].values(), &[1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x * x + x) -> df/dx = 2x + 1
        let mut rec = Record::new();
        let x = rec.input(&[3]);
        let xx = rec.mul(x, x).unwrap();
        let y = rec.add(xx, x).unwrap();
        let s = rec.sum(y);
        rec.forward(&[Tensor::vector(vec![1.0, -2.0, 0.5])]).unwrap();
        let g = rec.backward(s, None).unwrap();
        assert_eq!(g[0].values(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn softmax_normalises_and_shifts() {
        let mut rec = Record::new();
        let x = rec.input(&[2, 4]);
        rec.softmax(x, 1).unwrap();
        let base = vec![0.1, 5.0, -3.0, 2.0, 700.0, 699.0, 0.0, -1.0];
        let p = rec.forward(&[Tensor::matrix(2, 4, base.clone()).unwrap()]).unwrap();
        for row in p.values().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.0).collect();
        let q = rec.forward(&[Tensor::matrix(2, 4, shifted).unwrap()]).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_examples() {
        let sq =
            |x: &[f64]| -> (f64, Vec<f64>) { (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()) };
        assert!(grad_check(sq, &[1.0, 2.0, 3.0], 1e-5).unwrap() < 1e-8);
        let constant = |x: &[f64]| (4.0, vec![0.0; x.len()]);
        assert!(grad_check(constant, &[1.0, -1.0], 1e-5).unwrap() <= 1e-12);
        let blowup = |x: &[f64]| (1.0 / (x[0] - 1e-5), vec![0.0]);
        assert!(matches!(
            grad_check(blowup, &[1e-5 + 1e-5], 1e-5),
            Err(NumericsError::NonFinite(_))
        ));
        assert!(grad_check(sq, &[1.0], 0.0).is_err());
    }

    type Build = fn(&mut Record, &[NodeId]) -> NodeId;
    type Shapes = fn(usize, usize, usize) -> Vec<Vec<usize>>;

    /// Input shapes for one draw of `(r, k, c)`; each op gets what it needs.
    fn op_table() -> Vec<(&'static str, Build, Shapes)> {
        let mat = |r, _, c| vec![vec![r, c]];
        let two = |r, _, c| vec![vec![r, c], vec![r, c]];
        vec![
            (
                "matmul",
                |rec, x| rec.matmul(x[0], x[1]).unwrap(),
                |r, k, c| vec![vec![r, k], vec![k, c]],
            ),
            ("add", |rec, x| rec.add(x[0], x[1]).unwrap(), two),
            ("sub", |rec, x| rec.sub(x[0], x[1]).unwrap(), two),
            ("mul", |rec, x| rec.mul(x[0], x[1]).unwrap(), two),
            (
                "add_row",
                |rec, x| rec.add_row(x[0], x[1]).unwrap(),
                |r, _, c| vec![vec![r, c], vec![c]],
            ),
            ("scale", |rec, x| rec.scale(x[0], -1.7), mat),
            ("relu", |rec, x| rec.relu(x[0]), mat),
            ("sigmoid", |rec, x| rec.sigmoid(x[0]), mat),
            ("softplus", |rec, x| rec.softplus(x[0]), mat),
            ("log", |rec, x| rec.log(x[0]), mat),
            ("exp", |rec, x| rec.exp(x[0]), mat),
            ("sum", |rec, x| rec.sum(x[0]), mat),
            ("softmax", |rec, x| rec.softmax(x[0], 1).unwrap(), mat),
            ("log_softmax", |rec, x| rec.log_softmax(x[0], 1).unwrap(), mat),
            (
                "slice_cols",
                |rec, x| {
                    let c = rec.shape(x[0])[1];
                    rec.slice_cols(x[0], c / 2, c).unwrap()
                },
                mat,
            ),
        ]
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        for (name, build, shapes) in op_table() {
            for seed in 0..100u64 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let (r, k, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..5));
                let shapes = shapes(r, k, c);
                // log needs positive inputs; everything stays clear of the relu kink
                let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
                let point: Vec<f64> = (0..total)
                    .map(|_| {
                        let m = rng.gen_range(0.1..2.0);
                        if name == "log" || rng.gen_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect();
                let out_weights: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // f = sum(op(x) * w), w a fixed random cotangent
                let f = |flat: &[f64]| -> (f64, Vec<f64>) {
                    let mut rec = Record::new();
                    let ids: Vec<NodeId> = shapes.iter().map(|s| rec.input(s)).collect();
                    let y = build(&mut rec, &ids);
                    let shape = rec.shape(y).to_vec();
                    let n: usize = shape.iter().product::<usize>().max(1);
                    let w = rec.constant(Tensor::new(&shape, out_weights[..n].to_vec()).unwrap());
                    let yw = rec.mul(y, w).unwrap();
                    let out = rec.sum(yw);
                    let mut inputs = Vec::new();
                    let mut offset = 0;
                    for s in &shapes {
                        let n: usize = s.iter().product();
                        inputs.push(Tensor::new(s, flat[offset..offset + n].to_vec()).unwrap());
                        offset += n;
                    }
                    let v = rec.forward(&inputs).unwrap().values()[0];
                    let g = rec.backward(out, None).unwrap();
                    (v, g.into_iter().flat_map(|t| t.into_values()).collect())
                };
                let err = grad_check(f, &point, 1e-5).unwrap();
                assert!(err < 1e-6, "{name} seed {seed}: {err}");
            }
        }
    }
}
