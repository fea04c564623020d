//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape. Every node is evaluated eagerly when it
//! is appended, so building the graph doubles as the forward pass. Leaves can
//! later be re-fed with [`Graph::eval`], which replays the tape in append
//! order. [`Graph::backward`] accumulates gradients in reverse append order.
//!
//! Broadcasting is limited to scalar-vs-tensor in the elementwise binary ops;
//! everything else goes through explicit shape ops (`add_bias`, `gather`,
//! `select_rows`, `concat`, `sum_rows`).

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar loss, node {node} has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf and cannot be fed")]
    NotALeaf(usize),
    #[error("loss builder is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("finite-difference step must lie in (0, 1e-3], got {0}")]
    InvalidStep(f64),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AutodiffError::InvalidTensor(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    MaxConst(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    Softmax(NodeId),
    Abs(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    SelectRows(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::MaxConst(..) => "max_const",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Softmax(..) => "softmax",
            Op::Abs(..) => "abs",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::SelectRows(..) => "select_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`. Nodes the loss does not depend on get `None`.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(node: usize, op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        node,
        op,
        detail: detail.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.compute(id, &op)?;
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(id))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(m, bias))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }
    /// Elementwise `max(x, floor)`; the subgradient at the kink is 0.
    pub fn max_const(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.push(Op::MaxConst(a, floor))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }
    /// Elementwise square root; the gradient at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }
    /// Sum over the last axis: `[m, n] -> [m]`, `[n] -> []`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }
    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, k))
    }
    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, k))
    }
    /// Concatenates along the first axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec()))
    }
    /// Picks elements by flat row-major index into a 1-D result.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Gather(a, indices))
    }
    /// Picks rows of a matrix into a new `[indices.len(), cols]` matrix.
    pub fn select_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.push(Op::SelectRows(a, indices))
    }

    fn compute(&self, id: usize, op: &Op) -> Result<Tensor> {
        let name = op.name();
        let v = |n: NodeId| -> Result<&Tensor> {
            self.check(n)?;
            if n.0 >= id {
                return Err(shape_err(id, name, "input does not precede node"));
            }
            Ok(&self.nodes[n.0].value)
        };
        let unary = |n: NodeId, f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let x = v(n)?;
            Ok(Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&a| f(a)).collect(),
            })
        };
        match op {
            Op::Leaf => Err(shape_err(id, name, "leaves carry their own value")),
            Op::Add(a, b) => binary(id, name, v(*a)?, v(*b)?, |x, y| x + y),
            Op::Sub(a, b) => binary(id, name, v(*a)?, v(*b)?, |x, y| x - y),
            Op::Mul(a, b) => binary(id, name, v(*a)?, v(*b)?, |x, y| x * y),
            Op::Neg(a) => unary(*a, &|x| -x),
            Op::MatMul(a, b) => {
                let (x, y) = (v(*a)?, v(*b)?);
                if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
                    return Err(shape_err(
                        id,
                        name,
                        format!("cannot multiply {:?} by {:?}", x.shape, y.shape),
                    ));
                }
                let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                Ok(Tensor {
                    shape: vec![m, n],
                    data: matmul_raw(&x.data, &y.data, m, k, n),
                })
            }
            Op::AddBias(a, b) => {
                let (x, bias) = (v(*a)?, v(*b)?);
                if x.shape.len() != 2 || bias.shape != [x.shape[1]] {
                    return Err(shape_err(
                        id,
                        name,
                        format!("bias {:?} does not fit matrix {:?}", bias.shape, x.shape),
                    ));
                }
                let n = x.shape[1];
                let data = x
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| e + bias.data[i % n])
                    .collect();
                Ok(Tensor {
                    shape: x.shape.clone(),
                    data,
                })
            }
            Op::Relu(a) => unary(*a, &|x| if x > 0.0 { x } else { 0.0 }),
            Op::MaxConst(a, c) => {
                let c = *c;
                unary(*a, &move |x| if x > c { x } else { c })
            }
            Op::Exp(a) => unary(*a, &f64::exp),
            Op::Log(a) => unary(*a, &f64::ln),
            Op::Square(a) => unary(*a, &|x| x * x),
            Op::Sqrt(a) => unary(*a, &f64::sqrt),
            Op::Abs(a) => unary(*a, &f64::abs),
            Op::Scale(a, k) => {
                let k = *k;
                unary(*a, &move |x| x * k)
            }
            Op::AddScalar(a, k) => {
                let k = *k;
                unary(*a, &move |x| x + k)
            }
            Op::Sum(a) => Ok(Tensor::scalar(v(*a)?.data.iter().sum())),
            Op::Mean(a) => {
                let x = v(*a)?;
                Ok(Tensor::scalar(
                    x.data.iter().sum::<f64>() / x.data.len() as f64,
                ))
            }
            Op::SumRows(a) => {
                let x = v(*a)?;
                let cols = x.cols();
                let shape = if x.shape.is_empty() {
                    Vec::new()
                } else {
                    x.shape[..x.shape.len() - 1].to_vec()
                };
                Ok(Tensor {
                    shape,
                    data: x.data.chunks(cols).map(|r| r.iter().sum()).collect(),
                })
            }
            Op::Softmax(a) => {
                let x = v(*a)?;
                let cols = x.cols();
                let mut data = Vec::with_capacity(x.data.len());
                for row in x.data.chunks(cols) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&r| (r - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    data.extend(exps.iter().map(|e| e / z));
                }
                Ok(Tensor {
                    shape: x.shape.clone(),
                    data,
                })
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(shape_err(id, name, "nothing to concatenate"));
                }
                let first = v(parts[0])?;
                let tail: Vec<usize> = if first.shape.len() > 1 {
                    first.shape[1..].to_vec()
                } else {
                    Vec::new()
                };
                let mut lead = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let t = v(p)?;
                    let t_tail: &[usize] = if t.shape.len() > 1 { &t.shape[1..] } else { &[] };
                    if t_tail != tail.as_slice() {
                        return Err(shape_err(
                            id,
                            name,
                            format!("part {:?} does not match {:?}", t.shape, first.shape),
                        ));
                    }
                    lead += t.shape.first().copied().unwrap_or(1);
                    data.extend_from_slice(&t.data);
                }
                let mut shape = vec![lead];
                shape.extend(tail);
                Ok(Tensor { shape, data })
            }
            Op::Gather(a, idx) => {
                let x = v(*a)?;
                if idx.is_empty() {
                    return Err(shape_err(id, name, "empty index list"));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= x.data.len()) {
                    return Err(shape_err(
                        id,
                        name,
                        format!("index {bad} out of range for {} elements", x.data.len()),
                    ));
                }
                Ok(Tensor {
                    shape: vec![idx.len()],
                    data: idx.iter().map(|&i| x.data[i]).collect(),
                })
            }
            Op::SelectRows(a, idx) => {
                let x = v(*a)?;
                if x.shape.len() != 2 {
                    return Err(shape_err(id, name, format!("expected matrix, got {:?}", x.shape)));
                }
                if idx.is_empty() {
                    return Err(shape_err(id, name, "empty row list"));
                }
                let (rows, cols) = (x.shape[0], x.shape[1]);
                if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                    return Err(shape_err(
                        id,
                        name,
                        format!("row {bad} out of range for {rows} rows"),
                    ));
                }
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &r in idx {
                    data.extend_from_slice(x.row(r));
                }
                Ok(Tensor {
                    shape: vec![idx.len(), cols],
                    data,
                })
            }
        }
    }

    /// Re-feeds leaves and replays the tape, returning the value at `target`.
    pub fn eval(&mut self, feeds: &HashMap<NodeId, Tensor>, target: NodeId) -> Result<Tensor> {
        self.check(target)?;
        for (id, t) in feeds {
            self.check(*id)?;
            let node = &self.nodes[id.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(AutodiffError::NotALeaf(id.0));
            }
            if node.value.shape != t.shape {
                return Err(shape_err(
                    id.0,
                    "leaf",
                    format!("fed {:?}, expected {:?}", t.shape, node.value.shape),
                ));
            }
        }
        for (id, t) in feeds {
            self.nodes[id.0].value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                if !self.nodes[i].value.all_finite() {
                    return Err(AutodiffError::NonFinite { node: i, op: "leaf" });
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(i, &op)?;
            if !value.all_finite() {
                return Err(AutodiffError::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(self.nodes[target.0].value.clone())
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor {
            shape: lv.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |n: &NodeId| &self.nodes[n.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, val(a), g.data.clone());
                accumulate(grads, *b, val(b), g.data.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, val(a), g.data.clone());
                accumulate(grads, *b, val(b), g.data.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, z) = (val(a), val(b));
                let ga = g
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| gk * bcast(z, k))
                    .collect();
                let gb = g
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| gk * bcast(x, k))
                    .collect();
                accumulate(grads, *a, x, ga);
                accumulate(grads, *b, z, gb);
            }
            Op::Neg(a) => accumulate(grads, *a, val(a), g.data.iter().map(|x| -x).collect()),
            Op::MatMul(a, b) => {
                let (x, z) = (val(a), val(b));
                let (m, k, n) = (x.shape[0], x.shape[1], z.shape[1]);
                let zt = transpose(&z.data, k, n);
                let xt = transpose(&x.data, m, k);
                accumulate(grads, *a, x, matmul_raw(&g.data, &zt, m, n, k));
                accumulate(grads, *b, z, matmul_raw(&xt, &g.data, k, m, n));
            }
            Op::AddBias(a, b) => {
                let n = val(b).numel();
                let mut gb = vec![0.0; n];
                for (k, gk) in g.data.iter().enumerate() {
                    gb[k % n] += gk;
                }
                accumulate(grads, *a, val(a), g.data.clone());
                accumulate(grads, *b, val(b), gb);
            }
            Op::Relu(a) => {
                let x = val(a);
                let ga = zip_map(&g.data, &x.data, |gk, xk| if xk > 0.0 { gk } else { 0.0 });
                accumulate(grads, *a, x, ga);
            }
            Op::MaxConst(a, c) => {
                let x = val(a);
                let ga = zip_map(&g.data, &x.data, |gk, xk| if xk > *c { gk } else { 0.0 });
                accumulate(grads, *a, x, ga);
            }
            Op::Exp(a) => {
                accumulate(grads, *a, val(a), zip_map(&g.data, &y.data, |gk, yk| gk * yk))
            }
            Op::Log(a) => {
                let x = val(a);
                accumulate(grads, *a, x, zip_map(&g.data, &x.data, |gk, xk| gk / xk));
            }
            Op::Square(a) => {
                let x = val(a);
                accumulate(grads, *a, x, zip_map(&g.data, &x.data, |gk, xk| 2.0 * xk * gk));
            }
            Op::Sqrt(a) => {
                let ga = zip_map(&g.data, &y.data, |gk, yk| {
                    if yk > 0.0 {
                        gk / (2.0 * yk)
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, val(a), ga);
            }
            Op::Abs(a) => {
                let x = val(a);
                let ga = zip_map(&g.data, &x.data, |gk, xk| {
                    if xk > 0.0 {
                        gk
                    } else if xk < 0.0 {
                        -gk
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, x, ga);
            }
            Op::Scale(a, k) => {
                accumulate(grads, *a, val(a), g.data.iter().map(|x| x * k).collect())
            }
            Op::AddScalar(a, _) => accumulate(grads, *a, val(a), g.data.clone()),
            Op::Sum(a) => {
                let x = val(a);
                accumulate(grads, *a, x, vec![g.data[0]; x.numel()]);
            }
            Op::Mean(a) => {
                let x = val(a);
                let n = x.numel() as f64;
                accumulate(grads, *a, x, vec![g.data[0] / n; x.numel()]);
            }
            Op::SumRows(a) => {
                let x = val(a);
                let cols = x.cols();
                let ga = (0..x.numel()).map(|k| g.data[k / cols]).collect();
                accumulate(grads, *a, x, ga);
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut ga = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data.chunks(cols).zip(g.data.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    ga.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                accumulate(grads, *a, val(a), ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let x = val(p);
                    let n = x.numel();
                    accumulate(grads, *p, x, g.data[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Gather(a, idx) => {
                let x = val(a);
                let mut ga = vec![0.0; x.numel()];
                for (gk, &src) in g.data.iter().zip(idx) {
                    ga[src] += gk;
                }
                accumulate(grads, *a, x, ga);
            }
            Op::SelectRows(a, idx) => {
                let x = val(a);
                let cols = x.cols();
                let mut ga = vec![0.0; x.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g.data[r * cols + c];
                    }
                }
                accumulate(grads, *a, x, ga);
            }
        }
    }
}

fn binary(
    id: usize,
    name: &'static str,
    x: &Tensor,
    y: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if x.shape == y.shape {
        Ok(Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    } else if y.numel() == 1 {
        let b = y.data[0];
        Ok(Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&a| f(a, b)).collect(),
        })
    } else if x.numel() == 1 {
        let a = x.data[0];
        Ok(Tensor {
            shape: y.shape.clone(),
            data: y.data.iter().map(|&b| f(a, b)).collect(),
        })
    } else {
        Err(shape_err(
            id,
            name,
            format!("operands {:?} and {:?} differ", x.shape, y.shape),
        ))
    }
}

fn bcast(t: &Tensor, k: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[k]
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&a, &b)| f(a, b)).collect()
}

/// Adds `g` into the gradient slot of `target`, reducing when the target was
/// broadcast as a scalar.
fn accumulate(grads: &mut [Option<Tensor>], target: NodeId, value: &Tensor, g: Vec<f64>) {
    let g = if value.numel() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    };
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: value.shape.clone(),
                data: g,
            })
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph and the leaf holding `point`, and returns the
/// scalar loss node. The result is the max over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradient<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let mut graph = Graph::new();
    let x = graph.leaf(point.clone());
    let loss = build(&mut graph, x)?;

    let mut again = Graph::new();
    let x2 = again.leaf(point.clone());
    let loss2 = build(&mut again, x2)?;
    let (l1, l2) = (graph.value(loss).item(), again.value(loss2).item());
    if l1.to_bits() != l2.to_bits() {
        return Err(AutodiffError::NonDeterministic(format!(
            "two builds at the same point gave {l1} and {l2}"
        )));
    }

    let analytic = graph
        .backward(loss)?
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    let mut feeds = HashMap::with_capacity(1);
    for k in 0..point.numel() {
        let orig = point.data[k];
        probe.data[k] = orig + step;
        feeds.insert(x, probe.clone());
        let up = graph.eval(&feeds, loss)?.item();
        probe.data[k] = orig - step;
        feeds.insert(x, probe.clone());
        let down = graph.eval(&feeds, loss)?.item();
        probe.data[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic.data[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    // leave the graph where the caller's point put it
    feeds.insert(x, point.clone());
    graph.eval(&feeds, loss)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecleaf(g: &mut Graph, v: &[f64]) -> NodeId {
        g.leaf(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn square_of_two() {
        let mut g = Graph::new();
        let x = vecleaf(&mut g, &[2.0]);
        let y = g.square(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = vecleaf(&mut g, &[1.0, 0.0, -1.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = vecleaf(&mut g, &[0.0, 0.0]);
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mean_relu_gradient() {
        let mut g = Graph::new();
        let x = vecleaf(&mut g, &[-1.0, 2.0]);
        let r = g.relu(x).unwrap();
        let m = g.mean(r).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = vecleaf(&mut g, &[1.0, 2.0]);
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = vecleaf(&mut g, &[1.0, 2.0]);
        let b = vecleaf(&mut g, &[1.0, 2.0, 3.0]);
        match g.add(a, b) {
            Err(AutodiffError::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let mut g = Graph::new();
        let a = vecleaf(&mut g, &[0.0]);
        assert!(matches!(g.log(a), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn eval_refeeds_and_detects_non_finite() {
        let mut g = Graph::new();
        let x = vecleaf(&mut g, &[1.0]);
        let y = g.log(x).unwrap();
        let mut feeds = HashMap::new();
        feeds.insert(x, Tensor::vector(vec![std::f64::consts::E]).unwrap());
        assert!((g.eval(&feeds, y).unwrap().item() - 1.0).abs() < 1e-15);
        feeds.insert(x, Tensor::vector(vec![-1.0]).unwrap());
        assert!(matches!(
            g.eval(&feeds, y),
            Err(AutodiffError::NonFinite { .. })
        ));
        feeds.insert(y, Tensor::vector(vec![1.0]).unwrap());
        assert!(matches!(g.eval(&feeds, y), Err(AutodiffError::NotALeaf(_))));
    }

    #[test]
    fn sum_gradient_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap();
        let err = check_gradient(|g, x| g.sum(x), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn two_class_cross_entropy_gradient() {
        let p = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let err = check_gradient(
            |g, x| {
                let s = g.softmax(x)?;
                let pick = g.gather(s, vec![0])?;
                let l = g.log(pick)?;
                let m = g.mean(l)?;
                g.neg(m)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::scalar(1.0);
        assert!(matches!(
            check_gradient(|g, x| g.square(x), &p, 0.1),
            Err(AutodiffError::InvalidStep(_))
        ));
    }

    #[test]
    fn detects_nondeterministic_builder() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let p = Tensor::scalar(1.0);
        let res = check_gradient(
            |g, x| {
                calls.set(calls.get() + 1.0);
                g.add_scalar(x, calls.get())
            },
            &p,
            1e-5,
        );
        assert!(matches!(res, Err(AutodiffError::NonDeterministic(_))));
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
