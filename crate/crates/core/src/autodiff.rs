//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, so node ids are already in topological order. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients additively over
//! fan-out. Graphs are cheap and meant to be rebuilt for every step.
//!
//! Subgradient conventions: `abs'(0) = 0`, `relu'(0) = 0`, ELU uses alpha = 1.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1, c]` repeated over rows.
    Row,
    /// `[r, 1]` repeated over columns.
    Col,
    /// `[1, 1]`.
    Scalar,
}

/// The elementwise/structural operation kinds exposed through [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Abs,
    Elu,
    Relu,
    Tanh,
    Sigmoid,
    Sum,
    Mean,
    ConcatCols,
    ConcatRows,
    Transpose,
    SoftmaxRows,
    Log,
    Exp,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId, Bcast),
    Sub(NodeId, NodeId, Bcast),
    Mul(NodeId, NodeId, Bcast),
    MatMul(NodeId, NodeId),
    Abs(NodeId),
    Elu(NodeId),
    EluDeriv(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GatherCols(NodeId, Vec<usize>),
    Gather(NodeId, Vec<usize>),
    RowVecMat(NodeId, NodeId),
    RowMatVec(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A single-threaded tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
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

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Node registered for parameter `name`, if any.
    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A learnable leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf, value.clone(), true);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Dispatches one of the listed [`OpKind`]s over `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let unary = |inputs: &[NodeId]| -> Result<NodeId> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(Error::InvalidArgument(format!(
                    "{kind:?} takes one input, got {}",
                    inputs.len()
                ))),
            }
        };
        let binary = |inputs: &[NodeId]| -> Result<(NodeId, NodeId)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::InvalidArgument(format!(
                    "{kind:?} takes two inputs, got {}",
                    inputs.len()
                ))),
            }
        };
        match kind {
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            OpKind::Sub => {
                let (a, b) = binary(inputs)?;
                self.sub(a, b)
            }
            OpKind::Mul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Abs => Ok(self.abs(unary(inputs)?)),
            OpKind::Elu => Ok(self.elu(unary(inputs)?)),
            OpKind::Relu => Ok(self.relu(unary(inputs)?)),
            OpKind::Tanh => Ok(self.tanh(unary(inputs)?)),
            OpKind::Sigmoid => Ok(self.sigmoid(unary(inputs)?)),
            OpKind::Sum => Ok(self.sum(unary(inputs)?)),
            OpKind::Mean => Ok(self.mean(unary(inputs)?)),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::Transpose => Ok(self.transpose(unary(inputs)?)),
            OpKind::SoftmaxRows => Ok(self.softmax_rows(unary(inputs)?)),
            OpKind::Log => Ok(self.log(unary(inputs)?)),
            OpKind::Exp => Ok(self.exp(unary(inputs)?)),
            OpKind::Square => Ok(self.square(unary(inputs)?)),
        }
    }

    fn bcast(&self, a: NodeId, b: NodeId, what: &str) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == Shape::SCALAR {
            Ok(Bcast::Scalar)
        } else if sb.rows == 1 && sb.cols == sa.cols {
            Ok(Bcast::Row)
        } else if sb.cols == 1 && sb.rows == sa.rows {
            Ok(Bcast::Col)
        } else {
            Err(Error::Shape(format!("{what} of {sa} and {sb}")))
        }
    }

    fn elementwise(&self, a: NodeId, b: NodeId, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match mode {
                    Bcast::Same => vb.data()[i],
                    Bcast::Row => vb.data()[i % cols],
                    Bcast::Col => vb.data()[i / cols],
                    Bcast::Scalar => vb.data()[0],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(va.shape(), data).expect("elementwise shape")
    }

    /// `a + b`; `b` may be a same-shape tensor, a row, a column, or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.bcast(a, b, "add")?;
        let v = self.elementwise(a, b, mode, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b, mode), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.bcast(a, b, "sub")?;
        let v = self.elementwise(a, b, mode, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b, mode), v, ng))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.bcast(a, b, "mul")?;
        let v = self.elementwise(a, b, mode, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b, mode), v, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(op, v, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Elu(a), tensor::elu)
    }

    /// Elementwise ELU derivative, itself differentiable once.
    pub fn elu_deriv(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::EluDeriv(a), tensor::elu_deriv)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), tensor::sigmoid)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.shape().len() as f64);
        let ng = self.ng(a);
        self.push(Op::Mean(a), v, ng)
    }

    /// Per-row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let v = Tensor::column(&sums);
        let ng = self.ng(a);
        self.push(Op::SumCols(a), v, ng)
    }

    /// Per-row sums taken in ascending value order, so the result does not
    /// depend on the column order. Same gradient as [`Graph::sum_cols`].
    pub fn sum_cols_ordered(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows())
            .map(|r| {
                let mut row = t.row_slice(r).to_vec();
                row.sort_by(f64::total_cmp);
                row.iter().sum()
            })
            .collect();
        let v = Tensor::column(&sums);
        let ng = self.ng(a);
        self.push(Op::SumCols(a), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rows = self.shape(*first).rows;
        for &p in parts {
            if self.shape(p).rows != rows {
                return Err(Error::Shape(format!(
                    "concat_cols of {} and {}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor::new(Shape::new(rows, cols), data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let cols = self.shape(*first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).cols != cols {
                return Err(Error::Shape(format!(
                    "concat_rows of {} and {}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
            rows += self.shape(p).rows;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(Shape::new(rows, cols), data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, ng))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start > end || end > s.cols {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {s}")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(s.rows * (end - start));
        for r in 0..s.rows {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let v = Tensor::new(Shape::new(s.rows, end - start), data)?;
        let ng = self.ng(a);
        Ok(self.push(Op::SliceCols(a, start), v, ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start > end || end > s.rows {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {s}")));
        }
        let data = self.value(a).data()[start * s.cols..end * s.cols].to_vec();
        let v = Tensor::new(Shape::new(end - start, s.cols), data)?;
        let ng = self.ng(a);
        Ok(self.push(Op::SliceRows(a, start), v, ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(Op::Transpose(a), v, ng)
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(Op::Reshape(a), v, ng))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = tensor::softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = tensor::log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(Op::LogSoftmaxRows(a), v, ng)
    }

    /// Picks column `index[r]` from each row `r`: `[r, c] -> [r, 1]`.
    pub fn gather_cols(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if index.len() != s.rows {
            return Err(Error::Shape(format!(
                "gather of {} indices from {s}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s.cols) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {s}"
            )));
        }
        let t = self.value(a);
        let picked: Vec<f64> = index.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let v = Tensor::column(&picked);
        let ng = self.ng(a);
        Ok(self.push(Op::GatherCols(a, index.to_vec()), v, ng))
    }

    /// `out.data[i] = a.data[index[i]]` under `shape`; an arbitrary
    /// re-indexing of the flat storage.
    pub fn gather(&mut self, a: NodeId, shape: Shape, index: &[usize]) -> Result<NodeId> {
        let n = self.shape(a).len();
        if index.len() != shape.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::Shape(format!(
                "gather of {} indices into {shape} from {}",
                index.len(),
                self.shape(a)
            )));
        }
        let src = self.value(a).data();
        let v = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        let ng = self.ng(a);
        Ok(self.push(Op::Gather(a, index.to_vec()), v, ng))
    }

    /// Row-wise vector-matrix product: `q [r, k]` times per-row matrices
    /// `w [r, k*m]` (row-major `k x m`) gives `[r, m]`.
    pub fn row_vecmat(&mut self, q: NodeId, w: NodeId) -> Result<NodeId> {
        let (sq, sw) = (self.shape(q), self.shape(w));
        if sq.rows != sw.rows || sq.cols == 0 || sw.cols % sq.cols != 0 {
            return Err(Error::Shape(format!("row_vecmat of {sq} and {sw}")));
        }
        let k = sq.cols;
        let m = sw.cols / k;
        let (tq, tw) = (self.value(q), self.value(w));
        let mut out = Tensor::zeros(sq.rows, m);
        for r in 0..sq.rows {
            let qr = tq.row_slice(r);
            let wr = tw.row_slice(r);
            let or = &mut out.data_mut()[r * m..(r + 1) * m];
            for (kk, &qv) in qr.iter().enumerate() {
                for (o, &wv) in or.iter_mut().zip(&wr[kk * m..(kk + 1) * m]) {
                    *o += qv * wv;
                }
            }
        }
        let ng = self.ng(q) || self.ng(w);
        Ok(self.push(Op::RowVecMat(q, w), out, ng))
    }

    /// Row-wise matrix-vector product: per-row matrices `w [r, k*m]`
    /// (row-major `k x m`) times `v [r, m]` gives `[r, k]`.
    pub fn row_matvec(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let (sw, sv) = (self.shape(w), self.shape(v));
        if sw.rows != sv.rows || sv.cols == 0 || sw.cols % sv.cols != 0 {
            return Err(Error::Shape(format!("row_matvec of {sw} and {sv}")));
        }
        let m = sv.cols;
        let k = sw.cols / m;
        let (tw, tv) = (self.value(w), self.value(v));
        let mut out = Tensor::zeros(sw.rows, k);
        for r in 0..sw.rows {
            let wr = tw.row_slice(r);
            let vr = tv.row_slice(r);
            for kk in 0..k {
                let dot: f64 = wr[kk * m..(kk + 1) * m]
                    .iter()
                    .zip(vr)
                    .map(|(a, b)| a * b)
                    .sum();
                out.set(r, kk, dot);
            }
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(Op::RowMatVec(w, v), out, ng))
    }

    /// Gradient of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not reach get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward_all(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(name, &id)| {
                let g = grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(id).rows, self.shape(id).cols));
                (name.clone(), g)
            })
            .collect())
    }

    /// Gradient of `loss` with respect to an arbitrary node.
    pub fn grad_of(&self, loss: NodeId, node: NodeId) -> Result<Tensor> {
        let grads = self.backward_all(loss)?;
        let s = self.shape(node);
        Ok(grads[node.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(s.rows, s.cols)))
    }

    fn backward_all(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.shape(loss) != Shape::SCALAR {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |id: NodeId, delta: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, mode) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    acc(*b, reduce_bcast(g, *mode));
                }
            }
            Op::Sub(a, b, mode) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    acc(*b, reduce_bcast(g, *mode).scale(-1.0));
                }
            }
            Op::Mul(a, b, mode) => {
                if self.ng(*a) {
                    let d = self.elementwise_grad(g, *b, *mode);
                    acc(*a, d);
                }
                if self.ng(*b) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(*b, reduce_bcast(&prod, *mode));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut d = Tensor::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, true, &mut d, 0.0);
                    acc(*a, d);
                }
                if self.ng(*b) {
                    let mut d = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(va, true, g, false, &mut d, 0.0);
                    acc(*b, d);
                }
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                acc(*a, d);
            }
            Op::Elu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * tensor::elu_deriv(x));
                acc(*a, d);
            }
            Op::EluDeriv(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { 0.0 } else { gv * x.exp() });
                acc(*a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                acc(*a, d);
            }
            Op::Tanh(a) => acc(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, y| gv * y)),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)),
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Sum(a) => {
                let s = self.shape(*a);
                acc(*a, Tensor::full(s.rows, s.cols, g.item()));
            }
            Op::Mean(a) => {
                let s = self.shape(*a);
                acc(*a, Tensor::full(s.rows, s.cols, g.item() / s.len() as f64));
            }
            Op::SumCols(a) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    let gv = g.data()[r];
                    d.data_mut()[r * s.cols..(r + 1) * s.cols].fill(gv);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(s.len());
                        for r in 0..s.rows {
                            d.extend_from_slice(&g.row_slice(r)[offset..offset + s.cols]);
                        }
                        acc(p, Tensor::new(s, d).expect("concat grad"));
                    }
                    offset += s.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if self.ng(p) {
                        let d = g.data()[offset..offset + s.len()].to_vec();
                        acc(p, Tensor::new(s, d).expect("concat grad"));
                    }
                    offset += s.len();
                }
            }
            Op::SliceCols(a, start) => {
                let s = self.shape(*a);
                let w = g.cols();
                let mut d = Tensor::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    d.data_mut()[r * s.cols + start..r * s.cols + start + w]
                        .copy_from_slice(g.row_slice(r));
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                d.data_mut()[start * s.cols..start * s.cols + g.shape().len()]
                    .copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let s = self.shape(*a);
                acc(*a, g.clone().reshape(s).expect("reshape grad"));
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut d = g.clone();
                for (r, row) in d.data_mut().chunks_mut(cols).enumerate() {
                    let y = out.row_slice(r);
                    let dot: f64 = row.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for (dv, yv) in row.iter_mut().zip(y) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let cols = out.cols();
                let mut d = g.clone();
                for (r, row) in d.data_mut().chunks_mut(cols).enumerate() {
                    let total: f64 = row.iter().sum();
                    for (dv, lv) in row.iter_mut().zip(out.row_slice(r)) {
                        *dv -= lv.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::GatherCols(a, index) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                for (r, &c) in index.iter().enumerate() {
                    d.set(r, c, g.data()[r]);
                }
                acc(*a, d);
            }
            Op::Gather(a, index) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.rows, s.cols);
                for (&i, &gv) in index.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                acc(*a, d);
            }
            Op::RowVecMat(q, w) => {
                let (tq, tw) = (self.value(*q), self.value(*w));
                let (k, m) = (tq.cols(), g.cols());
                if self.ng(*q) {
                    let mut d = Tensor::zeros(tq.rows(), k);
                    for r in 0..tq.rows() {
                        let wr = tw.row_slice(r);
                        let gr = g.row_slice(r);
                        for kk in 0..k {
                            let dot: f64 = wr[kk * m..(kk + 1) * m]
                                .iter()
                                .zip(gr)
                                .map(|(a, b)| a * b)
                                .sum();
                            d.set(r, kk, dot);
                        }
                    }
                    acc(*q, d);
                }
                if self.ng(*w) {
                    let mut d = Tensor::zeros(tw.rows(), tw.cols());
                    for r in 0..tq.rows() {
                        let qr = tq.row_slice(r);
                        let gr = g.row_slice(r);
                        let dr = &mut d.data_mut()[r * k * m..(r + 1) * k * m];
                        for (kk, &qv) in qr.iter().enumerate() {
                            for (dv, &gv) in dr[kk * m..(kk + 1) * m].iter_mut().zip(gr) {
                                *dv = qv * gv;
                            }
                        }
                    }
                    acc(*w, d);
                }
            }
            Op::RowMatVec(w, v) => {
                let (tw, tv) = (self.value(*w), self.value(*v));
                let (k, m) = (g.cols(), tv.cols());
                if self.ng(*w) {
                    let mut d = Tensor::zeros(tw.rows(), tw.cols());
                    for r in 0..tw.rows() {
                        let vr = tv.row_slice(r);
                        let gr = g.row_slice(r);
                        let dr = &mut d.data_mut()[r * k * m..(r + 1) * k * m];
                        for (kk, &gv) in gr.iter().enumerate() {
                            for (dv, &vv) in dr[kk * m..(kk + 1) * m].iter_mut().zip(vr) {
                                *dv = gv * vv;
                            }
                        }
                    }
                    acc(*w, d);
                }
                if self.ng(*v) {
                    let mut d = Tensor::zeros(tv.rows(), m);
                    for r in 0..tw.rows() {
                        let wr = tw.row_slice(r);
                        let gr = g.row_slice(r);
                        let dr = &mut d.data_mut()[r * m..(r + 1) * m];
                        for (kk, &gv) in gr.iter().enumerate() {
                            for (dv, &wv) in dr.iter_mut().zip(&wr[kk * m..(kk + 1) * m]) {
                                *dv += gv * wv;
                            }
                        }
                    }
                    acc(*v, d);
                }
            }
        }
    }

    /// `g * b`, broadcasting `b` back to `g`'s shape.
    fn elementwise_grad(&self, g: &Tensor, b: NodeId, mode: Bcast) -> Tensor {
        let vb = self.value(b);
        let cols = g.cols();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| {
                gv * match mode {
                    Bcast::Same => vb.data()[i],
                    Bcast::Row => vb.data()[i % cols],
                    Bcast::Col => vb.data()[i / cols],
                    Bcast::Scalar => vb.data()[0],
                }
            })
            .collect();
        Tensor::new(g.shape(), data).expect("grad shape")
    }
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_bcast(g: &Tensor, mode: Bcast) -> Tensor {
    match mode {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.sum()),
        Bcast::Row => {
            let mut out = vec![0.0; g.cols()];
            for r in 0..g.rows() {
                for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::row(&out)
        }
        Bcast::Col => {
            let sums: Vec<f64> = (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
            Tensor::column(&sums)
        }
    }
}

/// Compares [`Graph::backward`] against central finite differences.
///
/// `f` builds a scalar loss from the leaf it is handed. Returns the largest
/// coordinate-wise error `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<F>(f: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.param("x", x0);
    let loss = f(&mut g, x)?;
    let analytic = g.grad_of(loss, x)?;

    let eval = |xv: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param("x", xv);
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x0.clone();
    for i in 0..x0.shape().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, name: &str, rows: &[&[f64]]) -> NodeId {
        g.param(name, &Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let v = g.constant(Tensor::column(&[3.0, 4.0]));
        let m = g.apply(OpKind::MatMul, &[i, v]).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 4.0]);

        let x = g.constant(Tensor::row(&[-2.0, 0.0, 5.0]));
        let a = g.apply(OpKind::Abs, &[x]).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 0.0, 5.0]);

        let z = g.constant(Tensor::zeros(1, 3));
        let s = g.apply(OpKind::SoftmaxRows, &[z]).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected_with_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(4, 5));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let msg = g.apply(OpKind::MatMul, &[a, a]).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] by [2, 3]"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(3.0));
        let l = g.square(x);
        assert_eq!(g.backward(l).unwrap()["x"].item(), 6.0);
    }

    #[test]
    fn abs_gradient_is_sign_with_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::row(&[-1.0, 2.0, 0.0]));
        let a = g.abs(x);
        let l = g.sum(a);
        assert_eq!(g.backward(l).unwrap()["x"].data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::row(&[0.0, 1.0]));
        let a = g.relu(x);
        let l = g.sum(a);
        assert_eq!(g.backward(l).unwrap()["x"].data(), &[0.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::scalar(0.7));
        let x = g.constant(Tensor::scalar(1.0));
        let y = g.constant(Tensor::scalar(2.0));
        let wx = g.mul(w, x).unwrap();
        let wy = g.mul(w, y).unwrap();
        let l = g.add(wx, wy).unwrap();
        assert_eq!(g.backward(l).unwrap()["w"].item(), 3.0);
    }

    #[test]
    fn duplicated_subexpression_doubles_gradient() {
        let build = |twice: bool| {
            let mut g = Graph::new();
            let w = leaf(&mut g, "w", &[&[0.3, -1.2], &[2.0, 0.1]]);
            let t = g.tanh(w);
            let mut l = g.sum(t);
            if twice {
                let t2 = g.tanh(w);
                let s2 = g.sum(t2);
                l = g.add(l, s2).unwrap();
            }
            g.backward(l).unwrap().remove("w").unwrap()
        };
        let once = build(false);
        let twice = build(true);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(1.0));
        g.param("unused", &Tensor::zeros(2, 2));
        let l = g.square(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["unused"], Tensor::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::zeros(2, 1));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn cube_grad_check() {
        let err = grad_check(
            |g, x| {
                let sq = g.square(x);
                let cube = g.mul(sq, x)?;
                Ok(g.sum(cube))
            },
            &Tensor::scalar(2.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[3.0, 3.0, 0.0]]).unwrap());
        let a = g.log_softmax_rows(x);
        let s = g.softmax_rows(x);
        let b = g.log(s);
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-14);
    }
}
