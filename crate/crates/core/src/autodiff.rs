//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in evaluation
//! order, so inputs always precede outputs. [`Tape::backward`] walks the tape
//! once in reverse and accumulates vector-Jacobian products. Gradients come
//! back as detached [`Tensor`]s; differentiating a gradient again is not
//! expressible.
//!
//! Elementwise binary ops accept equal shapes or a leading-dimension batch
//! broadcast (`[1, d]` against `[n, d]`); nothing fancier.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operation kinds the tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    /// Sum of every element, shape `[1, 1]`.
    Sum,
    /// Sum along the trailing axis of a matrix, shape `[n, 1]`.
    SumRows,
    Mean,
    Tanh,
    Silu,
    Sin,
    Cos,
    Abs,
    Square,
    Sqrt,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Repeats a `[1, d]` matrix to `[rows, d]`.
    Broadcast { rows: usize },
    L2NormSquared,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::MatMul => "matmul",
            OpKind::Sum => "sum",
            OpKind::SumRows => "sum-rows",
            OpKind::Mean => "mean",
            OpKind::Tanh => "tanh",
            OpKind::Silu => "silu",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::L2NormSquared => "l2-norm-squared",
        }
    }
}

#[derive(Debug)]
enum Origin {
    Leaf,
    Constant,
    Op { kind: OpKind, inputs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    origin: Origin,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, origin: Origin, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            origin,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a tensor that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Origin::Leaf, value, true)
    }

    /// Registers a tensor treated as a constant by backward.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Origin::Constant, value, false)
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTape)
        }
    }

    /// Records `kind` applied to `inputs` and returns the output variable.
    pub fn record<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let arity_ok = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => inputs.len() == 2,
            OpKind::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::shape(
                kind.name(),
                format!("wrong number of inputs: {}", inputs.len()),
            ));
        }

        // Leading-dimension broadcast for elementwise binary ops.
        let mut inputs = inputs.to_vec();
        if matches!(kind, OpKind::Add | OpKind::Sub | OpKind::Mul) {
            let (sa, sb) = (inputs[0].shape(), inputs[1].shape());
            if sa != sb {
                if sa.len() == sb.len() && sa.len() >= 2 && sa[1..] == sb[1..] {
                    if sa[0] == 1 {
                        inputs[0] = self.record(OpKind::Broadcast { rows: sb[0] }, &[inputs[0]])?;
                    } else if sb[0] == 1 {
                        inputs[1] = self.record(OpKind::Broadcast { rows: sa[0] }, &[inputs[1]])?;
                    } else {
                        return Err(Error::shape(kind.name(), format!("{sa:?} vs {sb:?}")));
                    }
                } else {
                    return Err(Error::shape(kind.name(), format!("{sa:?} vs {sb:?}")));
                }
            }
        }

        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (forward(&kind, &vals)?, requires_grad)
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Origin::Op { kind, inputs: ids }, value, requires_grad))
    }

    /// Computes d root / d node for every node that requires a gradient.
    ///
    /// The tape is not consumed; repeated calls return identical gradients.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(&root)?;
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        if root_node.requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Origin::Op { kind, inputs } = &node.origin {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                let contributions = vjp(kind, &in_vals, &node.value, &g);
                for (&input, contrib) in inputs.iter().zip(contributions) {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                                *a += c;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            // Leaves keep their gradient; intermediates drop it once propagated.
            if matches!(node.origin, Origin::Leaf) {
                grads[id] = Some(g);
            }
        }

        let shapes = nodes[..=root.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a backward pass, keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self
            .shapes
            .get(v.id)
            .cloned()
            .unwrap_or_else(|| v.shape());
        match self.grads.get(v.id).and_then(|g| g.clone()) {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id)?.clone()?;
        Some(Tensor::from_parts(self.shapes[id].clone(), g))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, kind: OpKind) -> Result<Var<'t>> {
        self.tape.record(kind, &[self])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::Add, &[self, rhs])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::Sub, &[self, rhs])
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::Mul, &[self, rhs])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(OpKind::ScalarMul(c))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::MatMul, &[self, rhs])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sum)
    }

    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.unary(OpKind::SumRows)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(OpKind::Mean)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(OpKind::Tanh)
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(OpKind::Silu)
    }

    pub fn sin(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sin)
    }

    pub fn cos(self) -> Result<Var<'t>> {
        self.unary(OpKind::Cos)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(OpKind::Abs)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(OpKind::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sqrt)
    }

    pub fn l2_norm_squared(self) -> Result<Var<'t>> {
        self.unary(OpKind::L2NormSquared)
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(OpKind::Slice { axis, start, end })
    }

    pub fn broadcast(self, rows: usize) -> Result<Var<'t>> {
        self.unary(OpKind::Broadcast { rows })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        first.tape.record(OpKind::Concat { axis }, parts)
    }

    /// Same value, recorded as a constant: no gradient flows through it.
    pub fn stop_gradient(self) -> Var<'t> {
        let value = self.value();
        self.tape.constant(value)
    }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `out[m, n] = op(a) * op(b)` where `op` optionally transposes.
///
/// Each output element accumulates over the inner dimension in a fixed order
/// that does not depend on the number of rows, so batched and per-row
/// evaluations agree bit for bit.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // Row/column strides of the logical (untransposed) operands.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the slices cover every element addressed by the given strides
    // and the output buffer is `m * n` row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map_value(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    t.map(f)
}

fn forward(kind: &OpKind, x: &[&Tensor]) -> Result<Tensor> {
    let name = kind.name();
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            match kind {
                OpKind::Add => a.zip_map(b, |p, q| p + q)?,
                OpKind::Sub => a.zip_map(b, |p, q| p - q)?,
                _ => a.zip_map(b, |p, q| p * q)?,
            }
        }
        OpKind::ScalarMul(c) => map_value(x[0], |v| v * c),
        OpKind::MatMul => {
            let (m, k) = as_matrix(name, x[0])?;
            let (k2, n) = as_matrix(name, x[1])?;
            if k != k2 {
                return Err(Error::shape(
                    name,
                    format!("inner dimensions differ: {:?} x {:?}", x[0].shape(), x[1].shape()),
                ));
            }
            Tensor::from_parts(vec![m, n], gemm(m, k, n, x[0].data(), false, x[1].data(), false))
        }
        OpKind::Sum => Tensor::scalar(x[0].data().iter().sum()),
        OpKind::L2NormSquared => Tensor::scalar(x[0].data().iter().map(|v| v * v).sum()),
        OpKind::Mean => Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len() as f64),
        OpKind::SumRows => {
            let (r, _) = as_matrix(name, x[0])?;
            let data = x[0].iter_rows().map(|row| row.iter().sum()).collect();
            Tensor::from_parts(vec![r, 1], data)
        }
        OpKind::Tanh => map_value(x[0], f64::tanh),
        OpKind::Silu => map_value(x[0], |v| v * sigmoid(v)),
        OpKind::Sin => map_value(x[0], f64::sin),
        OpKind::Cos => map_value(x[0], f64::cos),
        OpKind::Abs => map_value(x[0], f64::abs),
        OpKind::Square => map_value(x[0], |v| v * v),
        OpKind::Sqrt => map_value(x[0], f64::sqrt),
        OpKind::Concat { axis } => concat_forward(name, *axis, x)?,
        OpKind::Slice { axis, start, end } => {
            let (r, c) = as_matrix(name, x[0])?;
            let extent = if *axis == 0 { r } else { c };
            if *axis > 1 || start >= end || *end > extent {
                return Err(Error::shape(
                    name,
                    format!("range {start}..{end} on axis {axis} of {:?}", x[0].shape()),
                ));
            }
            if *axis == 0 {
                let data = x[0].data()[start * c..end * c].to_vec();
                Tensor::from_parts(vec![end - start, c], data)
            } else {
                let w = end - start;
                let mut data = Vec::with_capacity(r * w);
                for row in x[0].iter_rows() {
                    data.extend_from_slice(&row[*start..*end]);
                }
                Tensor::from_parts(vec![r, w], data)
            }
        }
        OpKind::Broadcast { rows } => {
            let s = x[0].shape();
            if s.len() < 2 || s[0] != 1 || *rows == 0 {
                return Err(Error::shape(name, format!("cannot broadcast {s:?} to {rows} rows")));
            }
            let mut shape = s.to_vec();
            shape[0] = *rows;
            Tensor::from_parts(shape, x[0].data().repeat(*rows))
        }
    };
    Ok(out)
}

fn concat_forward(name: &'static str, axis: usize, x: &[&Tensor]) -> Result<Tensor> {
    let dims: Vec<(usize, usize)> = x.iter().map(|t| as_matrix(name, t)).collect::<Result<_>>()?;
    match axis {
        0 => {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape(name, format!("column counts differ: {dims:?}")));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c);
            for t in x {
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::from_parts(vec![rows, c], data))
        }
        1 => {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape(name, format!("row counts differ: {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for t in x {
                    data.extend_from_slice(t.row(i));
                }
            }
            Ok(Tensor::from_parts(vec![r, cols], data))
        }
        _ => Err(Error::shape(name, format!("axis {axis} out of range"))),
    }
}

/// Vector-Jacobian products of one node with respect to each of its inputs.
fn vjp(kind: &OpKind, x: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
    let ew = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        t.data().iter().zip(g).map(|(&v, &gi)| f(v, gi)).collect()
    };
    match kind {
        OpKind::Add => vec![g.to_vec(), g.to_vec()],
        OpKind::Sub => vec![g.to_vec(), g.iter().map(|v| -v).collect()],
        OpKind::Mul => vec![ew(x[1], &|b, gi| b * gi), ew(x[0], &|a, gi| a * gi)],
        OpKind::ScalarMul(c) => vec![g.iter().map(|v| v * c).collect()],
        OpKind::MatMul => {
            let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
            let n = x[1].shape()[1];
            let da = gemm(m, n, k, g, false, x[1].data(), true);
            let db = gemm(k, m, n, x[0].data(), true, g, false);
            vec![da, db]
        }
        OpKind::Sum => vec![vec![g[0]; x[0].len()]],
        OpKind::Mean => vec![vec![g[0] / x[0].len() as f64; x[0].len()]],
        OpKind::L2NormSquared => vec![x[0].data().iter().map(|v| 2.0 * v * g[0]).collect()],
        OpKind::SumRows => {
            let c = x[0].cols();
            vec![g.iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect()]
        }
        OpKind::Tanh => vec![ew(out, &|y, gi| gi * (1.0 - y * y))],
        OpKind::Silu => vec![ew(x[0], &|v, gi| {
            let s = sigmoid(v);
            gi * s * (1.0 + v * (1.0 - s))
        })],
        OpKind::Sin => vec![ew(x[0], &|v, gi| gi * v.cos())],
        OpKind::Cos => vec![ew(x[0], &|v, gi| -gi * v.sin())],
        OpKind::Abs => vec![ew(x[0], &|v, gi| {
            if v > 0.0 {
                gi
            } else if v < 0.0 {
                -gi
            } else {
                0.0
            }
        })],
        OpKind::Square => vec![ew(x[0], &|v, gi| 2.0 * v * gi)],
        OpKind::Sqrt => vec![ew(out, &|y, gi| gi / (2.0 * y))],
        OpKind::Concat { axis } => {
            let total_cols = out.cols();
            let mut parts = Vec::with_capacity(x.len());
            if *axis == 0 {
                let mut offset = 0;
                for t in x {
                    parts.push(g[offset..offset + t.len()].to_vec());
                    offset += t.len();
                }
            } else {
                let mut col = 0;
                for t in x {
                    let w = t.cols();
                    let mut part = Vec::with_capacity(t.len());
                    for row in g.chunks(total_cols) {
                        part.extend_from_slice(&row[col..col + w]);
                    }
                    parts.push(part);
                    col += w;
                }
            }
            parts
        }
        OpKind::Slice { axis, start, end } => {
            let c = x[0].cols();
            let mut full = vec![0.0; x[0].len()];
            if *axis == 0 {
                full[start * c..end * c].copy_from_slice(g);
            } else {
                let w = end - start;
                for (i, row) in g.chunks(w).enumerate() {
                    full[i * c + start..i * c + end].copy_from_slice(row);
                }
            }
            vec![full]
        }
        OpKind::Broadcast { .. } => {
            let c = x[0].len();
            let mut acc = vec![0.0; c];
            for row in g.chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            vec![acc]
        }
    }
}
