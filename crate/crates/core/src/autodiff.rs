//! Tape-based reverse-mode automatic differentiation over batched matrices.
//!
//! A [`Tape`] records every primitive applied to at least one tracked input.
//! [`Var`] handles carry their forward value, so untracked computations
//! (constants, evaluation-mode rollouts on a tape with gradients disabled)
//! leave nothing behind on the tape.
//!
//! All primitives operate on 2-D tensors. Elementwise binary primitives
//! broadcast along any axis of length one, e.g. `(n, m) + (1, m)` or
//! `(n, m) * (n, 1)`.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Primitive operations understood by [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive<T> {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Square,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Neg,
    /// Multiply by a constant.
    Scale(T),
    /// Add a constant.
    Shift(T),
    /// Mean of all entries, giving a `1x1` result.
    Mean,
    /// Row-wise sum: `(n, m) -> (n, 1)`.
    SumCols,
    /// Concatenation along columns of any number of inputs with equal rows.
    Concat,
    /// Row-wise matrix-vector product: `s (n, p*q)` holds one row-major
    /// `p x q` matrix per row, `w (n, q)`, result `(n, p)`.
    BatchedMatVec,
    /// Training-mode batch normalization of `x (n, f)` with `gamma, beta (1, f)`.
    BatchNorm { eps: T },
}

impl<T> Primitive<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Relu => "relu",
            Primitive::Square => "square",
            Primitive::Exp => "exp",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Sqrt => "sqrt",
            Primitive::Neg => "neg",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::Mean => "mean",
            Primitive::SumCols => "sum_cols",
            Primitive::Concat => "concat",
            Primitive::BatchedMatVec => "batched_matvec",
            Primitive::BatchNorm { .. } => "batch_norm",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::BatchedMatVec => Some(2),
            Primitive::BatchNorm { .. } => Some(3),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryOp<T> {
    Relu,
    Square,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Neg,
    Scale(T),
    Shift(T),
}

/// Handle to a value computed on a tape.
#[derive(Clone, Debug)]
pub struct Var<T> {
    tape: u64,
    node: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    /// Whether gradients can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> Result<T> {
        self.value.item()
    }
}

#[derive(Clone, Debug)]
struct Input<T> {
    node: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T> From<&Var<T>> for Input<T> {
    fn from(v: &Var<T>) -> Self {
        Input {
            node: v.node,
            value: Rc::clone(&v.value),
        }
    }
}

#[derive(Debug)]
enum NodeKind<T> {
    Leaf,
    MatMul {
        a: Input<T>,
        b: Input<T>,
    },
    Binary {
        op: BinaryOp,
        a: Input<T>,
        b: Input<T>,
        out: Rc<Tensor<T>>,
    },
    Unary {
        op: UnaryOp<T>,
        a: usize,
        input: Rc<Tensor<T>>,
        out: Rc<Tensor<T>>,
    },
    Mean {
        a: usize,
        shape: Vec<usize>,
    },
    SumCols {
        a: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
    },
    BatchedMatVec {
        s: Input<T>,
        w: Input<T>,
    },
    BatchNorm {
        x: Option<usize>,
        gamma: Input<T>,
        beta: Option<usize>,
        xhat: Rc<Tensor<T>>,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    kind: NodeKind<T>,
}

/// Per-feature statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

/// Records primitives for reverse-mode differentiation.
///
/// A tape is single-threaded; independent computations use independent tapes.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    id: u64,
    grad_enabled: bool,
    checked: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape in checked mode (non-finite results raise errors).
    pub fn new() -> Self {
        Self::with_options(true, true)
    }

    /// A tape that never records: parameters behave like constants.
    pub fn no_grad() -> Self {
        Self::with_options(false, true)
    }

    pub fn with_options(grad_enabled: bool, checked: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            checked,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf. On a no-grad tape this is a constant.
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        let node = if self.grad_enabled {
            Some(self.push(value.shape().to_vec(), NodeKind::Leaf))
        } else {
            None
        };
        Var {
            tape: self.id,
            node,
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            tape: self.id,
            node: None,
            value: Rc::new(value),
        }
    }

    pub fn scalar(&self, value: T) -> Var<T> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, shape: Vec<usize>, kind: NodeKind<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, kind });
        nodes.len() - 1
    }

    fn own(&self, v: &Var<T>) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::ForeignVariable);
        }
        Ok(())
    }

    fn finish(&self, op: &'static str, value: Tensor<T>, kind: Option<NodeKind<T>>) -> Result<Var<T>> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("primitive `{op}`"),
            });
        }
        let node = kind.map(|k| self.push(value.shape().to_vec(), k));
        Ok(Var {
            tape: self.id,
            node,
            value: Rc::new(value),
        })
    }

    /// Applies `op` to `inputs`, returning the forward value and recording a
    /// node when any input is tracked.
    pub fn record(&self, op: Primitive<T>, inputs: &[&Var<T>]) -> Result<Var<T>> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::Unsupported(format!(
                    "`{}` takes {} inputs, got {}",
                    op.name(),
                    n,
                    inputs.len()
                )));
            }
        }
        for v in inputs {
            self.own(v)?;
            if !v.value.is_matrix() {
                return Err(Error::shape(op.name(), format!("inputs must be 2-D, got {:?}", v.shape())));
            }
        }
        match op {
            Primitive::MatMul => self.matmul_impl(inputs[0], inputs[1]),
            Primitive::Add => self.binary(BinaryOp::Add, inputs[0], inputs[1]),
            Primitive::Sub => self.binary(BinaryOp::Sub, inputs[0], inputs[1]),
            Primitive::Mul => self.binary(BinaryOp::Mul, inputs[0], inputs[1]),
            Primitive::Div => self.binary(BinaryOp::Div, inputs[0], inputs[1]),
            Primitive::Relu => self.unary(UnaryOp::Relu, inputs[0]),
            Primitive::Square => self.unary(UnaryOp::Square, inputs[0]),
            Primitive::Exp => self.unary(UnaryOp::Exp, inputs[0]),
            Primitive::Sin => self.unary(UnaryOp::Sin, inputs[0]),
            Primitive::Cos => self.unary(UnaryOp::Cos, inputs[0]),
            Primitive::Sqrt => self.unary(UnaryOp::Sqrt, inputs[0]),
            Primitive::Neg => self.unary(UnaryOp::Neg, inputs[0]),
            Primitive::Scale(c) => self.unary(UnaryOp::Scale(c), inputs[0]),
            Primitive::Shift(c) => self.unary(UnaryOp::Shift(c), inputs[0]),
            Primitive::Mean => self.mean_impl(inputs[0]),
            Primitive::SumCols => self.sum_cols_impl(inputs[0]),
            Primitive::Concat => self.concat_impl(inputs),
            Primitive::BatchedMatVec => self.batched_matvec_impl(inputs[0], inputs[1]),
            Primitive::BatchNorm { eps } => {
                self.batch_norm_impl(inputs[0], inputs[1], inputs[2], eps).map(|(v, _)| v)
            }
        }
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Div, &[a, b])
    }

    pub fn relu(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Relu, &[a])
    }

    pub fn square(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Square, &[a])
    }

    pub fn exp(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Exp, &[a])
    }

    pub fn sin(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Sin, &[a])
    }

    pub fn cos(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Cos, &[a])
    }

    pub fn sqrt(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Sqrt, &[a])
    }

    pub fn neg(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Neg, &[a])
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        self.record(Primitive::Scale(c), &[a])
    }

    pub fn shift(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        self.record(Primitive::Shift(c), &[a])
    }

    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::Mean, &[a])
    }

    pub fn sum_cols(&self, a: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::SumCols, &[a])
    }

    pub fn concat_cols(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        self.record(Primitive::Concat, parts)
    }

    pub fn batched_matvec(&self, s: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        self.record(Primitive::BatchedMatVec, &[s, w])
    }

    /// Training-mode batch normalization, also returning the batch statistics
    /// so the caller can update running estimates.
    pub fn batch_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: T,
    ) -> Result<(Var<T>, BatchStats<T>)> {
        for v in [x, gamma, beta] {
            self.own(v)?;
        }
        self.batch_norm_impl(x, gamma, beta, eps)
    }

    fn tracked(&self, inputs: &[&Var<T>]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| v.node.is_some())
    }

    fn matmul_impl(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.matmul(&b.value)?;
        let kind = self.tracked(&[a, b]).then(|| NodeKind::MatMul {
            a: a.into(),
            b: b.into(),
        });
        self.finish("matmul", out, kind)
    }

    fn binary(&self, op: BinaryOp, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (ra, ca) = (a.rows(), a.cols());
        let (rb, cb) = (b.rows(), b.cols());
        let rows = broadcast_dim(ra, rb).ok_or_else(|| shape_err(op, a, b))?;
        let cols = broadcast_dim(ca, cb).ok_or_else(|| shape_err(op, a, b))?;
        let (ad, bd) = (a.value.data(), b.value.data());
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data: Vec<T> = if ra == rb && ca == cb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let (iar, ibr) = (if ra == 1 { 0 } else { r }, if rb == 1 { 0 } else { r });
                for c in 0..cols {
                    let x = ad[iar * ca + if ca == 1 { 0 } else { c }];
                    let y = bd[ibr * cb + if cb == 1 { 0 } else { c }];
                    data.push(f(x, y));
                }
            }
            data
        };
        let out = Rc::new(Tensor::matrix(rows, cols, data)?);
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        if self.checked && !out.all_finite() {
            return Err(Error::NonFinite {
                context: format!("primitive `{name}`"),
            });
        }
        let node = self.tracked(&[a, b]).then(|| {
            self.push(
                out.shape().to_vec(),
                NodeKind::Binary {
                    op,
                    a: a.into(),
                    b: b.into(),
                    out: Rc::clone(&out),
                },
            )
        });
        Ok(Var {
            tape: self.id,
            node,
            value: out,
        })
    }

    fn unary(&self, op: UnaryOp<T>, a: &Var<T>) -> Result<Var<T>> {
        let f = |x: T| match op {
            UnaryOp::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            UnaryOp::Square => x * x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Neg => -x,
            UnaryOp::Scale(c) => x * c,
            UnaryOp::Shift(c) => x + c,
        };
        let out = Rc::new(a.value.map(f));
        let name = match op {
            UnaryOp::Relu => "relu",
            UnaryOp::Square => "square",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Neg => "neg",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Shift(_) => "shift",
        };
        if self.checked && !out.all_finite() {
            return Err(Error::NonFinite {
                context: format!("primitive `{name}`"),
            });
        }
        let node = match (self.grad_enabled, a.node) {
            (true, Some(id)) => Some(self.push(
                out.shape().to_vec(),
                NodeKind::Unary {
                    op,
                    a: id,
                    input: Rc::clone(&a.value),
                    out: Rc::clone(&out),
                },
            )),
            _ => None,
        };
        Ok(Var {
            tape: self.id,
            node,
            value: out,
        })
    }

    fn mean_impl(&self, a: &Var<T>) -> Result<Var<T>> {
        if a.value.numel() == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let out = Tensor::scalar(a.value.mean());
        let kind = match (self.grad_enabled, a.node) {
            (true, Some(id)) => Some(NodeKind::Mean {
                a: id,
                shape: a.shape().to_vec(),
            }),
            _ => None,
        };
        self.finish("mean", out, kind)
    }

    fn sum_cols_impl(&self, a: &Var<T>) -> Result<Var<T>> {
        let (rows, cols) = (a.rows(), a.cols());
        let out = Tensor::column((0..rows).map(|r| a.value.row_slice(r).iter().copied().sum()).collect());
        let kind = match (self.grad_enabled, a.node) {
            (true, Some(id)) => Some(NodeKind::SumCols { a: id, cols }),
            _ => None,
        };
        self.finish("sum_cols", out, kind)
    }

    fn concat_impl(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Unsupported("`concat` needs at least one input".into()))?;
        let rows = first.rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::shape(
                "concat",
                format!(
                    "row counts differ: {:?}",
                    parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value.row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let kind = self.tracked(parts).then(|| NodeKind::Concat {
            parts: parts.iter().map(|p| (p.node, p.cols())).collect(),
        });
        self.finish("concat", out, kind)
    }

    fn batched_matvec_impl(&self, s: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let (n, q) = (w.rows(), w.cols());
        if s.rows() != n || q == 0 || s.cols() % q != 0 {
            return Err(Error::shape(
                "batched_matvec",
                format!("{:?} applied to {:?}", s.shape(), w.shape()),
            ));
        }
        let p = s.cols() / q;
        let out = Tensor::from_fn(n, p, |b, i| {
            let srow = &s.value.row_slice(b)[i * q..(i + 1) * q];
            srow.iter().zip(w.value.row_slice(b)).map(|(&x, &y)| x * y).sum()
        });
        let kind = self.tracked(&[s, w]).then(|| NodeKind::BatchedMatVec {
            s: s.into(),
            w: w.into(),
        });
        self.finish("batched_matvec", out, kind)
    }

    fn batch_norm_impl(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: T,
    ) -> Result<(Var<T>, BatchStats<T>)> {
        let (n, f) = (x.rows(), x.cols());
        if gamma.shape() != [1, f] || beta.shape() != [1, f] {
            return Err(Error::shape(
                "batch_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
            ));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch normalization in training mode needs at least 2 rows, got {n}"
            )));
        }
        let nf = T::lit(n as f64);
        let xd = x.value.data();
        let mut mean = vec![T::zero(); f];
        for r in 0..n {
            for c in 0..f {
                mean[c] += xd[r * f + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); f];
        for r in 0..n {
            for c in 0..f {
                let d = xd[r * f + c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(n, f, |r, c| (xd[r * f + c] - mean[c]) * inv_std[c]);
        let (g, b) = (gamma.value.data(), beta.value.data());
        let out = Tensor::from_fn(n, f, |r, c| g[c] * xhat.at(r, c) + b[c]);
        let kind = self.tracked(&[x, gamma, beta]).then(|| NodeKind::BatchNorm {
            x: x.node,
            gamma: gamma.into(),
            beta: beta.node,
            xhat: Rc::new(xhat),
            inv_std,
        });
        let v = self.finish("batch_norm", out, kind)?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Gradients of the scalar `root` with respect to every leaf of the tape.
    ///
    /// Contributions are accumulated in reverse tape order, so repeated calls
    /// on identical computations give bit-identical results.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        self.own(root)?;
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, shape is {:?}", root.shape()),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let Some(root_id) = root.node else {
            return Ok(Gradients {
                tape: self.id,
                grads,
            });
        };
        grads[root_id] = Some(Tensor::ones(&nodes[root_id].shape));

        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            if matches!(node.kind, NodeKind::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.kind {
                NodeKind::Leaf => unreachable!(),
                NodeKind::MatMul { a, b } => {
                    let (m, k, n) = (a.value.rows(), a.value.cols(), b.value.cols());
                    if let Some(ia) = a.node {
                        let mut ga = vec![T::zero(); m * k];
                        T::gemm(m, n, k, g.data(), false, b.value.data(), true, T::zero(), &mut ga);
                        accumulate(&mut grads, ia, Tensor::matrix(m, k, ga)?);
                    }
                    if let Some(ib) = b.node {
                        let mut gb = vec![T::zero(); k * n];
                        T::gemm(k, m, n, a.value.data(), true, g.data(), false, T::zero(), &mut gb);
                        accumulate(&mut grads, ib, Tensor::matrix(k, n, gb)?);
                    }
                }
                NodeKind::Binary { op, a, b, out } => {
                    if let Some(ia) = a.node {
                        let full = binary_partial(*op, true, &g, a, b, out);
                        accumulate(&mut grads, ia, reduce_to(&full, a.value.shape()));
                    }
                    if let Some(ib) = b.node {
                        let full = binary_partial(*op, false, &g, a, b, out);
                        accumulate(&mut grads, ib, reduce_to(&full, b.value.shape()));
                    }
                }
                NodeKind::Unary { op, a, input, out } => {
                    let ga = unary_partial(*op, &g, input, out);
                    accumulate(&mut grads, *a, ga);
                }
                NodeKind::Mean { a, shape } => {
                    let numel: usize = shape.iter().product();
                    let v = g.data()[0] / T::lit(numel as f64);
                    accumulate(&mut grads, *a, Tensor::full(shape, v));
                }
                NodeKind::SumCols { a, cols } => {
                    let rows = g.rows();
                    let ga = Tensor::from_fn(rows, *cols, |r, _| g.at(r, 0));
                    accumulate(&mut grads, *a, ga);
                }
                NodeKind::Concat { parts } => {
                    let mut start = 0;
                    for &(node, width) in parts {
                        if let Some(ip) = node {
                            accumulate(&mut grads, ip, g.column_block(start, width)?);
                        }
                        start += width;
                    }
                }
                NodeKind::BatchedMatVec { s, w } => {
                    let (n, q) = (w.value.rows(), w.value.cols());
                    let p = s.value.cols() / q;
                    if let Some(is) = s.node {
                        let gs = Tensor::from_fn(n, p * q, |b, k| g.at(b, k / q) * w.value.at(b, k % q));
                        accumulate(&mut grads, is, gs);
                    }
                    if let Some(iw) = w.node {
                        let gw = Tensor::from_fn(n, q, |b, j| {
                            (0..p).map(|i| g.at(b, i) * s.value.at(b, i * q + j)).sum()
                        });
                        accumulate(&mut grads, iw, gw);
                    }
                }
                NodeKind::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, f) = (g.rows(), g.cols());
                    if let Some(ib) = beta {
                        let gb = Tensor::row((0..f).map(|c| (0..n).map(|r| g.at(r, c)).sum()).collect());
                        accumulate(&mut grads, *ib, gb);
                    }
                    if let Some(ig) = gamma.node {
                        let gg = Tensor::row(
                            (0..f)
                                .map(|c| (0..n).map(|r| g.at(r, c) * xhat.at(r, c)).sum())
                                .collect(),
                        );
                        accumulate(&mut grads, ig, gg);
                    }
                    if let Some(ix) = x {
                        let gam = gamma.value.data();
                        let nf = T::lit(n as f64);
                        let mut gx = Tensor::zeros(&[n, f]);
                        for c in 0..f {
                            let mut sum_g = T::zero();
                            let mut sum_gx = T::zero();
                            for r in 0..n {
                                let gh = g.at(r, c) * gam[c];
                                sum_g += gh;
                                sum_gx += gh * xhat.at(r, c);
                            }
                            for r in 0..n {
                                let gh = g.at(r, c) * gam[c];
                                let v = inv_std[c] / nf * (nf * gh - sum_g - xhat.at(r, c) * sum_gx);
                                gx.set(r, c, v);
                            }
                        }
                        accumulate(&mut grads, *ix, gx);
                    }
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn shape_err<T: Scalar>(op: BinaryOp, a: &Var<T>, b: &Var<T>) -> Error {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    };
    Error::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shape matches node shape"),
        slot @ None => *slot = Some(g),
    }
}

// Value of operand `x` (shape rx x cx) at broadcast position (r, c).
#[inline]
fn bcast<T: Scalar>(x: &Tensor<T>, r: usize, c: usize) -> T {
    let (rx, cx) = (x.rows(), x.cols());
    x.at(if rx == 1 { 0 } else { r }, if cx == 1 { 0 } else { c })
}

fn binary_partial<T: Scalar>(
    op: BinaryOp,
    wrt_a: bool,
    g: &Tensor<T>,
    a: &Input<T>,
    b: &Input<T>,
    out: &Tensor<T>,
) -> Tensor<T> {
    let (rows, cols) = (g.rows(), g.cols());
    match (op, wrt_a) {
        (BinaryOp::Add, _) => g.clone(),
        (BinaryOp::Sub, true) => g.clone(),
        (BinaryOp::Sub, false) => g.map(|v| -v),
        (BinaryOp::Mul, true) => Tensor::from_fn(rows, cols, |r, c| g.at(r, c) * bcast(&b.value, r, c)),
        (BinaryOp::Mul, false) => Tensor::from_fn(rows, cols, |r, c| g.at(r, c) * bcast(&a.value, r, c)),
        (BinaryOp::Div, true) => Tensor::from_fn(rows, cols, |r, c| g.at(r, c) / bcast(&b.value, r, c)),
        (BinaryOp::Div, false) => Tensor::from_fn(rows, cols, |r, c| {
            -g.at(r, c) * out.at(r, c) / bcast(&b.value, r, c)
        }),
    }
}

// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to<T: Scalar>(full: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if full.shape() == shape {
        return full.clone();
    }
    let (rows, cols) = (full.rows(), full.cols());
    let (tr, tc) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(shape);
    for r in 0..rows {
        for c in 0..cols {
            let (ir, ic) = (if tr == 1 { 0 } else { r }, if tc == 1 { 0 } else { c });
            let v = out.at(ir, ic) + full.at(r, c);
            out.set(ir, ic, v);
        }
    }
    out
}

fn unary_partial<T: Scalar>(op: UnaryOp<T>, g: &Tensor<T>, input: &Tensor<T>, out: &Tensor<T>) -> Tensor<T> {
    let two = T::lit(2.0);
    let gd = g.data();
    let xd = input.data();
    let od = out.data();
    let data: Vec<T> = match op {
        UnaryOp::Relu => gd
            .iter()
            .zip(xd)
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        UnaryOp::Square => gd.iter().zip(xd).map(|(&g, &x)| two * x * g).collect(),
        UnaryOp::Exp => gd.iter().zip(od).map(|(&g, &o)| g * o).collect(),
        UnaryOp::Sin => gd.iter().zip(xd).map(|(&g, &x)| g * x.cos()).collect(),
        UnaryOp::Cos => gd.iter().zip(xd).map(|(&g, &x)| -g * x.sin()).collect(),
        UnaryOp::Sqrt => gd.iter().zip(od).map(|(&g, &o)| g / (two * o)).collect(),
        UnaryOp::Neg => gd.iter().map(|&g| -g).collect(),
        UnaryOp::Scale(c) => gd.iter().map(|&g| g * c).collect(),
        UnaryOp::Shift(_) => gd.to_vec(),
    };
    Tensor::new(g.shape().to_vec(), data).expect("same shape as upstream gradient")
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `var`; zeros when `var` was not reached.
    pub fn wrt(&self, var: &Var<T>) -> Result<Tensor<T>> {
        if var.tape != self.tape {
            return Err(Error::ForeignVariable);
        }
        Ok(var
            .node
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(var.shape())))
    }
}

/// Compares reverse-mode gradients of `f` with central finite differences.
///
/// Returns `max_i |fd_i - g_i| / max(|g_i|, s)` over every coordinate of
/// every parameter, where `s = 1e-5 max(1, |f|)` keeps coordinates with a
/// vanishing gradient from being judged on round-off in the difference
/// quotient.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let tape = Tape::new();
    let leaves: Vec<Var<T>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&tape, &leaves)?;
    let grads = tape.backward(&root)?;
    let floor = T::lit(1e-5) * root.item()?.abs().max(T::one());

    let eval = |ps: &[Tensor<T>]| -> Result<T> {
        let t = Tape::no_grad();
        let vs: Vec<Var<T>> = ps.iter().map(|p| t.param(p.clone())).collect();
        f(&t, &vs)?.item()
    };

    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, leaf) in leaves.iter().enumerate() {
        let g = grads.wrt(leaf)?;
        for k in 0..params[pi].numel() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let fd = (up - down) / (T::lit(2.0) * eps);
            let gk = g.data()[k];
            let rel = (fd - gk).abs() / gk.abs().max(floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
