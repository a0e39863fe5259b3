//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Discrete choices (argmax pairings, hardest-example mining, the largest
//! component of a Chebyshev distance) are made on forward values and enter
//! the tape as index lists through [`Var::gather`] and [`Var::gather_rows`].
//! Gradients therefore flow only through the selected entries.
//!
//! Binary operations accept equal shapes, a scalar operand, or an operand
//! whose shape is a trailing suffix of the other (a channel vector `(d)`
//! against `(N, L, d)`, or positional encodings `(L, d)` against `(N, L, d)`).

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Scale(f64),
    AddScalar(f64),
    Sqrt,
    Exp,
    Log,
    Abs,
    Relu,
    Square,
    ClampMin(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    MeanLocations(usize),
    ExpandLocations(usize),
    GatherRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    SelectLocation(usize, usize),
    PrependToken(usize, usize),
    LogSumExpRows(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of forward operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradient buffers produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂loss/∂var`; zeros when `var` did not contribute to the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.get_id(var.id)
    }

    fn get_id(&self, id: usize) -> Tensor {
        let shape = self.shapes[id].clone();
        match self.grads.get(id).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape).expect("gradient shape"),
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var<'_>) -> bool {
        matches!(self.grads.get(var.id), Some(Some(_)))
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 || (b.len() < a.len() && a.ends_with(b)) {
        Ok(a.to_vec())
    } else if na == 1 || (a.len() < b.len() && b.ends_with(a)) {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn locations_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, l, d] => Ok((n, l, d)),
        _ => Err(Error::InvalidTensor(format!(
            "{op}: expected an (N, L, d) tensor, got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Each node between the loss and the start of the tape is visited once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::NoGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, &mut grads, node, &g);
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        &Op::Binary(kind, a, b) => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let (na, nb) = (av.len(), bv.len());
            accumulate(nodes, grads, a, |ga| {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = (av[i % na], bv[i % nb]);
                    ga[i % na] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * y,
                        BinaryKind::Div => gi / y,
                        BinaryKind::Max => {
                            if x >= y {
                                gi
                            } else {
                                0.0
                            }
                        }
                    };
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = (av[i % na], bv[i % nb]);
                    gb[i % nb] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * x,
                        BinaryKind::Div => -gi * x / (y * y),
                        BinaryKind::Max => {
                            if x >= y {
                                0.0
                            } else {
                                gi
                            }
                        }
                    };
                }
            });
        }
        &Op::Unary(kind, a) => {
            let x = nodes[a].value.data();
            let y = node.value.data();
            accumulate(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i]
                        * match kind {
                            UnaryKind::Scale(c) => c,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::Sqrt => {
                                // subgradient 0 at the origin
                                if y[i] > 0.0 {
                                    0.5 / y[i]
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Square => 2.0 * x[i],
                            UnaryKind::ClampMin(c) => {
                                if x[i] > c {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            });
        }
        &Op::Matmul(a, b) => {
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            accumulate(nodes, grads, a, |ga| {
                let bt = transpose_raw(bv, k, n);
                for (o, v) in ga.iter_mut().zip(matmul_raw(g, &bt, m, n, k)) {
                    *o += v;
                }
            });
            accumulate(nodes, grads, b, |gb| {
                let at = transpose_raw(av, m, k);
                for (o, v) in gb.iter_mut().zip(matmul_raw(&at, g, k, m, n)) {
                    *o += v;
                }
            });
        }
        &Op::Transpose(a) => {
            let shape = node.value.shape();
            let gt = transpose_raw(g, shape[0], shape[1]);
            accumulate(nodes, grads, a, |ga| {
                for (o, v) in ga.iter_mut().zip(gt) {
                    *o += v;
                }
            });
        }
        &Op::Reshape(a) => accumulate(nodes, grads, a, |ga| {
            for (o, v) in ga.iter_mut().zip(g) {
                *o += v;
            }
        }),
        &Op::Sum(a) => accumulate(nodes, grads, a, |ga| {
            for o in ga.iter_mut() {
                *o += g[0];
            }
        }),
        &Op::Mean(a) => accumulate(nodes, grads, a, |ga| {
            let scale = g[0] / ga.len() as f64;
            for o in ga.iter_mut() {
                *o += scale;
            }
        }),
        &Op::SumLast(a) => {
            let d = *nodes[a].value.shape().last().unwrap();
            accumulate(nodes, grads, a, |ga| {
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[i / d];
                }
            });
        }
        &Op::MeanLocations(a) => {
            let (n, l, d) = locations_dims("mean_locations", nodes[a].value.shape()).unwrap();
            accumulate(nodes, grads, a, |ga| {
                let inv = 1.0 / l as f64;
                for s in 0..n {
                    for t in 0..l {
                        for c in 0..d {
                            ga[(s * l + t) * d + c] += g[s * d + c] * inv;
                        }
                    }
                }
            });
        }
        &Op::ExpandLocations(a) => {
            let (n, l, d) = locations_dims("expand_locations", node.value.shape()).unwrap();
            accumulate(nodes, grads, a, |ga| {
                for s in 0..n {
                    for t in 0..l {
                        for c in 0..d {
                            ga[s * d + c] += g[(s * l + t) * d + c];
                        }
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            let width = node.value.numel() / idx.len();
            accumulate(nodes, grads, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..width {
                        ga[src * width + c] += g[r * width + c];
                    }
                }
            });
        }
        Op::Gather(a, idx) => accumulate(nodes, grads, *a, |ga| {
            for (r, &src) in idx.iter().enumerate() {
                ga[src] += g[r];
            }
        }),
        &Op::SelectLocation(a, loc) => {
            let (n, l, d) = locations_dims("select_location", nodes[a].value.shape()).unwrap();
            accumulate(nodes, grads, a, |ga| {
                for s in 0..n {
                    for c in 0..d {
                        ga[(s * l + loc) * d + c] += g[s * d + c];
                    }
                }
            });
        }
        &Op::PrependToken(x, tok) => {
            let (n, l1, d) = locations_dims("prepend_token", node.value.shape()).unwrap();
            accumulate(nodes, grads, x, |gx| {
                for s in 0..n {
                    for t in 1..l1 {
                        for c in 0..d {
                            gx[(s * (l1 - 1) + t - 1) * d + c] += g[(s * l1 + t) * d + c];
                        }
                    }
                }
            });
            accumulate(nodes, grads, tok, |gt| {
                for s in 0..n {
                    for c in 0..d {
                        gt[c] += g[s * l1 * d + c];
                    }
                }
            });
        }
        &Op::LogSumExpRows(a) => {
            let cols = nodes[a].value.shape()[1];
            let x = nodes[a].value.data();
            let lse = node.value.data();
            accumulate(nodes, grads, a, |ga| {
                for (i, o) in ga.iter_mut().enumerate() {
                    let r = i / cols;
                    *o += g[r] * (x[i] - lse[r]).exp();
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "operands recorded on different tapes".into(),
            ))
        }
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind, op: &'static str) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(op, a.shape(), b.shape())?;
            let (av, bv) = (a.data(), b.data());
            let numel: usize = shape.iter().product();
            let mut out = Vec::with_capacity(numel);
            for i in 0..numel {
                let (x, y) = (av[i % av.len()], bv[i % bv.len()]);
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain {
                                op,
                                detail: "division by zero".into(),
                            });
                        }
                        x / y
                    }
                    BinaryKind::Max => x.max(y),
                });
            }
            Tensor::new(shape, out)?
        };
        Ok(self.tape.push(
            value,
            Op::Binary(kind, self.id, other.id),
            &[self.id, other.id],
        ))
    }

    fn unary(&self, kind: UnaryKind, op: &'static str) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let check = |ok: bool, what: &str| {
                if ok {
                    Ok(())
                } else {
                    Err(Error::Domain {
                        op,
                        detail: what.to_string(),
                    })
                }
            };
            if matches!(kind, UnaryKind::Sqrt | UnaryKind::Log)
                && x.data().iter().any(|v| v.is_nan())
            {
                return Err(Error::NonFinite(format!("{op}: NaN input")));
            }
            match kind {
                UnaryKind::Sqrt => check(x.data().iter().all(|&v| v >= 0.0), "negative input")?,
                UnaryKind::Log => check(x.data().iter().all(|&v| v > 0.0), "nonpositive input")?,
                _ => {}
            }
            x.map(|v| match kind {
                UnaryKind::Scale(c) => v * c,
                UnaryKind::AddScalar(c) => v + c,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Square => v * v,
                UnaryKind::ClampMin(c) => v.max(c),
            })
        };
        Ok(self.tape.push(value, Op::Unary(kind, self.id), &[self.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    /// Elementwise maximum of two operands.
    pub fn maximum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Max, "maximum")
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c), "scale")
            .expect("scale is total")
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(c), "add_scalar")
            .expect("add_scalar is total")
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `1 - self`.
    pub fn one_minus(&self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt, "sqrt")
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryKind::Exp, "exp").expect("exp is total")
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log, "log")
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(UnaryKind::Abs, "abs").expect("abs is total")
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(UnaryKind::Relu, "relu").expect("relu is total")
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnaryKind::Square, "square")
            .expect("square is total")
    }

    /// `max(self, c)` for a constant floor `c`.
    pub fn clamp_min(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::ClampMin(c), "clamp_min")
            .expect("clamp_min is total")
    }

    /// Matrix product of `(m, k)` and `(k, n)` operands.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?
                }
                (sa, sb) => {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: sa.to_vec(),
                        rhs: sb.to_vec(),
                    })
                }
            }
        };
        Ok(self
            .tape
            .push(value, Op::Matmul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.with_value(|v| match *v.shape() {
            [r, c] => Tensor::new(vec![c, r], transpose_raw(v.data(), r, c)),
            _ => Err(Error::InvalidTensor(format!(
                "transpose expects a matrix, got {:?}",
                v.shape()
            ))),
        })?;
        Ok(self.tape.push(value, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.with_value(|v| v.reshape(shape))?;
        Ok(self.tape.push(value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(|v| v.data().iter().sum()));
        self.tape.push(value, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let value =
            Tensor::scalar(self.with_value(|v| v.data().iter().sum::<f64>() / v.numel() as f64));
        self.tape.push(value, Op::Mean(self.id), &[self.id])
    }

    /// Sums over the last axis, `(..., d) -> (...)`.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let value = self.with_value(|v| {
            let Some((&d, lead)) = v.shape().split_last() else {
                return Err(Error::EmptyAxis { op: "sum_last" });
            };
            let data = v.data().chunks(d).map(|c| c.iter().sum()).collect();
            Tensor::new(lead.to_vec(), data)
        })?;
        Ok(self.tape.push(value, Op::SumLast(self.id), &[self.id]))
    }

    /// Largest entry along the last axis. The argmax (lowest index on ties)
    /// is fixed from forward values; the gradient flows to that entry only.
    pub fn max_last(&self) -> Result<Var<'t>> {
        let (indices, lead) = self.with_value(|v| {
            let Some((&d, lead)) = v.shape().split_last() else {
                return Err(Error::EmptyAxis { op: "max_last" });
            };
            let idx = v
                .data()
                .chunks(d)
                .enumerate()
                .map(|(r, c)| r * d + argmax(c))
                .collect::<Vec<_>>();
            Ok((idx, lead.to_vec()))
        })?;
        self.gather(indices)?.reshape(lead)
    }

    /// Location-axis mean, `(N, L, d) -> (N, d)`.
    pub fn mean_locations(&self) -> Result<Var<'t>> {
        let value = self.with_value(|v| {
            let (n, l, d) = locations_dims("mean_locations", v.shape())?;
            let x = v.data();
            let mut out = vec![0.0; n * d];
            for s in 0..n {
                for t in 0..l {
                    for c in 0..d {
                        out[s * d + c] += x[(s * l + t) * d + c];
                    }
                }
            }
            for o in &mut out {
                *o /= l as f64;
            }
            Tensor::new(vec![n, d], out)
        })?;
        Ok(self
            .tape
            .push(value, Op::MeanLocations(self.id), &[self.id]))
    }

    /// Repeats `(N, d)` across `locations`, giving `(N, L, d)`.
    pub fn expand_locations(&self, locations: usize) -> Result<Var<'t>> {
        if locations == 0 {
            return Err(Error::EmptyAxis {
                op: "expand_locations",
            });
        }
        let value = self.with_value(|v| match *v.shape() {
            [n, d] => {
                let mut out = Vec::with_capacity(n * locations * d);
                for row in v.data().chunks(d) {
                    for _ in 0..locations {
                        out.extend_from_slice(row);
                    }
                }
                Tensor::new(vec![n, locations, d], out)
            }
            _ => Err(Error::InvalidTensor(format!(
                "expand_locations expects (N, d), got {:?}",
                v.shape()
            ))),
        })?;
        Ok(self
            .tape
            .push(value, Op::ExpandLocations(self.id), &[self.id]))
    }

    /// Selects rows along the leading axis; repeated indices are allowed.
    pub fn gather_rows(&self, indices: Vec<usize>) -> Result<Var<'t>> {
        if indices.is_empty() {
            return Err(Error::EmptyAxis { op: "gather_rows" });
        }
        let value = self.with_value(|v| v.select_rows(&indices))?;
        Ok(self
            .tape
            .push(value, Op::GatherRows(self.id, indices), &[self.id]))
    }

    /// Picks entries by flat row-major index into a 1-D result.
    pub fn gather(&self, indices: Vec<usize>) -> Result<Var<'t>> {
        if indices.is_empty() {
            return Err(Error::EmptyAxis { op: "gather" });
        }
        let value = self.with_value(|v| {
            let x = v.data();
            let data = indices
                .iter()
                .map(|&i| {
                    x.get(i).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!("gather index {i} out of range"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok::<_, Error>(Tensor::vector(data))
        })?;
        Ok(self
            .tape
            .push(value, Op::Gather(self.id, indices), &[self.id]))
    }

    /// Slice of one location, `(N, L, d) -> (N, d)`.
    pub fn select_location(&self, location: usize) -> Result<Var<'t>> {
        let value = self.with_value(|v| {
            let (n, l, d) = locations_dims("select_location", v.shape())?;
            if location >= l {
                return Err(Error::InvalidArgument(format!(
                    "location {location} out of range for {l}"
                )));
            }
            let x = v.data();
            let mut out = Vec::with_capacity(n * d);
            for s in 0..n {
                let start = (s * l + location) * d;
                out.extend_from_slice(&x[start..start + d]);
            }
            Tensor::new(vec![n, d], out)
        })?;
        Ok(self
            .tape
            .push(value, Op::SelectLocation(self.id, location), &[self.id]))
    }

    /// Inserts `token` (shape `(d)`) at location 0 of every instance.
    pub fn prepend_token(&self, token: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&token)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, t) = (&nodes[self.id].value, &nodes[token.id].value);
            let (n, l, d) = locations_dims("prepend_token", x.shape())?;
            if t.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "prepend_token",
                    lhs: x.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(n * (l + 1) * d);
            for chunk in x.data().chunks(l * d) {
                out.extend_from_slice(t.data());
                out.extend_from_slice(chunk);
            }
            Tensor::new(vec![n, l + 1, d], out)?
        };
        Ok(self.tape.push(
            value,
            Op::PrependToken(self.id, token.id),
            &[self.id, token.id],
        ))
    }

    /// Row-wise `log Σ exp`, `(N, C) -> (N)`, evaluated with max subtraction.
    pub fn logsumexp_rows(&self) -> Result<Var<'t>> {
        let value = self.with_value(|v| match *v.shape() {
            [_, c] => {
                let data = v
                    .data()
                    .chunks(c)
                    .map(|row| {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                    })
                    .collect();
                Ok(Tensor::vector(data))
            }
            _ => Err(Error::InvalidTensor(format!(
                "logsumexp_rows expects (N, C), got {:?}",
                v.shape()
            ))),
        })?;
        Ok(self
            .tape
            .push(value, Op::LogSumExpRows(self.id), &[self.id]))
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-location mean and biased variance of an `(N, L, d)` feature map.
pub fn reduce_stats<'t>(x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = x.shape();
    let (_, l, _) = locations_dims("reduce_stats", &shape)?;
    let mean = x.mean_locations()?;
    let centered = x.sub(mean.expand_locations(l)?)?;
    let var = centered.square().mean_locations()?;
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn div_by_scalar() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[2., 4.]));
        let two = tape.constant(Tensor::scalar(2.));
        assert_eq!(a.div(two).unwrap().value().data(), &[1., 2.]);
    }

    #[test]
    fn channel_vector_broadcast() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let c = tape.constant(t(&[2], &[10., 20.]));
        let out = x.add(c).unwrap().value();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[11., 22., 13., 24.]);
        // operand order does not matter for the shape
        assert_eq!(c.add(x).unwrap().value().data(), &[11., 22., 13., 24.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2], &[0.; 2]));
        let err = a.add(b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let neg = tape.constant(t(&[2], &[1., -1.]));
        assert!(matches!(neg.sqrt(), Err(Error::Domain { .. })));
        let zero = tape.constant(t(&[1], &[0.]));
        assert!(matches!(zero.log(), Err(Error::Domain { .. })));
        let one = tape.constant(t(&[1], &[1.]));
        assert!(matches!(one.div(zero), Err(Error::Domain { .. })));
    }

    #[test]
    fn reduce_stats_examples() {
        let tape = Tape::new();
        let (m, v) = reduce_stats(tape.constant(t(&[1, 2, 1], &[1., 3.]))).unwrap();
        assert_eq!(m.value().data(), &[2.]);
        assert_eq!(v.value().data(), &[1.]);

        let (m, v) = reduce_stats(tape.constant(Tensor::full(vec![2, 3, 2], 5.).unwrap())).unwrap();
        assert!(m.value().data().iter().all(|&x| x == 5.));
        assert!(v.value().data().iter().all(|&x| x == 0.));

        let (m, v) =
            reduce_stats(tape.constant(t(&[1, 3, 2], &[1., 10., 2., 20., 3., 30.]))).unwrap();
        assert_eq!(m.value().data(), &[2., 20.]);
        let v = v.value();
        assert!((v.data()[0] - 2. / 3.).abs() < 1e-12);
        assert!((v.data()[1] - 200. / 3.).abs() < 1e-12);
    }

    #[test]
    fn reduce_stats_rejects_non_feature_maps() {
        let tape = Tape::new();
        assert!(reduce_stats(tape.constant(t(&[2, 2], &[0.; 4]))).is_err());
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(id.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);

        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let c = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.]);

        let a = tape.constant(t(&[2, 2], &[1., 0., 0., 2.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[5., 6., 14., 16.]);

        assert!(matches!(r.matmul(r), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_sum_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -2., 7.]));
        let grads = x.sum().backward().unwrap();
        assert_eq!(grads.get(x).data(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_mean_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let grads = x.square().mean().backward().unwrap();
        assert_eq!(grads.get(x).data(), &[1., 2.]);
    }

    #[test]
    fn backward_through_max_component() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 5.]));
        let y = tape.constant(t(&[2], &[0., 0.]));
        let loss = x.sub(y).unwrap().abs().max_last().unwrap();
        assert_eq!(loss.value().shape(), &[] as &[usize]);
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(x).data(), &[0., 1.]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(x.backward(), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::scalar(1.));
        assert!(matches!(c.backward(), Err(Error::NoGraph)));
    }

    #[test]
    fn broadcast_gradient_reduces_over_leading_axes() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let c = tape.leaf(t(&[2], &[10., 20.]));
        let grads = x.mul(c).unwrap().sum().backward().unwrap();
        assert_eq!(grads.get(c).data(), &[4., 6.]);
        assert_eq!(grads.get(x).data(), &[10., 20., 10., 20.]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.));
        // x * x + x -> 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap();
        assert_eq!(y.backward().unwrap().get(x).data(), &[7.]);
    }

    #[test]
    fn prepend_and_select_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let tok = tape.leaf(t(&[2], &[9., 8.]));
        let y = x.prepend_token(tok).unwrap();
        assert_eq!(y.value().data(), &[9., 8., 1., 2., 9., 8., 3., 4.]);
        let cls = y.select_location(0).unwrap();
        let grads = cls.sum().backward().unwrap();
        assert_eq!(grads.get(tok).data(), &[2., 2.]);
        assert_eq!(grads.get(x).data(), &[0.; 4]);
    }

    #[test]
    fn logsumexp_is_stable() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1000., 0.]));
        let v = x.logsumexp_rows().unwrap().value();
        assert!((v.data()[0] - 1000.).abs() < 1e-12);
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let unused = tape.leaf(t(&[3], &[1., 2., 3.]));
        let grads = x.sum().backward().unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused).data(), &[0.; 3]);
    }
}
