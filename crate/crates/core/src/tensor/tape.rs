//! Tape-based reverse-mode automatic differentiation over [`Array2`].
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents. Parents always precede children, so a single reverse sweep
//! over the node list is a valid topological order for backpropagation.
//!
//! A tape lives for one forward pass. Build it, read values off it, call
//! [`Tape::backward`] once on a scalar root, then drop it.

use std::cell::{Ref, RefCell};

use super::array::{broadcast_shape, Array2};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    Offset(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    Gather(usize, Vec<(usize, usize)>),
    LogSumExpRows(usize, Option<Vec<bool>>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::ConcatCols(ps) => ps.clone(),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::SelectRows(a, _)
            | Op::Gather(a, _)
            | Op::LogSumExpRows(a, _) => vec![*a],
        }
    }
}

#[derive(Debug)]
struct TapeNode {
    op: Op,
    value: Array2,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<TapeNode>>,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` does not reach the root.
    pub fn get(&self, v: Var) -> Array2 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Array2::zeros(r, c)
            }
        }
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Array2) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(TapeNode { op, value });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Ref<'_, Array2> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Adds an input (parameter or constant) to the tape.
    pub fn leaf(&self, value: Array2) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> Array2 {
        self.val(v).clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.val(v).shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v).get(0, 0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(&self.val(b))?;
        Ok(self.push(Op::MatMul(a.0, b.0), out))
    }

    /// Elementwise binary op; either operand may be a row, column or scalar broadcast.
    pub fn binary(&self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (x, y) = (self.val(a), self.val(b));
            let (rows, cols) = broadcast_shape(x.shape(), y.shape()).ok_or(Error::Dimension {
                op: "elementwise",
                lhs: x.shape(),
                rhs: y.shape(),
            })?;
            let f: fn(f64, f64) -> f64 = match op {
                Binary::Add => |p, q| p + q,
                Binary::Sub => |p, q| p - q,
                Binary::Mul => |p, q| p * q,
                Binary::Div => |p, q| p / q,
            };
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(x.get_broadcast(r, c), y.get_broadcast(r, c)));
                }
            }
            Array2::from_vec_unchecked(rows, cols, data)
        };
        if op == Binary::Div && !out.is_finite() {
            return Err(Error::Domain {
                op: "div",
                detail: "division produced a non-finite value".into(),
            });
        }
        Ok(self.push(Op::Binary(op, a.0, b.0), out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&self, op: Unary, a: Var) -> Result<Var> {
        let out = {
            let x = self.val(a);
            match op {
                Unary::Log => {
                    if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                        return Err(Error::Domain {
                            op: "log",
                            detail: format!("non-positive input {bad}"),
                        });
                    }
                    x.map(f64::ln)
                }
                Unary::Sqrt => {
                    if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
                        return Err(Error::Domain {
                            op: "sqrt",
                            detail: format!("negative input {bad}"),
                        });
                    }
                    x.map(f64::sqrt)
                }
                Unary::Neg => x.map(|v| -v),
                Unary::Relu => x.map(|v| v.max(0.0)),
                Unary::Exp => x.map(f64::exp),
                Unary::Tanh => x.map(f64::tanh),
                Unary::Sigmoid => x.map(sigmoid),
                Unary::Abs => x.map(f64::abs),
                Unary::Square => x.map(|v| v * v),
            }
        };
        if op == Unary::Exp && !out.is_finite() {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(self.push(Op::Unary(op, a.0), out))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Unary::Neg, a).expect("neg is total")
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a).expect("abs is total")
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    /// `a * k` for a constant `k`.
    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.val(a).map(|v| v * k);
        self.push(Op::Scale(a.0, k), out)
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&self, a: Var, k: f64) -> Var {
        let out = self.val(a).map(|v| v + k);
        self.push(Op::Offset(a.0), out)
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.val(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a.0, lo, hi), out)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&self, a: Var) -> Var {
        let out = Array2::scalar(self.val(a).sum());
        self.push(Op::Sum(a.0), out)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.val(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums: `n×m -> n×1`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = {
            let x = self.val(a);
            let sums: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            Array2::from_vec_unchecked(x.rows(), 1, sums)
        };
        self.push(Op::SumRows(a.0), out)
    }

    /// Per-column sums: `n×m -> 1×m`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.val(a).reduce_to((1, self.val(a).cols()));
        self.push(Op::SumCols(a.0), out)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.val(a).transpose();
        self.push(Op::Transpose(a.0), out)
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<Ref<'_, Array2>> = parts.iter().map(|&p| self.val(p)).collect();
            let rows = vals.first().map_or(0, |v| v.rows());
            for v in &vals {
                if v.rows() != rows {
                    return Err(Error::Dimension {
                        op: "concat_cols",
                        lhs: vals[0].shape(),
                        rhs: v.shape(),
                    });
                }
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Array2::from_vec_unchecked(rows, cols, data)
        };
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), out))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = {
            let x = self.val(a);
            if start >= end || end > x.cols() {
                return Err(Error::Dimension {
                    op: "slice_cols",
                    lhs: x.shape(),
                    rhs: (start, end),
                });
            }
            let mut data = Vec::with_capacity(x.rows() * (end - start));
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[start..end]);
            }
            Array2::from_vec_unchecked(x.rows(), end - start, data)
        };
        Ok(self.push(Op::SliceCols(a.0, start), out))
    }

    /// Stacks the listed rows (repeats allowed).
    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let x = self.val(a);
            let mut data = Vec::with_capacity(idx.len() * x.cols());
            for &i in idx {
                if i >= x.rows() {
                    return Err(Error::Dimension {
                        op: "select_rows",
                        lhs: x.shape(),
                        rhs: (i, 0),
                    });
                }
                data.extend_from_slice(x.row(i));
            }
            Array2::from_vec_unchecked(idx.len(), x.cols(), data)
        };
        Ok(self.push(Op::SelectRows(a.0, idx.to_vec()), out))
    }

    /// Picks single entries into a `k×1` column.
    pub fn gather(&self, a: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let out = {
            let x = self.val(a);
            let mut data = Vec::with_capacity(positions.len());
            for &(r, c) in positions {
                if r >= x.rows() || c >= x.cols() {
                    return Err(Error::Dimension {
                        op: "gather",
                        lhs: x.shape(),
                        rhs: (r, c),
                    });
                }
                data.push(x.get(r, c));
            }
            Array2::from_vec_unchecked(positions.len(), 1, data)
        };
        Ok(self.push(Op::Gather(a.0, positions.to_vec()), out))
    }

    /// Row-wise log-sum-exp with max subtraction: `n×m -> n×1`.
    ///
    /// With a mask (row-major, `true` = included), excluded entries are
    /// dropped from the sum. Every row must keep at least one entry.
    pub fn logsumexp_rows(&self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = {
            let x = self.val(a);
            if let Some(m) = mask {
                if m.len() != x.len() {
                    return Err(Error::Dimension {
                        op: "logsumexp_rows",
                        lhs: x.shape(),
                        rhs: (m.len(), 1),
                    });
                }
            }
            let mut data = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let keep = |c: usize| mask.is_none_or(|m| m[r * x.cols() + c]);
                let max = (0..x.cols())
                    .filter(|&c| keep(c))
                    .map(|c| x.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Usage(format!("logsumexp row {r} is fully masked")));
                }
                let s: f64 = (0..x.cols())
                    .filter(|&c| keep(c))
                    .map(|c| (x.get(r, c) - max).exp())
                    .sum();
                data.push(max + s.ln());
            }
            Array2::from_vec_unchecked(x.rows(), 1, data)
        };
        Ok(self.push(Op::LogSumExpRows(a.0, mask.map(<[bool]>::to_vec)), out))
    }

    /// Backpropagates from a 1×1 `root` to every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if root_shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got shape {root_shape:?}"
            )));
        }
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Array2>> = vec![None; nodes.len()];
        grads[root.0] = Some(Array2::scalar(1.0));

        fn accumulate(grads: &mut [Option<Array2>], id: usize, g: Array2) {
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(&mut grads, *a, g.matmul(&vb.transpose())?);
                    accumulate(&mut grads, *b, va.transpose().matmul(&g)?);
                }
                Op::Binary(op, a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (rows, cols) = g.shape();
                    let mut ga = Array2::zeros(rows, cols);
                    let mut gb = Array2::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g.get(r, c);
                            let (x, y) = (va.get_broadcast(r, c), vb.get_broadcast(r, c));
                            let (da, db) = match op {
                                Binary::Add => (gi, gi),
                                Binary::Sub => (gi, -gi),
                                Binary::Mul => (gi * y, gi * x),
                                Binary::Div => (gi / y, -gi * x / (y * y)),
                            };
                            ga.set(r, c, da);
                            gb.set(r, c, db);
                        }
                    }
                    accumulate(&mut grads, *a, ga.reduce_to(va.shape()));
                    accumulate(&mut grads, *b, gb.reduce_to(vb.shape()));
                }
                Op::Unary(op, a) => {
                    let x = &nodes[*a].value;
                    let local = match op {
                        Unary::Neg => g.map(|v| -v),
                        Unary::Relu => g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
                        Unary::Exp => g.zip_map(out, |gi, o| gi * o),
                        Unary::Log => g.zip_map(x, |gi, xi| gi / xi),
                        Unary::Tanh => g.zip_map(out, |gi, o| gi * (1.0 - o * o)),
                        Unary::Sigmoid => g.zip_map(out, |gi, o| gi * o * (1.0 - o)),
                        Unary::Sqrt => {
                            g.zip_map(out, |gi, o| if o > 0.0 { 0.5 * gi / o } else { 0.0 })
                        }
                        Unary::Abs => g.zip_map(x, |gi, xi| {
                            if xi > 0.0 {
                                gi
                            } else if xi < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        }),
                        Unary::Square => g.zip_map(x, |gi, xi| 2.0 * gi * xi),
                    };
                    accumulate(&mut grads, *a, local);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.map(|v| v * k)),
                Op::Offset(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[*a].value;
                    let local =
                        g.zip_map(x, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 });
                    accumulate(&mut grads, *a, local);
                }
                Op::Sum(a) => {
                    let (r, c) = shapes[*a];
                    accumulate(&mut grads, *a, Array2::filled(r, c, g.get(0, 0)));
                }
                Op::SumRows(a) => {
                    let (r, c) = shapes[*a];
                    let mut ga = Array2::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga.set(i, j, g.get(i, 0));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = shapes[*a];
                    let mut ga = Array2::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga.set(i, j, g.get(0, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = shapes[p];
                        let mut gp = Array2::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                gp.set(i, j, g.get(i, start + j));
                            }
                        }
                        start += c;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = shapes[*a];
                    let mut ga = Array2::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            ga.set(i, start + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = shapes[*a];
                    let mut ga = Array2::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga.set(i, j, ga.get(i, j) + g.get(k, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, positions) => {
                    let (r, c) = shapes[*a];
                    let mut ga = Array2::zeros(r, c);
                    for (k, &(i, j)) in positions.iter().enumerate() {
                        ga.set(i, j, ga.get(i, j) + g.get(k, 0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a, mask) => {
                    let x = &nodes[*a].value;
                    let (r, c) = x.shape();
                    let mut ga = Array2::zeros(r, c);
                    for i in 0..r {
                        let lse = out.get(i, 0);
                        for j in 0..c {
                            if mask.as_ref().is_none_or(|m| m[i * c + j]) {
                                ga.set(i, j, g.get(i, 0) * (x.get(i, j) - lse).exp());
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[id] = Some(g);
        }
        debug_assert!(nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.parents().iter().all(|&p| p < i)));
        Ok(Gradients { grads, shapes })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
