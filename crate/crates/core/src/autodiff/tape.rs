//! Reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and `backward` is a single reverse sweep. A tape lives
//! for one forward/backward pass and is then dropped.

use super::matrix::{gemm_a_bt_acc, gemm_at_b_acc, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    LogFloored(Var, f64),
    Neg(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    SelectLinear {
        input: Var,
        weight: Var,
        bias: Var,
        classes: Vec<usize>,
        // Transposed weight cached from the forward pass (k × n).
        weight_t: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; gradients are not tracked through it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient after `backward`; `None` if the node was unreachable or untracked.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a + row` with `row: 1×n` broadcast over every row of `a: m×n`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                lhs: sa,
                rhs: sr,
            });
        }
        let mut value = self.value(a).clone();
        value.add_row_in_place(self.value(row).data());
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, alpha), |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::NumericDomain { op: "log", value: bad });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// `log(max(a, floor))`. The gradient is zero where the floor is active.
    pub fn log_floored(&mut self, a: Var, floor: f64) -> Result<Var> {
        if !(floor > 0.0) {
            return Err(Error::NumericDomain { op: "log_floored", value: floor });
        }
        if let Some(&bad) = self.value(a).data().iter().find(|x| x.is_nan()) {
            return Err(Error::NumericDomain { op: "log_floored", value: bad });
        }
        Ok(self.unary(a, Op::LogFloored(a, floor), |x| x.max(floor).ln()))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Matrix::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::Dimension { op: "concat_cols", lhs: sa, rhs: sb });
        }
        let mut value = Matrix::zeros(sa.0, sa.1 + sb.1);
        for r in 0..sa.0 {
            let row = value.row_mut(r);
            row[..sa.1].copy_from_slice(self.nodes[a.0].value.row(r));
            row[sa.1..].copy_from_slice(self.nodes[b.0].value.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Row lookup `table[indices[i]]` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.shape(table).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::ClassIndex { index: bad, k: rows });
        }
        let value = self.value(table).select_rows(indices);
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRows(table, indices.to_vec()), rg))
    }

    /// Picks column `columns[i]` of row `i`, giving an `m×1` result.
    pub fn select_cols(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if columns.len() != m {
            return Err(Error::Dimension {
                op: "select_cols",
                lhs: (m, n),
                rhs: (columns.len(), 1),
            });
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= n) {
            return Err(Error::ClassIndex { index: bad, k: n });
        }
        let va = self.value(a);
        let data = columns.iter().enumerate().map(|(i, &c)| va.get(i, c)).collect();
        let value = Matrix::from_vec(m, 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectCols(a, columns.to_vec()), rg))
    }

    /// Fused `select_cols(input · weight + bias, classes)`: only the selected
    /// output unit of each row is computed. Bit-identical to the unfused form.
    pub fn select_linear(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        classes: &[usize],
    ) -> Result<Var> {
        let (m, n) = self.shape(input);
        let (wn, k) = self.shape(weight);
        if wn != n {
            return Err(Error::Dimension { op: "select_linear", lhs: (m, n), rhs: (wn, k) });
        }
        if self.shape(bias) != (1, k) {
            return Err(Error::Dimension {
                op: "select_linear",
                lhs: (wn, k),
                rhs: self.shape(bias),
            });
        }
        if classes.len() != m {
            return Err(Error::Dimension {
                op: "select_linear",
                lhs: (m, n),
                rhs: (classes.len(), 1),
            });
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::ClassIndex { index: bad, k });
        }
        let weight_t = self.value(weight).transpose();
        let h = self.value(input);
        let b = self.value(bias).data();
        let data = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut acc = 0.0;
                for (x, w) in h.row(i).iter().zip(weight_t.row(c)) {
                    if *x != 0.0 {
                        acc = x.mul_add(*w, acc);
                    }
                }
                acc + b[c]
            })
            .collect();
        let value = Matrix::from_vec(m, 1, data)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::SelectLinear {
                input,
                weight,
                bias,
                classes: classes.to_vec(),
                weight_t,
            },
            rg,
        ))
    }

    /// Reverse sweep from a 1×1 root. Gradients accumulate additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else { continue };
            propagate(before, node, g);
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient slot of a parent, allocated on first touch; `None` when the
/// parent does not track gradients.
fn slot(nodes: &mut [Node], v: Var) -> Option<&mut Matrix> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let (r, c) = node.value.shape();
    Some(node.grad.get_or_insert_with(|| Matrix::zeros(r, c)))
}

/// Runs `f` with the gradient slot of `v` detached from the node list, so the
/// closure can read any node value (including `v`'s own) without copying.
fn with_slot(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut Matrix, &[Node])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let mut grad = nodes[v.0].grad.take().unwrap_or_else(|| {
        let (r, c) = nodes[v.0].value.shape();
        Matrix::zeros(r, c)
    });
    f(&mut grad, nodes);
    nodes[v.0].grad = Some(grad);
}

fn acc_map(nodes: &mut [Node], v: Var, g: &Matrix, f: impl Fn(usize, f64) -> f64) {
    if let Some(slot) = slot(nodes, v) {
        for (i, (s, &gi)) in slot.data_mut().iter_mut().zip(g.data()).enumerate() {
            *s += f(i, gi);
        }
    }
}

fn propagate(nodes: &mut [Node], node: &Node, g: &Matrix) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            with_slot(nodes, a, |ga, nodes| gemm_a_bt_acc(g, &nodes[b.0].value, ga));
            with_slot(nodes, b, |gb, nodes| gemm_at_b_acc(&nodes[a.0].value, g, gb));
        }
        &Op::Add(a, b) => {
            acc_map(nodes, a, g, |_, gi| gi);
            acc_map(nodes, b, g, |_, gi| gi);
        }
        &Op::Sub(a, b) => {
            acc_map(nodes, a, g, |_, gi| gi);
            acc_map(nodes, b, g, |_, gi| -gi);
        }
        &Op::Mul(a, b) => {
            with_slot(nodes, a, |ga, nodes| {
                let bv = nodes[b.0].value.data();
                for ((s, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                    *s += gi * y;
                }
            });
            with_slot(nodes, b, |gb, nodes| {
                let av = nodes[a.0].value.data();
                for ((s, gi), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                    *s += gi * x;
                }
            });
        }
        &Op::AddRow(a, row) => {
            acc_map(nodes, a, g, |_, gi| gi);
            if let Some(slot) = slot(nodes, row) {
                for g_row in g.iter_rows() {
                    for (s, gi) in slot.data_mut().iter_mut().zip(g_row) {
                        *s += gi;
                    }
                }
            }
        }
        &Op::Relu(a) => {
            if let Some(slot) = slot(nodes, a) {
                for ((s, &gi), &y) in slot.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    if y > 0.0 {
                        *s += gi;
                    }
                }
            }
        }
        &Op::LeakyRelu(a, alpha) => with_slot(nodes, a, |ga, nodes| {
            let x = nodes[a.0].value.data();
            for ((s, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x) {
                *s += if xi > 0.0 { gi } else { alpha * gi };
            }
        }),
        &Op::Tanh(a) => acc_map(nodes, a, g, |i, gi| {
            let y = out.data()[i];
            gi * (1.0 - y * y)
        }),
        &Op::Sigmoid(a) => acc_map(nodes, a, g, |i, gi| {
            let y = out.data()[i];
            gi * y * (1.0 - y)
        }),
        &Op::Log(a) => with_slot(nodes, a, |ga, nodes| {
            let x = nodes[a.0].value.data();
            for ((s, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x) {
                *s += gi / xi;
            }
        }),
        &Op::LogFloored(a, floor) => with_slot(nodes, a, |ga, nodes| {
            let x = nodes[a.0].value.data();
            for ((s, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x) {
                if xi > floor {
                    *s += gi / xi;
                }
            }
        }),
        &Op::Neg(a) => acc_map(nodes, a, g, |_, gi| -gi),
        &Op::Scale(a, s) => acc_map(nodes, a, g, |_, gi| s * gi),
        &Op::Sum(a) => {
            let g0 = g.data()[0];
            acc_map_const(nodes, a, g0);
        }
        &Op::Mean(a) => {
            let n = nodes[a.0].value.len() as f64;
            let g0 = g.data()[0] / n;
            acc_map_const(nodes, a, g0);
        }
        &Op::ConcatCols(a, b) => {
            let left = nodes[a.0].value.cols();
            if let Some(slot) = slot(nodes, a) {
                for (r, g_row) in g.iter_rows().enumerate() {
                    for (s, gi) in slot.row_mut(r).iter_mut().zip(&g_row[..left]) {
                        *s += gi;
                    }
                }
            }
            if let Some(slot) = slot(nodes, b) {
                for (r, g_row) in g.iter_rows().enumerate() {
                    for (s, gi) in slot.row_mut(r).iter_mut().zip(&g_row[left..]) {
                        *s += gi;
                    }
                }
            }
        }
        Op::GatherRows(table, indices) => {
            if let Some(slot) = slot(nodes, *table) {
                for (g_row, &idx) in g.iter_rows().zip(indices) {
                    for (s, gi) in slot.row_mut(idx).iter_mut().zip(g_row) {
                        *s += gi;
                    }
                }
            }
        }
        Op::SelectCols(a, columns) => {
            if let Some(slot) = slot(nodes, *a) {
                let n = slot.cols();
                for (i, &c) in columns.iter().enumerate() {
                    slot.data_mut()[i * n + c] += g.data()[i];
                }
            }
        }
        Op::SelectLinear {
            input,
            weight,
            bias,
            classes,
            weight_t,
        } => {
            if let Some(slot) = slot(nodes, *input) {
                for (i, &c) in classes.iter().enumerate() {
                    let gi = g.data()[i];
                    for (s, w) in slot.row_mut(i).iter_mut().zip(weight_t.row(c)) {
                        *s = gi.mul_add(*w, *s);
                    }
                }
            }
            with_slot(nodes, *weight, |gw, nodes| {
                // Accumulate into the transposed layout, where each class is a
                // contiguous row, then fold back.
                let h = &nodes[input.0].value;
                let mut gw_t = Matrix::zeros(weight_t.rows(), weight_t.cols());
                for (i, &c) in classes.iter().enumerate() {
                    let gi = g.data()[i];
                    for (s, x) in gw_t.row_mut(c).iter_mut().zip(h.row(i)) {
                        *s = gi.mul_add(*x, *s);
                    }
                }
                gw.add_assign(&gw_t.transpose());
            });
            if let Some(slot) = slot(nodes, *bias) {
                for (i, &c) in classes.iter().enumerate() {
                    slot.data_mut()[c] += g.data()[i];
                }
            }
        }
    }
}

fn acc_map_const(nodes: &mut [Node], v: Var, value: f64) {
    if let Some(slot) = slot(nodes, v) {
        for s in slot.data_mut() {
            *s += value;
        }
    }
}
