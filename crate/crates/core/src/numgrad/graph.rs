//! Dynamically recorded reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! sweeps the tape once in reverse and returns the adjoint of every node that
//! depends on a leaf. Constants (including detached values) never receive or
//! forward adjoints.

use super::mat::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    LnFloor(Var, f64),
    Pow(Var, f64),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    CausalMean(Var),
    NormalizeRows(Var, Vec<f64>),
    NormRows(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    Sum(Var),
    SumRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// ∂loss/∂v; all-zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.adjoints[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.adjoints[v.0].is_some()
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

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let tracked = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, &[])
    }

    /// Copies the current value of `v` into a constant node; no adjoint flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1);
        assert_eq!(av.cols, rv.cols, "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every entry of `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let v = self.value(a).scaled(c);
        self.push(v, Op::MulScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scaled(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    /// `ln(max(x, floor))`; the adjoint vanishes where the floor is active.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::LnFloor(a, floor), &[a])
    }

    /// Elementwise power for nonnegative inputs.
    pub fn pow(&mut self, a: Var, exponent: f64) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).powf(exponent));
        self.push(v, Op::Pow(a, exponent), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape changes element count");
        let v = Mat::from_vec(rows, cols, src.data.clone());
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        let v = Mat::from_vec(rows, cols, data);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let v = Mat::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    /// Row `t` of the output is the mean of rows `0..=t` of `a`.
    pub fn causal_mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(m.rows, m.cols);
        let mut acc = vec![0.0; m.cols];
        for r in 0..m.rows {
            for (s, x) in acc.iter_mut().zip(m.row(r)) {
                *s += x;
            }
            let inv = 1.0 / (r + 1) as f64;
            for (o, s) in out.row_mut(r).iter_mut().zip(&acc) {
                *o = s * inv;
            }
        }
        self.push(out, Op::CausalMean(a), &[a])
    }

    /// L2-normalizes each row. Rows must be nonzero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows);
        for r in 0..m.rows {
            let n = dot(m.row(r), m.row(r)).sqrt();
            debug_assert!(n > 0.0, "normalize_rows on a zero row");
            norms.push(n);
            for x in out.row_mut(r) {
                *x /= n;
            }
        }
        self.push(out, Op::NormalizeRows(a, norms), &[a])
    }

    /// Euclidean norm of each row, as an `r × 1` column.
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| dot(m.row(r), m.row(r)).sqrt()).collect();
        let v = Mat::from_vec(m.rows, 1, data);
        self.push(v, Op::NormRows(a), &[a])
    }

    /// Row-wise softmax of `a / tau`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows {
            softmax_in_place(out.row_mut(r), tau);
        }
        self.push(out, Op::SoftmaxRows(a, tau), &[a])
    }

    /// Row-wise log-softmax of `a / tau`.
    pub fn log_softmax_rows(&mut self, a: Var, tau: f64) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows {
            let row = out.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|x| ((x - max) / tau).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x = (*x - max) / tau - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a, tau), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let v = Mat::from_vec(m.rows, 1, data);
        self.push(v, Op::SumRows(a), &[a])
    }

    /// Row-wise dot products of two equally shaped matrices, as an `r × 1` column.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_rows(p)
    }

    /// Single-pass reverse sweep from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut adj: Vec<Option<Mat>> = vec![None; n];
        adj[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }

        Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, adj: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, d: Mat| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };

        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, x) in dr.data.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                send(*row, dr);
            }
            Op::MulScalar(a, s) => {
                let c = val(*s).item();
                send(*a, g.scaled(c));
                send(*s, Mat::scalar(dot(&g.data, &val(*a).data)));
            }
            Op::Scale(a, c) => send(*a, g.scaled(*c)),
            Op::Offset(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                send(*a, g.matmul_t(val(*b)));
                send(*b, val(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                send(*a, g.matmul(val(*b)));
                send(*b, g.t_matmul(val(*a)));
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::Abs(a) => send(*a, g.zip_map(val(*a), |d, x| d * sign0(x))),
            Op::LnFloor(a, floor) => send(
                *a,
                g.zip_map(val(*a), |d, x| if x > *floor { d / x } else { 0.0 }),
            ),
            Op::Pow(a, e) => send(
                *a,
                g.zip_map(val(*a), |d, x| {
                    if x > 0.0 {
                        d * e * x.powf(e - 1.0)
                    } else if *e == 1.0 {
                        d
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Mat::from_vec(r, c, g.data.clone()));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    let d = Mat::from_vec(r, c, g.data[start * c..(start + r) * c].to_vec());
                    start += r;
                    send(*p, d);
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Mat::zeros(r, c);
                d.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                send(*a, d);
            }
            Op::CausalMean(a) => {
                // d x_s = Σ_{t ≥ s} g_t / (t + 1)
                let (r, c) = g.shape();
                let mut d = Mat::zeros(r, c);
                let mut acc = vec![0.0; c];
                for t in (0..r).rev() {
                    let inv = 1.0 / (t + 1) as f64;
                    for (s, x) in acc.iter_mut().zip(g.row(t)) {
                        *s += x * inv;
                    }
                    d.row_mut(t).copy_from_slice(&acc);
                }
                send(*a, d);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let gy = dot(g.row(r), y.row(r));
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gi - yi * gy) / norms[r];
                    }
                }
                send(*a, d);
            }
            Op::NormRows(a) => {
                let x = val(*a);
                let mut d = Mat::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let n = node.value.data[r];
                    if n > 0.0 {
                        let k = g.data[r] / n;
                        for (o, xi) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = k * xi;
                        }
                    }
                }
                send(*a, d);
            }
            Op::SoftmaxRows(a, tau) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let gy = dot(g.row(r), y.row(r));
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yi * (gi - gy) / tau;
                    }
                }
                send(*a, d);
            }
            Op::LogSoftmaxRows(a, tau) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let gs: f64 = g.row(r).iter().sum();
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gi - yi.exp() * gs) / tau;
                    }
                }
                send(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Mat::from_vec(r, c, vec![g.item(); r * c]));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).fill(g.data[i]);
                }
                send(*a, d);
            }
        }
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

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / tau).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
