//! Dense row-major matrices and a reverse-mode differentiation tape.
//!
//! Every value is a 2-D `f64` array; scalars are `1 x 1`. A [`Graph`] owns all
//! nodes created during one forward pass. Node ids are assigned in creation
//! order, so reverse id order is a valid topological order for backprop.

use crate::error::{Error, Result};

/// Plain matrix used for datasets, batches and inference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::contract(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::contract("hconcat: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Index of the largest entry per row; ties go to the smallest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows).map(|i| argmax(self.row(i))).collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = j;
        }
    }
    best
}

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)` of
/// shape `k x n`, everything row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths are checked above and the strides address exactly
    // the row-major (or transposed) layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Shift(Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Softmax(Tensor),
    Log(Tensor),
    Clamp(Tensor, f64, f64),
    Sum(Tensor),
    Mean(Tensor),
    Concat(Vec<Tensor>),
    Column(Tensor, usize),
    SquaredError(Tensor, Tensor),
    GradReverse(Tensor, f64),
    SoftAssign { z: Tensor, centroids: Tensor, dof: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            grad: vec![0.0; value.len()],
            value,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn leaf(&mut self, m: &Matrix, requires_grad: bool) -> Result<Tensor> {
        if m.rows == 0 || m.cols == 0 {
            return Err(Error::contract(format!(
                "tensor shape must be positive, got {}x{}",
                m.rows, m.cols
            )));
        }
        Ok(self.push(m.rows, m.cols, m.data.clone(), Op::Leaf, requires_grad))
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, m: &Matrix) -> Result<Tensor> {
        self.leaf(m, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn variable(&mut self, m: &Matrix) -> Result<Tensor> {
        self.leaf(m, true)
    }

    pub fn shape(&self, t: Tensor) -> [usize; 2] {
        let n = &self.nodes[t.0];
        [n.rows, n.cols]
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn grad(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn to_matrix(&self, t: Tensor) -> Matrix {
        let n = &self.nodes[t.0];
        Matrix { rows: n.rows, cols: n.cols, data: n.value.clone() }
    }

    pub fn grad_matrix(&self, t: Tensor) -> Matrix {
        let n = &self.nodes[t.0];
        Matrix { rows: n.rows, cols: n.cols, data: n.grad.clone() }
    }

    /// Value of a `1 x 1` tensor.
    pub fn scalar(&self, t: Tensor) -> Result<f64> {
        let n = &self.nodes[t.0];
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, got shape {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn unary(&mut self, x: Tensor, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let n = &self.nodes[x.0];
        let (rows, cols, rg) = (n.rows, n.cols, n.requires_grad);
        let value = n.value.iter().map(|&v| f(v)).collect();
        self.push(rows, cols, value, op, rg)
    }

    /// Shapes for a binary elementwise op: equal, or `b` a single row broadcast
    /// over the batch dimension of `a`.
    fn broadcast_check(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb[0] == 1 && sa[1] == sb[1]) {
            Ok(())
        } else {
            Err(Error::Dimension { op, left: sa, right: sb })
        }
    }

    fn binary(&mut self, a: Tensor, b: Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (rows, cols) = (na.rows, na.cols);
        let bcast = nb.rows == 1 && na.rows != 1;
        let value = na
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if bcast { nb.value[i % cols] } else { nb.value[i] };
                f(x, y)
            })
            .collect();
        let rg = na.requires_grad || nb.requires_grad;
        self.push(rows, cols, value, op, rg)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::Dimension { op: "matmul", left: sa, right: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, 0.0, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.broadcast_check("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.broadcast_check("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.broadcast_check("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    /// `x + c` elementwise.
    pub fn shift(&mut self, x: Tensor, c: f64) -> Tensor {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Tensor, slope: f64) -> Tensor {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, x: Tensor) -> Tensor {
        let n = &self.nodes[x.0];
        let (rows, cols, rg) = (n.rows, n.cols, n.requires_grad);
        let mut value = n.value.clone();
        for row in value.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(rows, cols, value, Op::Softmax(x), rg)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, x: Tensor) -> Result<Tensor> {
        if let Some(&bad) = self.value(x).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}; clamp probabilities first"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn clamp(&mut self, x: Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(1, 1, vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires_grad(x);
        self.push(1, 1, vec![s], Op::Mean(x), rg)
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = self.shape(first)[0];
        for &p in &parts[1..] {
            if self.shape(p)[0] != rows {
                return Err(Error::Dimension { op: "concat", left: self.shape(first), right: self.shape(p) });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(rows, cols, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Column `j` as an `n x 1` tensor.
    pub fn column(&mut self, x: Tensor, j: usize) -> Result<Tensor> {
        let [rows, cols] = self.shape(x);
        if j >= cols {
            return Err(Error::Dimension { op: "column", left: [rows, cols], right: [1, j + 1] });
        }
        let value = self.value(x).chunks(cols).map(|r| r[j]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(rows, 1, value, Op::Column(x, j), rg))
    }

    /// Mean over rows of the squared Euclidean distance between rows of `a` and `b`.
    pub fn squared_error(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op: "squared_error", left: sa, right: sb });
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(1, 1, vec![s / sa[0] as f64], Op::SquaredError(a, b), rg))
    }

    /// Identity on the forward pass; multiplies the upstream gradient by
    /// `-scale` on the backward pass.
    pub fn grad_reverse(&mut self, x: Tensor, scale: f64) -> Result<Tensor> {
        if !scale.is_finite() {
            return Err(Error::contract(format!("grad_reverse scale must be finite, got {scale}")));
        }
        Ok(self.unary(x, Op::GradReverse(x, scale), |v| v))
    }

    /// Student's-t soft assignment of embeddings `z` (`n x e`) to centroids
    /// (`c x e`), normalised over each row. `dof` is the degrees of freedom.
    pub fn soft_assign(&mut self, z: Tensor, centroids: Tensor, dof: f64) -> Result<Tensor> {
        let (sz, sc) = (self.shape(z), self.shape(centroids));
        if sz[1] != sc[1] {
            return Err(Error::Dimension { op: "soft_assign", left: sz, right: sc });
        }
        let zm = self.to_matrix(z);
        let cm = self.to_matrix(centroids);
        let q = student_t_assign(&zm, &cm, dof);
        let rg = self.requires_grad(z) || self.requires_grad(centroids);
        Ok(self.push(sz[0], sc[0], q.data, Op::SoftAssign { z, centroids, dof }, rg))
    }

    /// Accumulates `d loss / d node` into every node reachable from `loss`.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            let n = &self.nodes[loss.0];
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {}x{}",
                n.rows, n.cols
            )));
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop_node(before, node);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-normalised Student's-t kernel between embeddings and centroids.
pub(crate) fn student_t_assign(z: &Matrix, centroids: &Matrix, dof: f64) -> Matrix {
    let (n, c) = (z.rows, centroids.rows);
    let power = -(dof + 1.0) / 2.0;
    let mut q = Matrix::zeros(n, c);
    for i in 0..n {
        let zi = z.row(i);
        let row = q.row_mut(i);
        for (j, out) in row.iter_mut().enumerate() {
            let d2: f64 = zi.iter().zip(centroids.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            *out = (1.0 + d2 / dof).powf(power);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    q
}

fn accumulate(dst: &mut Node, contrib: impl Iterator<Item = f64>) {
    for (g, c) in dst.grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

/// Adds the gradient of a broadcast operand: sums over rows when `dst` is a
/// single row broadcast across `g`'s batch.
fn accumulate_broadcast(dst: &mut Node, g: &[f64], cols: usize, sign: f64) {
    if dst.grad.len() == g.len() {
        for (d, v) in dst.grad.iter_mut().zip(g) {
            *d += sign * v;
        }
    } else {
        for row in g.chunks(cols) {
            for (d, v) in dst.grad.iter_mut().zip(row) {
                *d += sign * v;
            }
        }
    }
}

fn backprop_node(before: &mut [Node], node: &Node) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (before[a.0].rows, before[a.0].cols);
            let n = before[b.0].cols;
            if before[a.0].requires_grad {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, &before[b.0].value, true, 0.0, &mut da);
                accumulate(&mut before[a.0], da.into_iter());
            }
            if before[b.0].requires_grad {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, &before[a.0].value, true, g, false, 0.0, &mut db);
                accumulate(&mut before[b.0], db.into_iter());
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if before[a.0].requires_grad {
                accumulate_broadcast(&mut before[a.0], g, node.cols, 1.0);
            }
            if before[b.0].requires_grad {
                accumulate_broadcast(&mut before[b.0], g, node.cols, sign);
            }
        }
        Op::Mul(a, b) => {
            let cols = node.cols;
            let bcast = before[b.0].rows == 1 && node.rows != 1;
            if before[a.0].requires_grad {
                let bv = before[b.0].value.clone();
                let contrib = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * if bcast { bv[i % cols] } else { bv[i] })
                    .collect::<Vec<_>>();
                accumulate(&mut before[a.0], contrib.into_iter());
            }
            if before[b.0].requires_grad {
                let prod: Vec<f64> = g.iter().zip(&before[a.0].value).map(|(gi, x)| gi * x).collect();
                accumulate_broadcast(&mut before[b.0], &prod, cols, 1.0);
            }
        }
        Op::Scale(x, c) => accumulate(&mut before[x.0], g.iter().map(|v| c * v)),
        Op::Shift(x) => accumulate(&mut before[x.0], g.iter().copied()),
        Op::Relu(x) => {
            let mask: Vec<f64> = before[x.0].value.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            accumulate(&mut before[x.0], g.iter().zip(mask).map(|(gi, m)| gi * m));
        }
        Op::LeakyRelu(x, slope) => {
            let mask: Vec<f64> = before[x.0].value.iter().map(|&v| if v > 0.0 { 1.0 } else { *slope }).collect();
            accumulate(&mut before[x.0], g.iter().zip(mask).map(|(gi, m)| gi * m));
        }
        Op::Sigmoid(x) => {
            accumulate(&mut before[x.0], g.iter().zip(&node.value).map(|(gi, y)| gi * y * (1.0 - y)));
        }
        Op::Softmax(x) => {
            let cols = node.cols;
            let mut dx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(cols).zip(node.value.chunks(cols)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                dx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
            }
            accumulate(&mut before[x.0], dx.into_iter());
        }
        Op::Log(x) => {
            let xv = before[x.0].value.clone();
            accumulate(&mut before[x.0], g.iter().zip(xv).map(|(gi, v)| gi / v));
        }
        Op::Clamp(x, lo, hi) => {
            let mask: Vec<f64> = before[x.0]
                .value
                .iter()
                .map(|&v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 })
                .collect();
            accumulate(&mut before[x.0], g.iter().zip(mask).map(|(gi, m)| gi * m));
        }
        Op::Sum(x) => {
            let g0 = g[0];
            let len = before[x.0].value.len();
            accumulate(&mut before[x.0], std::iter::repeat_n(g0, len));
        }
        Op::Mean(x) => {
            let len = before[x.0].value.len();
            let g0 = g[0] / len as f64;
            accumulate(&mut before[x.0], std::iter::repeat_n(g0, len));
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let c = before[p.0].cols;
                if before[p.0].requires_grad {
                    let contrib: Vec<f64> = g
                        .chunks(node.cols)
                        .flat_map(|row| row[offset..offset + c].iter().copied())
                        .collect();
                    accumulate(&mut before[p.0], contrib.into_iter());
                }
                offset += c;
            }
        }
        Op::Column(x, j) => {
            let cols = before[x.0].cols;
            let dst = &mut before[x.0];
            for (i, gi) in g.iter().enumerate() {
                dst.grad[i * cols + j] += gi;
            }
        }
        Op::SquaredError(a, b) => {
            let scale = 2.0 * g[0] / before[a.0].rows as f64;
            let diff: Vec<f64> = before[a.0]
                .value
                .iter()
                .zip(&before[b.0].value)
                .map(|(x, y)| scale * (x - y))
                .collect();
            if before[a.0].requires_grad {
                accumulate(&mut before[a.0], diff.iter().copied());
            }
            if before[b.0].requires_grad {
                accumulate(&mut before[b.0], diff.iter().map(|v| -v));
            }
        }
        Op::GradReverse(x, scale) => accumulate(&mut before[x.0], g.iter().map(|v| -scale * v)),
        Op::SoftAssign { z, centroids, dof } => {
            let q = &node.value;
            let c = node.cols;
            let e = before[z.0].cols;
            let zv = before[z.0].value.clone();
            let mv = before[centroids.0].value.clone();
            let coef = (dof + 1.0) / dof;
            let mut dz = vec![0.0; zv.len()];
            let mut dmu = vec![0.0; mv.len()];
            for (i, (gr, qr)) in g.chunks(c).zip(q.chunks(c)).enumerate() {
                // dL/ds_ij where q_i = softmax(s_i), s_ij = -(dof+1)/2 ln(1 + d_ij^2/dof)
                let dot: f64 = gr.iter().zip(qr).map(|(a, b)| a * b).sum();
                let zi = &zv[i * e..(i + 1) * e];
                for j in 0..c {
                    let ds = qr[j] * (gr[j] - dot);
                    let mu = &mv[j * e..(j + 1) * e];
                    let d2: f64 = zi.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    let w = ds * coef / (1.0 + d2 / dof);
                    for t in 0..e {
                        let diff = zi[t] - mu[t];
                        dz[i * e + t] -= w * diff;
                        dmu[j * e + t] += w * diff;
                    }
                }
            }
            if before[z.0].requires_grad {
                accumulate(&mut before[z.0], dz.into_iter());
            }
            if before[centroids.0].requires_grad {
                accumulate(&mut before[centroids.0], dmu.into_iter());
            }
        }
    }
}
