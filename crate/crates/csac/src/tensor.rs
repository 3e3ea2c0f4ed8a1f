//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! The autodiff core is a tape: every operation appends a node holding its
//! forward value and the indices of its inputs, and [`Tape::backward`] walks
//! the nodes in reverse construction order (which is already a topological
//! order) accumulating gradients. A fresh tape is built per training step;
//! persistent values such as network parameters live outside the tape as
//! plain [`Tensor`]s and are bound in as leaves each step.
//!
//! All values are `f64`. Shapes are `rows x cols` with the batch dimension
//! in `rows`; a vector is a `1 x d` tensor.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("backward target must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

/// A dense row-major matrix of `f64` values.
///
/// `grad`, when present, always has the same shape as `data`; it is filled
/// by [`Tape::backward`] for parameter leaves (overwriting any previous
/// contents) and consumed by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data, grad: None }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    /// Builds a tensor from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows in from_rows");
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.numel() as f64
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.fill(0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

/// C = A(m x k) * B(k x n), accumulated into `out` (must be zeroed).
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// dA += G(m x n) * B^T, i.e. dA[i,p] += dot(G[i,:], B[p,:]).
fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (p, dav) in da_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            *dav += s;
        }
    }
}

/// dB += A^T * G, i.e. dB[p,j] += sum_i A[i,p] * G[i,j].
fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dbv, &gv) in db_row.iter_mut().zip(g_row) {
                *dbv += av * gv;
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── tape ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// x (M x d) plus a 1 x d bias broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MinElem(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Neg(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    /// x * scale + shift with constant scale (shift has no gradient).
    Affine(Var, f64),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Records a computation graph for one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    /// Per-node gradients, filled by the last `backward` call.
    grads: Vec<Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(64), grads: Vec::new() }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, data, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Binds a constant leaf (no gradient tracked).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.rows, t.cols, t.data.clone(), false)
    }

    /// Binds a parameter leaf whose gradient will be computed by `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.rows, t.cols, t.data.clone(), true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.rows, n.cols, n.data.clone())
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn item(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.data.len(), 1, "item() on a {}x{} node", n.rows, n.cols);
        n.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims: {}x{} * {}x{}", m, ka, kb, n);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), m, n, out, ng)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, d) = self.shape(x);
        let (br, bc) = self.shape(bias);
        assert!(br == 1 && bc == d, "add_bias: {}x{} + {}x{}", m, d, br, bc);
        let b = &self.nodes[bias.0].data;
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(Op::AddBias(x, bias), m, d, out, ng)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (m, d) = self.shape(a);
        assert_eq!((m, d), self.shape(b), "elementwise op shape mismatch");
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(op(a, b), m, d, out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    /// Elementwise minimum; gradient routes to the smaller input (ties to the first).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::MinElem, f64::min)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (m, d) = self.shape(x);
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(op, m, d, out, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps to `[lo, hi]`; the gradient is passed through strictly inside
    /// the interval and zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// x * scale + shift, with scale/shift held constant (no gradient path).
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| v * scale + shift)
    }

    /// Per-row sum: M x d -> M x 1.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, d) = self.shape(x);
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .chunks_exact(d)
            .map(|row| row.iter().sum())
            .collect();
        let ng = self.needs(x);
        self.push(Op::RowSum(x), m, 1, out, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(Op::SumAll(x), 1, 1, vec![s], ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(Op::MeanAll(x), 1, 1, vec![s / n], ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, da) = self.shape(a);
        let (mb, db) = self.shape(b);
        assert_eq!(ma, mb, "concat_cols row mismatch: {} vs {}", ma, mb);
        let mut out = Vec::with_capacity(ma * (da + db));
        for i in 0..ma {
            out.extend_from_slice(&self.nodes[a.0].data[i * da..(i + 1) * da]);
            out.extend_from_slice(&self.nodes[b.0].data[i * db..(i + 1) * db]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), ma, da + db, out, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, d) = self.shape(x);
        assert!(start + len <= d, "slice_cols {}..{} out of {} columns", start, start + len, d);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.nodes[x.0].data[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(x);
        self.push(Op::SliceCols(x, start, len), m, len, out, ng)
    }

    /// Reverse pass from a scalar loss. Gradients of parameter leaves are
    /// retrievable afterwards via [`Tape::grad`]; each call recomputes them
    /// from scratch (overwrite semantics — nothing accumulates across calls).
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: r, cols: c });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| if node.needs_grad { vec![0.0; node.data.len()] } else { Vec::new() })
            .collect();
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any parameter; all gradients are zero.
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad
                || grads[i].is_empty()
                || matches!(self.nodes[i].op, Op::Leaf)
            {
                continue;
            }
            // Take the output gradient out to satisfy the borrow checker;
            // node i is never its own input, and interior node gradients are
            // not read back after their own backward step.
            let g = std::mem::take(&mut grads[i]);
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(a);
                    let (_, nn) = self.shape(b);
                    if self.needs(a) {
                        let b_data = &self.nodes[b.0].data;
                        matmul_grad_lhs(&g, b_data, m, k, nn, &mut grads[a.0]);
                    }
                    if self.needs(b) {
                        let a_data = &self.nodes[a.0].data;
                        matmul_grad_rhs(a_data, &g, m, k, nn, &mut grads[b.0]);
                    }
                }
                Op::AddBias(x, bias) => {
                    let (_, d) = self.shape(x);
                    if self.needs(x) {
                        for (gx, &gv) in grads[x.0].iter_mut().zip(&g) {
                            *gx += gv;
                        }
                    }
                    if self.needs(bias) {
                        for row in g.chunks_exact(d) {
                            for (gb, &gv) in grads[bias.0].iter_mut().zip(row) {
                                *gb += gv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += gv;
                        }
                    }
                    if self.needs(b) {
                        for (gb, &gv) in grads[b.0].iter_mut().zip(&g) {
                            *gb += gv;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += gv;
                        }
                    }
                    if self.needs(b) {
                        for (gb, &gv) in grads[b.0].iter_mut().zip(&g) {
                            *gb -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let bd = &self.nodes[b.0].data;
                        for ((ga, &gv), &bv) in grads[a.0].iter_mut().zip(&g).zip(bd) {
                            *ga += gv * bv;
                        }
                    }
                    if self.needs(b) {
                        let ad = &self.nodes[a.0].data;
                        for ((gb, &gv), &av) in grads[b.0].iter_mut().zip(&g).zip(ad) {
                            *gb += gv * av;
                        }
                    }
                }
                Op::MinElem(a, b) => {
                    let pick_a: Vec<bool> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&x, &y)| x <= y)
                        .collect();
                    if self.needs(a) {
                        for ((ga, &gv), &pa) in grads[a.0].iter_mut().zip(&g).zip(&pick_a) {
                            if pa {
                                *ga += gv;
                            }
                        }
                    }
                    if self.needs(b) {
                        for ((gb, &gv), &pa) in grads[b.0].iter_mut().zip(&g).zip(&pick_a) {
                            if !pa {
                                *gb += gv;
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xd = &self.nodes[x.0].data;
                    for ((gx, &gv), &xv) in grads[x.0].iter_mut().zip(&g).zip(xd) {
                        if xv > 0.0 {
                            *gx += gv;
                        }
                    }
                }
                Op::Tanh(x) => {
                    let od = &self.nodes[i].data;
                    for ((gx, &gv), &t) in grads[x.0].iter_mut().zip(&g).zip(od) {
                        *gx += gv * (1.0 - t * t);
                    }
                }
                Op::Exp(x) => {
                    let od = &self.nodes[i].data;
                    for ((gx, &gv), &e) in grads[x.0].iter_mut().zip(&g).zip(od) {
                        *gx += gv * e;
                    }
                }
                Op::Softplus(x) => {
                    let xd = &self.nodes[x.0].data;
                    for ((gx, &gv), &xv) in grads[x.0].iter_mut().zip(&g).zip(xd) {
                        *gx += gv * sigmoid(xv);
                    }
                }
                Op::Neg(x) => {
                    for (gx, &gv) in grads[x.0].iter_mut().zip(&g) {
                        *gx -= gv;
                    }
                }
                Op::Square(x) => {
                    let xd = &self.nodes[x.0].data;
                    for ((gx, &gv), &xv) in grads[x.0].iter_mut().zip(&g).zip(xd) {
                        *gx += gv * 2.0 * xv;
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let xd = &self.nodes[x.0].data;
                    for ((gx, &gv), &xv) in grads[x.0].iter_mut().zip(&g).zip(xd) {
                        if xv >= lo && xv <= hi {
                            *gx += gv;
                        }
                    }
                }
                Op::Affine(x, scale) => {
                    for (gx, &gv) in grads[x.0].iter_mut().zip(&g) {
                        *gx += gv * scale;
                    }
                }
                Op::RowSum(x) => {
                    let (_, d) = self.shape(x);
                    for (row, &gv) in grads[x.0].chunks_exact_mut(d).zip(&g) {
                        for gx in row {
                            *gx += gv;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g[0];
                    for gx in grads[x.0].iter_mut() {
                        *gx += gv;
                    }
                }
                Op::MeanAll(x) => {
                    let gv = g[0] / self.nodes[x.0].data.len() as f64;
                    for gx in grads[x.0].iter_mut() {
                        *gx += gv;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, da) = self.shape(a);
                    let (_, db) = self.shape(b);
                    let w = da + db;
                    for r in 0..m {
                        let g_row = &g[r * w..(r + 1) * w];
                        if self.needs(a) {
                            for (ga, &gv) in grads[a.0][r * da..(r + 1) * da].iter_mut().zip(&g_row[..da]) {
                                *ga += gv;
                            }
                        }
                        if self.needs(b) {
                            for (gb, &gv) in grads[b.0][r * db..(r + 1) * db].iter_mut().zip(&g_row[da..]) {
                                *gb += gv;
                            }
                        }
                    }
                }
                Op::SliceCols(x, start, len) => {
                    let (m, d) = self.shape(x);
                    for r in 0..m {
                        for (j, &gv) in g[r * len..(r + 1) * len].iter().enumerate() {
                            grads[x.0][r * d + start + j] += gv;
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> &[f64] {
        assert!(
            !self.grads.is_empty(),
            "grad() called before backward()"
        );
        &self.grads[v.0]
    }

    /// Copies the gradient of `v` into the `grad` slot of `target`
    /// (overwriting it), for parameter tensors living outside the tape.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) {
        let g = self.grad(v);
        assert_eq!(g.len(), target.numel(), "write_grad shape mismatch");
        match &mut target.grad {
            Some(buf) => buf.copy_from_slice(g),
            None => target.grad = Some(g.to_vec()),
        }
    }
}
