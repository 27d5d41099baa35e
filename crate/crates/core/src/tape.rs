//! A small tensor-level reverse-mode tape.
//!
//! Values are row-major `f64` matrices. Every primitive the potential needs
//! is recorded with its inputs; [`Tape::gradient`] walks the nodes in reverse
//! insertion order (a valid reverse topological order) exactly once. The tape
//! also counts floating-point operations of the forward pass.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(1, 1, vec![x])
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MatMul(usize, usize),
    Silu(usize),
    Recip(usize),
    Sum(usize),
    MeanRows(usize),
    Softmax(usize),
    Gather(usize, Arc<[usize]>),
    ScatterAdd(usize, Arc<[usize]>),
    RowNorm(usize),
    RmsNorm(usize, f64),
    Rbf(usize, Arc<[f64]>, f64),
    Envelope(usize, f64),
    MixExperts(usize, usize),
    ScaleBy(usize, usize, usize),
    ConcatCols(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// One tape per evaluation; not shared between threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y (n×out) = x (n×in) · wᵀ` with `w` stored `out×in`.
fn matmul_xwt(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, k, m) = (x.rows, x.cols, w.rows);
    let mut y = Tensor::zeros(n, m);
    if n == 0 || m == 0 || k == 0 {
        return y;
    }
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            x.data.as_ptr(), k as isize, 1,
            w.data.as_ptr(), 1, k as isize,
            0.0, y.data.as_mut_ptr(), m as isize, 1,
        );
    }
    y
}

/// `dx (n×in) = dy (n×out) · w (out×in)`.
fn matmul_dyw(dy: &Tensor, w: &Tensor) -> Tensor {
    let (n, m, k) = (dy.rows, dy.cols, w.cols);
    let mut dx = Tensor::zeros(n, k);
    if n == 0 || m == 0 || k == 0 {
        return dx;
    }
    unsafe {
        matrixmultiply::dgemm(
            n, m, k, 1.0,
            dy.data.as_ptr(), m as isize, 1,
            w.data.as_ptr(), k as isize, 1,
            0.0, dx.data.as_mut_ptr(), k as isize, 1,
        );
    }
    dx
}

/// `dw (out×in) = dyᵀ (out×n) · x (n×in)`.
fn matmul_dytx(dy: &Tensor, x: &Tensor) -> Tensor {
    let (n, m, k) = (dy.rows, dy.cols, x.cols);
    let mut dw = Tensor::zeros(m, k);
    if n == 0 || m == 0 || k == 0 {
        return dw;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            dy.data.as_ptr(), 1, m as isize,
            x.data.as_ptr(), k as isize, 1,
            0.0, dw.data.as_mut_ptr(), k as isize, 1,
        );
    }
    dw
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), flops: 0 }
    }

    /// Forward FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, flops: usize) -> Var {
        self.flops += flops as u64;
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.idx)
    }

    fn val(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.val(v).data[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, 0)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.val(a), self.val(b));
        if !x.same_shape(y) {
            return Err(Error::shape(name, format!("{}x{} vs {}x{}", x.rows, x.cols, y.rows, y.cols)));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        Ok(Tensor::new(x.rows, x.cols, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |p, q| p + q)?;
        let n = t.len();
        Ok(self.push(t, Op::Add(a.idx, b.idx), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |p, q| p - q)?;
        let n = t.len();
        Ok(self.push(t, Op::Sub(a.idx, b.idx), n))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |p, q| p * q)?;
        let n = t.len();
        Ok(self.push(t, Op::Mul(a.idx, b.idx), n))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.val(a);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * c).collect());
        let n = t.len();
        self.push(t, Op::Scale(a.idx, c), n)
    }

    /// `a (n×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.val(a), self.val(row));
        if r.rows != 1 || r.cols != x.cols {
            return Err(Error::shape("add_row", format!("{}x{} + {}x{}", x.rows, x.cols, r.rows, r.cols)));
        }
        let mut t = x.clone();
        for chunk in t.data.chunks_mut(x.cols.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        let n = t.len();
        Ok(self.push(t, Op::AddRow(a.idx, row.idx), n))
    }

    /// `a (n×c) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, s) = (self.val(a), self.val(col));
        if s.cols != 1 || s.rows != x.rows {
            return Err(Error::shape("mul_col", format!("{}x{} * {}x{}", x.rows, x.cols, s.rows, s.cols)));
        }
        let mut t = x.clone();
        for (r, chunk) in t.data.chunks_mut(x.cols.max(1)).enumerate() {
            for v in chunk.iter_mut() {
                *v *= s.data[r];
            }
        }
        let n = t.len();
        Ok(self.push(t, Op::MulCol(a.idx, col.idx), n))
    }

    /// `x (n×in) · wᵀ` for a weight `w` stored as `out×in`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        if xv.cols != wv.cols {
            return Err(Error::shape("matmul", format!("x is {}x{}, w is {}x{}", xv.rows, xv.cols, wv.rows, wv.cols)));
        }
        let flops = 2 * xv.rows * xv.cols * wv.rows;
        let t = matmul_xwt(xv, wv);
        Ok(self.push(t, Op::MatMul(x.idx, w.idx), flops))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * sigmoid(*v)).collect());
        let n = 4 * t.len();
        self.push(t, Op::Silu(a.idx), n)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| 1.0 / v).collect());
        let n = t.len();
        self.push(t, Op::Recip(a.idx), n)
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let n = x.len();
        let t = Tensor::scalar(x.data.iter().sum());
        self.push(t, Op::Sum(a.idx), n)
    }

    /// Column means over rows, as a 1×c tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        if x.rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; x.cols];
        for r in 0..x.rows {
            for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let n = x.len();
        Ok(self.push(Tensor::row(out), Op::MeanRows(a.idx), n))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let mut t = x.clone();
        for chunk in t.data.chunks_mut(x.cols.max(1)) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in chunk.iter_mut() {
                *v /= z;
            }
        }
        let n = 4 * t.len();
        self.push(t, Op::Softmax(a.idx), n)
    }

    /// Rows of `a` picked by `idx`.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let x = self.val(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols);
        for &r in idx.iter() {
            if r >= x.rows {
                return Err(Error::shape("gather", format!("row {r} of {}", x.rows)));
            }
            data.extend_from_slice(x.row_slice(r));
        }
        let t = Tensor::new(idx.len(), x.cols, data);
        Ok(self.push(t, Op::Gather(a.idx, idx), 0))
    }

    /// `out[idx[r]] += a[r]` into an `n×c` result.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<[usize]>, n: usize) -> Result<Var> {
        let x = self.val(a);
        if idx.len() != x.rows {
            return Err(Error::shape("scatter_add", format!("{} indices for {} rows", idx.len(), x.rows)));
        }
        let mut t = Tensor::zeros(n, x.cols);
        for (r, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return Err(Error::shape("scatter_add", format!("row {dst} of {n}")));
            }
            let c = x.cols;
            for k in 0..c {
                t.data[dst * c + k] += x.data[r * c + k];
            }
        }
        let flops = x.len();
        Ok(self.push(t, Op::ScatterAdd(a.idx, idx), flops))
    }

    /// Euclidean norm of each row, as `n×1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let data: Vec<f64> = (0..x.rows).map(|r| x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let n = 2 * x.len() + x.rows;
        self.push(Tensor::new(x.rows, 1, data), Op::RowNorm(a.idx), n)
    }

    /// `x / sqrt(mean(x²) + eps)` per row.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.val(a);
        let mut t = x.clone();
        let c = x.cols.max(1);
        for chunk in t.data.chunks_mut(c) {
            let ms = chunk.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v *= inv);
        }
        let n = 4 * t.len();
        self.push(t, Op::RmsNorm(a.idx, eps), n)
    }

    /// Gaussian radial basis `exp(-γ (r − μ_k)²)` of an `n×1` input.
    pub fn rbf(&mut self, r: Var, centers: Arc<[f64]>, gamma: f64) -> Result<Var> {
        let x = self.val(r);
        if x.cols != 1 {
            return Err(Error::shape("rbf", "input must be n×1"));
        }
        let k = centers.len();
        let mut data = Vec::with_capacity(x.rows * k);
        for &d in &x.data {
            for &mu in centers.iter() {
                data.push((-gamma * (d - mu) * (d - mu)).exp());
            }
        }
        let t = Tensor::new(x.rows, k, data);
        let n = 4 * t.len();
        Ok(self.push(t, Op::Rbf(r.idx, centers, gamma), n))
    }

    /// Smooth cutoff `(1 − (r/rc)²)³` for `r < rc`, zero beyond.
    pub fn envelope(&mut self, r: Var, cutoff: f64) -> Var {
        let x = self.val(r);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|&d| envelope(d, cutoff)).collect());
        let n = 6 * t.len();
        self.push(t, Op::Envelope(r.idx, cutoff), n)
    }

    /// `Σ_k α_k W_k` where `experts` is `K × (out·in)` and `alpha` is `1×K`.
    pub fn mix_experts(&mut self, experts: Var, alpha: Var, out: usize, inp: usize) -> Result<Var> {
        let (e, a) = (self.val(experts), self.val(alpha));
        if a.rows != 1 || a.cols != e.rows || e.cols != out * inp {
            return Err(Error::shape(
                "mix_experts",
                format!("experts {}x{}, alpha {}x{}, target {}x{}", e.rows, e.cols, a.rows, a.cols, out, inp),
            ));
        }
        let mut w = vec![0.0; out * inp];
        for k in 0..e.rows {
            let ak = a.data[k];
            for (o, v) in w.iter_mut().zip(e.row_slice(k)) {
                *o += ak * v;
            }
        }
        let flops = 2 * e.len();
        Ok(self.push(Tensor::new(out, inp, w), Op::MixExperts(experts.idx, alpha.idx), flops))
    }

    /// `a · s[0, k]`.
    pub fn scale_by(&mut self, a: Var, s: Var, k: usize) -> Result<Var> {
        let sv = self.val(s);
        if k >= sv.len() {
            return Err(Error::shape("scale_by", format!("entry {k} of {}", sv.len())));
        }
        let c = sv.data[k];
        let x = self.val(a);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * c).collect());
        let n = t.len();
        Ok(self.push(t, Op::ScaleBy(a.idx, s.idx, k), n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.val(parts[0]).rows;
        let mut cols = 0;
        for p in parts {
            let t = self.val(*p);
            if t.rows != rows {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            cols += t.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(*p).row_slice(r));
            }
        }
        let idx = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatCols(idx), 0))
    }

    /// Reverse pass from a 1×1 `output`; returns one adjoint per `wrt`,
    /// zero-filled when `output` does not depend on it.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out = self.check(output)?;
        for w in wrt {
            self.check(*w)?;
        }
        let ov = &self.nodes[out].value;
        if ov.len() != 1 {
            return Err(Error::shape("gradient", format!("output must be scalar, got {}x{}", ov.rows, ov.cols)));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; out + 1];
        adj[out] = Some(Tensor::scalar(1.0));
        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.idx).and_then(|a| a.clone()) {
                Some(t) => t,
                None => {
                    let v = &self.nodes[w.idx].value;
                    Tensor::zeros(v.rows, v.cols)
                }
            })
            .collect())
    }

    fn backprop(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        fn acc(adj: &mut [Option<Tensor>], j: usize, t: Tensor) {
            match &mut adj[j] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }
        let node = &self.nodes[i];
        let y = &node.value;
        let map = |x: &Tensor, f: &dyn Fn(usize) -> f64| Tensor::new(x.rows, x.cols, (0..x.len()).map(f).collect());
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, map(g, &|k| -g.data[k]));
            }
            Op::Mul(a, b) => {
                let (x, z) = (&self.nodes[*a].value, &self.nodes[*b].value);
                acc(adj, *a, map(g, &|k| g.data[k] * z.data[k]));
                acc(adj, *b, map(g, &|k| g.data[k] * x.data[k]));
            }
            Op::Scale(a, c) => acc(adj, *a, map(g, &|k| g.data[k] * c)),
            Op::AddRow(a, row) => {
                acc(adj, *a, g.clone());
                let mut dr = vec![0.0; g.cols];
                for r in 0..g.rows {
                    for (d, v) in dr.iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
                acc(adj, *row, Tensor::row(dr));
            }
            Op::MulCol(a, col) => {
                let (x, s) = (&self.nodes[*a].value, &self.nodes[*col].value);
                let c = g.cols.max(1);
                acc(adj, *a, map(g, &|k| g.data[k] * s.data[k / c]));
                let ds = (0..g.rows)
                    .map(|r| g.row_slice(r).iter().zip(x.row_slice(r)).map(|(p, q)| p * q).sum())
                    .collect();
                acc(adj, *col, Tensor::new(g.rows, 1, ds));
            }
            Op::MatMul(x, w) => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                acc(adj, *x, matmul_dyw(g, wv));
                acc(adj, *w, matmul_dytx(g, xv));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                acc(adj, *a, map(g, &|k| {
                    let s = sigmoid(x.data[k]);
                    g.data[k] * s * (1.0 + x.data[k] * (1.0 - s))
                }));
            }
            Op::Recip(a) => acc(adj, *a, map(g, &|k| -g.data[k] * y.data[k] * y.data[k])),
            Op::Sum(a) => {
                let x = &self.nodes[*a].value;
                acc(adj, *a, Tensor::new(x.rows, x.cols, vec![g.data[0]; x.len()]));
            }
            Op::MeanRows(a) => {
                let x = &self.nodes[*a].value;
                let inv = 1.0 / x.rows as f64;
                acc(adj, *a, map(x, &|k| g.data[k % x.cols] * inv));
            }
            Op::Softmax(a) => {
                let c = y.cols.max(1);
                let mut dx = g.clone();
                for r in 0..y.rows {
                    let dot: f64 = g.row_slice(r).iter().zip(y.row_slice(r)).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        dx.data[r * c + k] = y.data[r * c + k] * (g.data[r * c + k] - dot);
                    }
                }
                acc(adj, *a, dx);
            }
            Op::Gather(a, idx) => {
                let x = &self.nodes[*a].value;
                let mut dx = Tensor::zeros(x.rows, x.cols);
                let c = x.cols;
                for (r, &src) in idx.iter().enumerate() {
                    for k in 0..c {
                        dx.data[src * c + k] += g.data[r * c + k];
                    }
                }
                acc(adj, *a, dx);
            }
            Op::ScatterAdd(a, idx) => {
                let c = g.cols;
                let mut data = Vec::with_capacity(idx.len() * c);
                for &dst in idx.iter() {
                    data.extend_from_slice(&g.data[dst * c..(dst + 1) * c]);
                }
                acc(adj, *a, Tensor::new(idx.len(), c, data));
            }
            Op::RowNorm(a) => {
                let x = &self.nodes[*a].value;
                let c = x.cols.max(1);
                acc(adj, *a, map(x, &|k| {
                    let r = k / c;
                    if y.data[r] > 0.0 { g.data[r] * x.data[k] / y.data[r] } else { 0.0 }
                }));
            }
            Op::RmsNorm(a, eps) => {
                let x = &self.nodes[*a].value;
                let c = x.cols.max(1);
                let mut dx = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let xr = x.row_slice(r);
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gr = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for k in 0..c {
                        dx.data[r * c + k] = (gr[k] - yr[k] * dot) * inv;
                    }
                }
                acc(adj, *a, dx);
            }
            Op::Rbf(a, centers, gamma) => {
                let x = &self.nodes[*a].value;
                let k = centers.len();
                let dx = (0..x.rows)
                    .map(|r| {
                        (0..k)
                            .map(|j| g.data[r * k + j] * y.data[r * k + j] * (-2.0 * gamma * (x.data[r] - centers[j])))
                            .sum()
                    })
                    .collect();
                acc(adj, *a, Tensor::new(x.rows, 1, dx));
            }
            Op::Envelope(a, rc) => {
                let x = &self.nodes[*a].value;
                acc(adj, *a, map(x, &|k| g.data[k] * envelope_deriv(x.data[k], *rc)));
            }
            Op::MixExperts(e, al) => {
                let (ev, av) = (&self.nodes[*e].value, &self.nodes[*al].value);
                let mut de = Tensor::zeros(ev.rows, ev.cols);
                let mut da = vec![0.0; av.cols];
                for k in 0..ev.rows {
                    let row = ev.row_slice(k);
                    let mut dot = 0.0;
                    for (j, gv) in g.data.iter().enumerate() {
                        de.data[k * ev.cols + j] = av.data[k] * gv;
                        dot += gv * row[j];
                    }
                    da[k] = dot;
                }
                acc(adj, *e, de);
                acc(adj, *al, Tensor::row(da));
            }
            Op::ScaleBy(a, s, k) => {
                let (x, sv) = (&self.nodes[*a].value, &self.nodes[*s].value);
                let c = sv.data[*k];
                acc(adj, *a, map(g, &|j| g.data[j] * c));
                let mut ds = Tensor::zeros(sv.rows, sv.cols);
                ds.data[*k] = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                acc(adj, *s, ds);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    let mut dp = Vec::with_capacity(pv.len());
                    for r in 0..pv.rows {
                        let row = &g.data[r * g.cols..(r + 1) * g.cols];
                        dp.extend_from_slice(&row[offset..offset + pv.cols]);
                    }
                    offset += pv.cols;
                    acc(adj, p, Tensor::new(pv.rows, pv.cols, dp));
                }
            }
        }
    }
}

/// `(1 − (r/rc)²)³` inside the cutoff; value and first two derivatives
/// vanish at `rc`.
pub fn envelope(r: f64, cutoff: f64) -> f64 {
    if r >= cutoff {
        return 0.0;
    }
    let x = r / cutoff;
    let u = 1.0 - x * x;
    u * u * u
}

pub fn envelope_deriv(r: f64, cutoff: f64) -> f64 {
    if r >= cutoff {
        return 0.0;
    }
    let x = r / cutoff;
    let u = 1.0 - x * x;
    -6.0 * u * u * r / (cutoff * cutoff)
}
