//! Dense-matrix reverse-mode automatic differentiation.
//!
//! Computations are recorded on a [`Tape`]: every operation appends a
//! [`TapeNode`] holding the forward value and references to its parents, so
//! insertion order is already a topological order. [`Tape::backward`] walks
//! the tape in reverse and accumulates adjoints into the `grad` field of every
//! node that (transitively) requires gradients.
//!
//! Everything is 64-bit and single-threaded per tape; distinct tapes are
//! independent and may live on different threads.

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Errors raised by matrix construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({lhs} vs {rhs})")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("degenerate embedding: zero-norm row {row}")]
    DegenerateRow { row: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("ragged rows: row {row} has {got} entries, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { len: usize, rows: usize, cols: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        if data.len() != rows * cols {
            return Err(DiffError::BadLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DiffError::Ragged {
                    row: i,
                    got: r.len(),
                    expected: cols,
                });
            }
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`, plain dense product.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(&mut out.data, &self.data, &other.data, self.rows, self.cols, other.cols);
        out
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// `out += a * b` where a is ra x ca and b is ca x cb, all row-major.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], ra: usize, ca: usize, cb: usize) {
    for i in 0..ra {
        let arow = &a[i * ca..(i + 1) * ca];
        let orow = &mut out[i * cb..(i + 1) * cb];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * cb..(k + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a * b^T` where a is ra x d and b is rb x d.
fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], ra: usize, d: usize, rb: usize) {
    for i in 0..ra {
        let arow = &a[i * d..(i + 1) * d];
        let orow = &mut out[i * rb..(i + 1) * rb];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out += a^T * b` where a is n x ra and b is n x cb.
fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], n: usize, ra: usize, cb: usize) {
    for k in 0..n {
        let arow = &a[k * ra..(k + 1) * ra];
        let brow = &b[k * cb..(k + 1) * cb];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * cb..(i + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

// Matrices serialize as nested arrays of rows so checkpoints stay diffable.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for r in 0..self.rows {
            seq.serialize_element(self.row(r))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RowsVisitor;
        impl<'de> Visitor<'de> for RowsVisitor {
            type Value = Matrix;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a sequence of equal-length rows of numbers")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Matrix, A::Error> {
                let mut rows: Vec<Vec<f64>> = Vec::new();
                while let Some(row) = seq.next_element::<Vec<f64>>()? {
                    rows.push(row);
                }
                Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
            }
        }
        deserializer.deserialize_seq(RowsVisitor)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    /// a * b^T
    MatmulNt(usize, usize),
    Add(usize, usize),
    /// (n x c) + broadcast (1 x c)
    AddRowVec(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    ConcatCols(Vec<usize>),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    RowMean(usize),
    RowSums(usize),
    MeanAll(usize),
    SumAll(usize),
    L2NormalizeRows(usize),
    Transpose(usize),
    Diag(usize),
}

/// One recorded operation: forward value, adjoint accumulator and parents.
#[derive(Debug)]
pub struct TapeNode {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op,
}

/// Records a forward computation and replays it backwards for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Tensor {
        self.push(value, requires_grad, requires_grad, Op::Leaf)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    /// Accumulated gradient of `t`, if any backward pass reached it.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.nodes[t.0].grad.as_ref()
    }

    /// Whether `t` was created as a gradient-tracking leaf.
    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, needs_grad: bool, op: Op) -> Tensor {
        self.nodes.push(TapeNode {
            value,
            grad: None,
            requires_grad,
            needs_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn checked(&mut self, op: &'static str, value: Matrix, needs: bool, opv: Op) -> Result<Tensor, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op });
        }
        Ok(self.push(value, false, needs, opv))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols != vb.rows {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape_string(),
                rhs: vb.shape_string(),
            });
        }
        let mut out = Matrix::zeros(va.rows, vb.cols);
        matmul_into(&mut out.data, &va.data, &vb.data, va.rows, va.cols, vb.cols);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.checked("matmul", out, needs, Op::Matmul(a.0, b.0))
    }

    /// `a * b^T`; rows of `a` against rows of `b`.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols != vb.cols {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: va.shape_string(),
                rhs: vb.shape_string(),
            });
        }
        let mut out = Matrix::zeros(va.rows, vb.rows);
        matmul_nt_into(&mut out.data, &va.data, &vb.data, va.rows, va.cols, vb.rows);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.checked("matmul_nt", out, needs, Op::MatmulNt(a.0, b.0))
    }

    fn elementwise_pair(
        &mut self,
        op: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        opv: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: va.shape_string(),
                rhs: vb.shape_string(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Matrix {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        self.checked(op, out, needs, opv(a.0, b.0))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Add a `1 x c` row vector to every row of an `n x c` matrix.
    pub fn add_rowvec(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if vb.rows != 1 || va.cols != vb.cols {
            return Err(DiffError::ShapeMismatch {
                op: "add_rowvec",
                lhs: va.shape_string(),
                rhs: vb.shape_string(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += bv;
            }
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        self.checked("add_rowvec", out, needs, Op::AddRowVec(a.0, b.0))
    }

    pub fn scalar_mul(&mut self, a: Tensor, s: f64) -> Result<Tensor, DiffError> {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let needs = self.needs(a.0);
        self.checked("scalar_mul", out, needs, Op::ScalarMul(a.0, s))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Empty { op: "concat_cols" });
        }
        let rows = self.nodes[parts[0].0].value.rows;
        let mut cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: format!("{rows} rows"),
                    rhs: v.shape_string(),
                });
            }
            cols += v.cols;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let orow = out.row_mut(r);
            let mut at = 0;
            for p in parts {
                let v = &self.nodes[p.0].value;
                orow[at..at + v.cols].copy_from_slice(v.row(r));
                at += v.cols;
            }
        }
        let needs = parts.iter().any(|p| self.needs(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        self.checked("concat_cols", out, needs, Op::ConcatCols(ids))
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Tensor,
        f: impl Fn(f64) -> f64,
        opv: impl Fn(usize) -> Op,
    ) -> Result<Tensor, DiffError> {
        let out = self.nodes[a.0].value.map(f);
        let needs = self.needs(a.0);
        self.checked(op, out, needs, opv(a.0))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn square(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        self.unary("square", a, |x| x * x, Op::Square)
    }

    /// Column-wise mean over rows: `n x c -> 1 x c`.
    pub fn row_mean(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        let v = &self.nodes[a.0].value;
        if v.rows == 0 {
            return Err(DiffError::Empty { op: "row_mean" });
        }
        let mut out = Matrix::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, &x) in out.data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / v.rows as f64;
        for o in &mut out.data {
            *o *= inv;
        }
        let needs = self.needs(a.0);
        self.checked("row_mean", out, needs, Op::RowMean(a.0))
    }

    /// Sum across each row: `n x c -> n x 1`.
    pub fn row_sums(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        let v = &self.nodes[a.0].value;
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let out = Matrix {
            rows: v.rows,
            cols: 1,
            data,
        };
        let needs = self.needs(a.0);
        self.checked("row_sums", out, needs, Op::RowSums(a.0))
    }

    pub fn mean_all(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        let v = &self.nodes[a.0].value;
        if v.data.is_empty() {
            return Err(DiffError::Empty { op: "mean_all" });
        }
        let m = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let needs = self.needs(a.0);
        self.checked("mean_all", Matrix::scalar(m), needs, Op::MeanAll(a.0))
    }

    pub fn sum_all(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        let v = &self.nodes[a.0].value;
        let s = v.data.iter().sum::<f64>();
        let needs = self.needs(a.0);
        self.checked("sum_all", Matrix::scalar(s), needs, Op::SumAll(a.0))
    }

    /// Scale every row to unit L2 norm. Zero rows are an error: a collapsed
    /// embedding must surface, not silently pass as cos = 0.
    pub fn l2_normalize_rows(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        for r in 0..out.rows {
            let norm = row_norm(v.row(r));
            if norm == 0.0 {
                return Err(DiffError::DegenerateRow { row: r });
            }
            for x in out.row_mut(r) {
                *x /= norm;
            }
        }
        let needs = self.needs(a.0);
        self.checked("l2_normalize_rows", out, needs, Op::L2NormalizeRows(a.0))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        let out = self.nodes[a.0].value.transpose();
        let needs = self.needs(a.0);
        self.checked("transpose", out, needs, Op::Transpose(a.0))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Tensor) -> Result<Tensor, DiffError> {
        let v = &self.nodes[a.0].value;
        if v.rows != v.cols {
            return Err(DiffError::ShapeMismatch {
                op: "diag",
                lhs: v.shape_string(),
                rhs: "square".into(),
            });
        }
        let data = (0..v.rows).map(|i| v.get(i, i)).collect();
        let out = Matrix {
            rows: v.rows,
            cols: 1,
            data,
        };
        let needs = self.needs(a.0);
        self.checked("diag", out, needs, Op::Diag(a.0))
    }

    /// Pairwise cosine similarity between rows of `a` and rows of `b`
    /// (`n x d`, `m x d` -> `n x m`). Composed from primitives, so the
    /// backward pass comes for free.
    pub fn cosine_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, DiffError> {
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        self.matmul_nt(na, nb)
    }

    /// Reverse sweep from a scalar loss. Adjoints of this call are *added*
    /// into each needs-grad node's `grad`, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Tensor) -> Result<(), DiffError> {
        if self.nodes.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(DiffError::NonScalarLoss {
                rows: lv.rows,
                cols: lv.cols,
            });
        }

        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(d) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &d, &mut adj);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(g) => g.add_scaled(&d, 1.0),
                None => node.grad = Some(d),
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], id: usize, update: impl FnOnce(&mut Matrix)) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = &mut adj[id];
        if slot.is_none() {
            let v = &self.nodes[id].value;
            *slot = Some(Matrix::zeros(v.rows, v.cols));
        }
        update(slot.as_mut().unwrap());
    }

    fn propagate(&self, id: usize, d: &Matrix, adj: &mut [Option<Matrix>]) {
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.accumulate(adj, a, |g| {
                    // dA += dC * B^T
                    matmul_nt_into(&mut g.data, &d.data, &vb.data, d.rows, d.cols, vb.rows);
                });
                self.accumulate(adj, b, |g| {
                    // dB += A^T * dC
                    matmul_tn_into(&mut g.data, &va.data, &d.data, va.rows, va.cols, d.cols);
                });
            }
            Op::MatmulNt(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.accumulate(adj, a, |g| {
                    // dA += dC * B
                    matmul_into(&mut g.data, &d.data, &vb.data, d.rows, d.cols, vb.cols);
                });
                self.accumulate(adj, b, |g| {
                    // dB += dC^T * A
                    matmul_tn_into(&mut g.data, &d.data, &va.data, d.rows, d.cols, va.cols);
                });
            }
            Op::Add(a, b) => {
                self.accumulate(adj, a, |g| g.add_scaled(d, 1.0));
                self.accumulate(adj, b, |g| g.add_scaled(d, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, |g| g.add_scaled(d, 1.0));
                self.accumulate(adj, b, |g| g.add_scaled(d, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.accumulate(adj, a, |g| {
                    for ((g, &dv), &bv) in g.data.iter_mut().zip(&d.data).zip(&vb.data) {
                        *g += dv * bv;
                    }
                });
                self.accumulate(adj, b, |g| {
                    for ((g, &dv), &av) in g.data.iter_mut().zip(&d.data).zip(&va.data) {
                        *g += dv * av;
                    }
                });
            }
            Op::AddRowVec(a, b) => {
                self.accumulate(adj, a, |g| g.add_scaled(d, 1.0));
                self.accumulate(adj, b, |g| {
                    for r in 0..d.rows {
                        for (gv, &dv) in g.data.iter_mut().zip(d.row(r)) {
                            *gv += dv;
                        }
                    }
                });
            }
            Op::ScalarMul(a, s) => {
                self.accumulate(adj, a, |g| g.add_scaled(d, s));
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let c = self.nodes[p].value.cols;
                    self.accumulate(adj, p, |g| {
                        for r in 0..d.rows {
                            let src = &d.row(r)[at..at + c];
                            for (gv, &dv) in g.row_mut(r).iter_mut().zip(src) {
                                *gv += dv;
                            }
                        }
                    });
                    at += c;
                }
            }
            Op::Relu(a) => {
                let va = &self.nodes[a].value;
                self.accumulate(adj, a, |g| {
                    for ((g, &dv), &x) in g.data.iter_mut().zip(&d.data).zip(&va.data) {
                        if x > 0.0 {
                            *g += dv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(adj, a, |g| {
                    for ((g, &dv), &yv) in g.data.iter_mut().zip(&d.data).zip(&y.data) {
                        *g += dv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(adj, a, |g| {
                    for ((g, &dv), &yv) in g.data.iter_mut().zip(&d.data).zip(&y.data) {
                        *g += dv * yv;
                    }
                });
            }
            Op::Log(a) => {
                let va = &self.nodes[a].value;
                self.accumulate(adj, a, |g| {
                    for ((g, &dv), &x) in g.data.iter_mut().zip(&d.data).zip(&va.data) {
                        *g += dv / x;
                    }
                });
            }
            Op::Square(a) => {
                let va = &self.nodes[a].value;
                self.accumulate(adj, a, |g| {
                    for ((g, &dv), &x) in g.data.iter_mut().zip(&d.data).zip(&va.data) {
                        *g += 2.0 * x * dv;
                    }
                });
            }
            Op::RowMean(a) => {
                let n = self.nodes[a].value.rows;
                let inv = 1.0 / n as f64;
                self.accumulate(adj, a, |g| {
                    for r in 0..n {
                        for (gv, &dv) in g.row_mut(r).iter_mut().zip(&d.data) {
                            *gv += dv * inv;
                        }
                    }
                });
            }
            Op::RowSums(a) => {
                self.accumulate(adj, a, |g| {
                    for r in 0..g.rows {
                        let dv = d.data[r];
                        for gv in g.row_mut(r) {
                            *gv += dv;
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let len = self.nodes[a].value.data.len();
                let dv = d.item() / len as f64;
                self.accumulate(adj, a, |g| {
                    for gv in &mut g.data {
                        *gv += dv;
                    }
                });
            }
            Op::SumAll(a) => {
                let dv = d.item();
                self.accumulate(adj, a, |g| {
                    for gv in &mut g.data {
                        *gv += dv;
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let va = &self.nodes[a].value;
                let y = &self.nodes[id].value;
                self.accumulate(adj, a, |g| {
                    // dX_i = (dY_i - (dY_i . y_i) y_i) / ||x_i||
                    for r in 0..va.rows {
                        let norm = row_norm(va.row(r));
                        let yrow = y.row(r);
                        let drow = d.row(r);
                        let dot: f64 = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((gv, &dv), &yv) in g.row_mut(r).iter_mut().zip(drow).zip(yrow) {
                            *gv += (dv - dot * yv) / norm;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let dt = d.transpose();
                self.accumulate(adj, a, |g| g.add_scaled(&dt, 1.0));
            }
            Op::Diag(a) => {
                self.accumulate(adj, a, |g| {
                    let n = g.rows;
                    for i in 0..n {
                        g.data[i * n + i] += d.data[i];
                    }
                });
            }
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// One coordinate skipped by [`grad_check`], with the reason.
#[derive(Debug, Clone)]
pub struct ExcludedCoord {
    pub row: usize,
    pub col: usize,
    pub reason: String,
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub excluded: Vec<ExcludedCoord>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare the analytic gradient of a scalar function against central finite
/// differences at `at`. Coordinates where the second difference reveals a
/// kink (e.g. relu evaluated exactly at zero) are flagged as
/// "nondifferentiable point" and excluded from the error maximum.
pub fn grad_check<F>(f: F, at: &Matrix, eps: f64, tol: f64) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor, DiffError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone(), true);
    let y = f(&mut tape, x)?;
    let yv = tape.value(y);
    if yv.shape() != (1, 1) {
        return Err(DiffError::NonScalarLoss {
            rows: yv.rows(),
            cols: yv.cols(),
        });
    }
    let f0 = yv.item();
    tape.backward(y)?;
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Matrix::zeros(at.rows(), at.cols()));

    let eval = |m: &Matrix| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let x = t.leaf(m.clone(), false);
        let y = f(&mut t, x)?;
        Ok(t.value(y).item())
    };

    let mut max_rel_err: f64 = 0.0;
    let mut excluded = Vec::new();
    let mut checked = 0;
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let mut hi = at.clone();
            hi.set(r, c, at.get(r, c) + eps);
            let mut lo = at.clone();
            lo.set(r, c, at.get(r, c) - eps);
            let (fh, fl) = (eval(&hi)?, eval(&lo)?);

            // A smooth function has |f(x+e) + f(x-e) - 2 f(x)| = O(e^2);
            // a slope jump makes it O(e).
            let second = (fh + fl - 2.0 * f0).abs();
            if second > eps.powf(1.5) * f0.abs().max(1.0) {
                excluded.push(ExcludedCoord {
                    row: r,
                    col: c,
                    reason: "nondifferentiable point".into(),
                });
                continue;
            }

            let fd = (fh - fl) / (2.0 * eps);
            let a = analytic.get(r, c);
            let rel = (a - fd).abs() / (1e-8 + a.abs().max(fd.abs()));
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }

    Ok(GradCheck {
        max_rel_err,
        tol,
        checked,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]), false);
        let i = t.leaf(Matrix::identity(2), false);
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), &mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3), false);
        let b = t.leaf(Matrix::zeros(2, 3), false);
        assert!(matches!(t.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[-1.0, 2.0]]), false);
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r), &mat(&[&[0.0, 2.0]]));
    }

    #[test]
    fn cosine_rows_hand_value() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[1.0, 1.0]]), false);
        let b = t.leaf(mat(&[&[1.0, 0.0]]), false);
        let c = t.cosine_rows(a, b).unwrap();
        let expected = 1.0 / 2.0_f64.sqrt();
        assert!((t.value(c).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_rows_zero_row_is_degenerate() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[0.0, 0.0]]), false);
        let b = t.leaf(mat(&[&[1.0, 0.0]]), false);
        match t.cosine_rows(a, b) {
            Err(DiffError::DegenerateRow { row: 0 }) => {}
            other => panic!("expected degenerate row, got {other:?}"),
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[&[1.0, 2.0]]), true);
        let sq = t.square(x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &mat(&[&[2.0, 4.0]]));
    }

    #[test]
    fn backward_constant_loss_gives_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[&[1.0, 2.0]]), true);
        let c = t.leaf(Matrix::scalar(5.0), false);
        // x participates via a zero-weight branch: loss = 5 + 0 * sum(x)
        let s = t.sum_all(x).unwrap();
        let z = t.scalar_mul(s, 0.0).unwrap();
        let loss = t.add(c, z).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Matrix::zeros(1, 2));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[&[1.0, 2.0]]), true);
        assert!(matches!(
            t.backward(x),
            Err(DiffError::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[&[3.0]]), true);
        let y = t.square(x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 12.0); // 2 * (2x)
    }

    #[test]
    fn adjoint_linearity_over_independent_subgraphs() {
        let a = mat(&[&[0.3, -1.4], &[2.0, 0.7]]);
        let b = mat(&[&[1.1, 0.2], &[-0.5, 0.9]]);

        // Joint: loss = f(a) + g(b)
        let mut t = Tape::new();
        let ta = t.leaf(a.clone(), true);
        let tb = t.leaf(b.clone(), true);
        let fa = t.square(ta).unwrap();
        let fa = t.sum_all(fa).unwrap();
        let gb = t.exp(tb).unwrap();
        let gb = t.sum_all(gb).unwrap();
        let loss = t.add(fa, gb).unwrap();
        t.backward(loss).unwrap();
        let joint_a = t.grad(ta).unwrap().clone();
        let joint_b = t.grad(tb).unwrap().clone();

        // Separate passes.
        let mut t1 = Tape::new();
        let ta1 = t1.leaf(a, true);
        let fa1 = t1.square(ta1).unwrap();
        let fa1 = t1.sum_all(fa1).unwrap();
        t1.backward(fa1).unwrap();
        let mut t2 = Tape::new();
        let tb2 = t2.leaf(b, true);
        let gb2 = t2.exp(tb2).unwrap();
        let gb2 = t2.sum_all(gb2).unwrap();
        t2.backward(gb2).unwrap();

        assert_eq!(&joint_a, t1.grad(ta1).unwrap());
        assert_eq!(&joint_b, t2.grad(tb2).unwrap());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let a = mat(&[&[0.1, -2.3, 0.7], &[1.9, 0.4, -0.6]]);
        let b = mat(&[&[0.5, 1.5], &[-0.25, 0.75], &[2.0, -1.0]]);
        let run = || {
            let mut t = Tape::new();
            let ta = t.leaf(a.clone(), false);
            let tb = t.leaf(b.clone(), false);
            let c = t.matmul(ta, tb).unwrap();
            let s = t.sigmoid(c).unwrap();
            let m = t.mean_all(s).unwrap();
            t.value(m).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_quadratic_passes() {
        let at = mat(&[&[0.7, -1.2], &[0.4, 2.0]]);
        let report = grad_check(
            |t, x| {
                let sq = t.square(x)?;
                t.sum_all(sq)
            },
            &at,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 4);
        assert!(report.excluded.is_empty());
    }

    #[test]
    fn grad_check_flags_relu_kink() {
        let at = mat(&[&[0.0, 1.0]]);
        let report = grad_check(
            |t, x| {
                let r = t.relu(x)?;
                t.sum_all(r)
            },
            &at,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.excluded.len(), 1);
        assert_eq!((report.excluded[0].row, report.excluded[0].col), (0, 0));
        assert_eq!(report.excluded[0].reason, "nondifferentiable point");
        assert!(report.passed());
    }

    #[test]
    fn grad_check_temperature_scaled_cosine() {
        // loss = exp(cos(x, y) / tau) with y fixed, checked against central
        // differences with step 1e-5.
        let y = mat(&[&[0.8, -0.3, 1.1]]);
        let at = mat(&[&[0.4, 0.9, -0.2]]);
        let tau = 0.5;
        let report = grad_check(
            move |t, x| {
                let ty = t.leaf(y.clone(), false);
                let c = t.cosine_rows(x, ty)?;
                let scaled = t.scalar_mul(c, 1.0 / tau)?;
                let e = t.exp(scaled)?;
                t.sum_all(e)
            },
            &at,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        // Random non-degenerate points for each differentiable primitive.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut random = |r: usize, c: usize| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(0.25..1.75)).collect();
            Matrix::from_vec(r, c, data).unwrap()
        };

        type Builder = Box<dyn Fn(&mut Tape, Tensor) -> Result<Tensor, DiffError>>;
        let b = random(3, 2);
        let cases: Vec<(&str, Matrix, Builder)> = vec![
            ("matmul", random(2, 3), {
                let b = b.clone();
                Box::new(move |t, x| {
                    let tb = t.leaf(b.clone(), false);
                    let m = t.matmul(x, tb)?;
                    t.sum_all(m)
                })
            }),
            ("matmul_nt", random(2, 2), {
                let b = random(3, 2);
                Box::new(move |t, x| {
                    let tb = t.leaf(b.clone(), false);
                    let m = t.matmul_nt(x, tb)?;
                    let sq = t.square(m)?;
                    t.sum_all(sq)
                })
            }),
            ("sigmoid", random(2, 2), Box::new(|t, x| {
                let s = t.sigmoid(x)?;
                t.sum_all(s)
            })),
            ("exp", random(2, 2), Box::new(|t, x| {
                let e = t.exp(x)?;
                t.sum_all(e)
            })),
            ("log", random(2, 2), Box::new(|t, x| {
                let l = t.log(x)?;
                t.sum_all(l)
            })),
            ("relu", random(2, 2), Box::new(|t, x| {
                let r = t.relu(x)?;
                let sq = t.square(r)?;
                t.sum_all(sq)
            })),
            ("row_mean", random(3, 2), Box::new(|t, x| {
                let m = t.row_mean(x)?;
                let sq = t.square(m)?;
                t.sum_all(sq)
            })),
            ("row_sums", random(3, 2), Box::new(|t, x| {
                let s = t.row_sums(x)?;
                let sq = t.square(s)?;
                t.sum_all(sq)
            })),
            ("l2_normalize_rows", random(3, 3), Box::new(|t, x| {
                let n = t.l2_normalize_rows(x)?;
                let w = t.leaf(Matrix::from_vec(3, 3, (1..=9).map(f64::from).collect()).unwrap(), false);
                let p = t.mul(n, w)?;
                t.sum_all(p)
            })),
            ("cosine_rows", random(2, 3), {
                let b = random(2, 3);
                Box::new(move |t, x| {
                    let tb = t.leaf(b.clone(), false);
                    let c = t.cosine_rows(x, tb)?;
                    let sq = t.square(c)?;
                    t.sum_all(sq)
                })
            }),
            ("diag_transpose_concat", random(3, 3), Box::new(|t, x| {
                let tr = t.transpose(x)?;
                let cc = t.concat_cols(&[x, tr])?;
                let sq = t.square(cc)?;
                let d = t.matmul_nt(sq, sq)?;
                let dg = t.diag(d)?;
                t.sum_all(dg)
            })),
            ("add_rowvec", random(3, 2), {
                let b = random(1, 2);
                Box::new(move |t, x| {
                    let tb = t.leaf(b.clone(), false);
                    let s = t.add_rowvec(x, tb)?;
                    let sq = t.square(s)?;
                    t.sum_all(sq)
                })
            }),
        ];

        for (name, at, f) in cases {
            let report = grad_check(f, &at, 1e-5, 1e-6).unwrap();
            assert!(
                report.passed(),
                "{name}: max rel err {} over {} coords",
                report.max_rel_err,
                report.checked
            );
        }
    }

    #[test]
    fn matrix_serde_nested_arrays() {
        let m = mat(&[&[1.0, 2.5], &[-3.0, 0.0]]);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.5],[-3.0,0.0]]");
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let ragged: Result<Matrix, _> = serde_json::from_str("[[1.0],[2.0,3.0]]");
        assert!(ragged.is_err());
    }

    #[test]
    fn exp_overflow_is_nonfinite_error() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(1e4), false);
        assert!(matches!(t.exp(x), Err(DiffError::NonFinite { op: "exp" })));
    }
}
