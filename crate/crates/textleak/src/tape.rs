//! Reverse-mode automatic differentiation on a flat recording tape.
//!
//! Every operation appends one node (op kind, input handles, output values)
//! to a [`Tape`] and hands back a lightweight [`Var`] handle. Calling
//! [`Tape::backward`] walks the recording in reverse and builds adjoints for
//! the requested inputs.
//!
//! The crucial property for gradient-matching attacks is *second-order*
//! differentiation: the attack loss is a function of model gradients, and we
//! need its gradient with respect to the dummy input. To support that, the
//! backward pass itself is expressed in terms of the same primitive ops and,
//! when `create_graph` is set, is recorded onto the same tape. The returned
//! gradients are then ordinary differentiable nodes, and a second
//! `backward` call differentiates straight through the first one.
//!
//! With `create_graph` unset the adjoint nodes are recorded as detached
//! (non-differentiable), which keeps plain training cheap and makes the
//! "gradients of gradients" capability strictly opt-in.
//!
//! Tapes are cheap, single-use arenas: build one per loss evaluation, read
//! the gradients out, and drop it.

use crate::tensor::Tensor;
use thiserror::Error;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: u32,
}

impl Var {
    pub fn id(self) -> u32 {
        self.id
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    ShapeMismatch { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: non-finite values")]
    NonFinite { op: &'static str },
}

type Result<T> = std::result::Result<T, TapeError>;

/// Recorded operation kinds. Input handles live inside the variants; the
/// output shape and values live on the node itself.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Scalar tensor times arbitrary tensor: `(s, x)`.
    Smul(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    RowSoftmax(Var),
    Tanh(Var),
    Sqrt(Var),
    /// 1/x away from zero, 0 at exactly zero (subgradient convention).
    SafeRecip(Var),
    Abs(Var),
    /// Piecewise-constant sign with sign(0) = 0; never differentiated through.
    Sign,
    L2Norm(Var),
    Sum(Var),
    RowSum(Var),
    ColSum(Var),
    BroadcastCol(Var),
    BroadcastRow(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { x: Var, r0: usize, c0: usize },
    Pad { x: Var, r0: usize, c0: usize },
    Lookup { table: Var, ids: Vec<u32> },
    ScatterRows { x: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32> },
    Reshape(Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// True when some differentiable leaf feeds this node. Backward skips
    /// subgraphs where this is false (constants, masks, observed gradients).
    requires: bool,
}

/// Append-only recording of a computation, plus the machinery to replay it
/// backwards. See the module docs for the create-graph contract.
pub struct Tape {
    nodes: Vec<Node>,
    /// While > 0, newly recorded nodes are marked non-differentiable. Used
    /// for backward passes that should not themselves be differentiated.
    detach_depth: u32,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(4096), detach_depth: 0 }
    }

    /// Number of recorded nodes (diagnostics and tests).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── node construction ────────────────────────────────────────────────

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite values out of {:?}",
            op_name(&op)
        );
        let requires = requires && self.detach_depth == 0;
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { op, shape, data, requires });
        Var { id }
    }

    /// Records a non-differentiable value (observed data, masks, labels).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(TapeError::NonFinite { op: "constant" });
        }
        Ok(self.push(Op::Leaf, t.shape, t.data, false))
    }

    /// Records a differentiable input (parameters, dummy embeddings).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(TapeError::NonFinite { op: "leaf" });
        }
        let requires = true;
        Ok(self.push(Op::Leaf, t.shape, t.data, requires))
    }

    fn zeros_const(&mut self, shape: Vec<usize>) -> Var {
        let numel = shape.iter().product();
        self.push(Op::Leaf, shape, vec![0.0; numel], false)
    }

    // ── accessors ────────────────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id as usize].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.id as usize].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id as usize].requires
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.id as usize];
        Tensor::new(n.shape.clone(), n.data.clone())
    }

    /// Value of a scalar node.
    pub fn item(&self, v: Var) -> f64 {
        let n = &self.nodes[v.id as usize];
        assert!(n.data.len() == 1, "item() on shape {:?}", n.shape);
        n.data[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(TapeError::BadShape { op, expected: "matrix", got: s.to_vec() })
        }
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.id as usize].requires
    }

    // ── elementwise ops ──────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::ShapeMismatch {
                op,
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Op::Add(a, b), shape, data, requires))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Op::Sub(a, b), shape, data, requires))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Op::Mul(a, b), shape, data, requires))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::Neg(a), shape, data, requires))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::Scale(a, c), shape, data, requires))
    }

    /// Addition of a constant to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::AddScalar(a), shape, data, requires))
    }

    /// Scalar tensor `s` times tensor `x` (the scalar is a tape value, so
    /// gradients flow into both factors).
    pub fn smul(&mut self, s: Var, x: Var) -> Result<Var> {
        if !self.shape(s).is_empty() {
            return Err(TapeError::BadShape {
                op: "smul",
                expected: "scalar multiplier",
                got: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| sv * v).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.req(s) || self.req(x);
        Ok(self.push(Op::Smul(s, x), shape, data, requires))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::Tanh(a), shape, data, requires))
    }

    /// Elementwise square root. Callers must keep inputs non-negative
    /// (the crate only applies it to sums of squares plus an epsilon).
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::Sqrt(a), shape, data, requires))
    }

    /// Elementwise 1/x with the convention that 0 maps to 0. This keeps
    /// norm gradients finite at the origin without branching callers.
    pub fn safe_recip(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> =
            self.data(a).iter().map(|&x| if x == 0.0 { 0.0 } else { 1.0 / x }).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::SafeRecip(a), shape, data, requires))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::Abs(a), shape, data, requires))
    }

    /// Elementwise sign with sign(0) = 0. The output is recorded as
    /// non-differentiable: its derivative is zero almost everywhere, and the
    /// absolute-value gradient uses exactly that convention.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sign, shape, data, false))
    }

    // ── reductions and norms ─────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        let requires = self.req(a);
        Ok(self.push(Op::Sum(a), vec![], vec![s], requires))
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm of the whole tensor. The gradient at the exact origin
    /// is taken to be zero (subgradient convention, matching `safe_recip`).
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        let requires = self.req(a);
        Ok(self.push(Op::L2Norm(a), vec![], vec![s], requires))
    }

    /// Sum of absolute values, with gradient sign(x) (zero at zero).
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.abs(a)?;
        self.sum(t)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_sum")?;
        let d = self.data(a);
        let data: Vec<f64> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let requires = self.req(a);
        Ok(self.push(Op::RowSum(a), vec![r], data, requires))
    }

    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "col_sum")?;
        let d = self.data(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += d[i * c + j];
            }
        }
        let requires = self.req(a);
        Ok(self.push(Op::ColSum(a), vec![c], data, requires))
    }

    /// Repeats a length-n vector as the columns of an n x cols matrix.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(TapeError::BadShape {
                op: "broadcast_col",
                expected: "vector",
                got: s.to_vec(),
            });
        }
        let r = s[0];
        let d = self.data(a);
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            data.extend(std::iter::repeat(d[i]).take(cols));
        }
        let requires = self.req(a);
        Ok(self.push(Op::BroadcastCol(a), vec![r, cols], data, requires))
    }

    /// Repeats a length-m vector as the rows of a rows x m matrix.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(TapeError::BadShape {
                op: "broadcast_row",
                expected: "vector",
                got: s.to_vec(),
            });
        }
        let m = s[0];
        let d = self.data(a);
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(d);
        }
        let requires = self.req(a);
        Ok(self.push(Op::BroadcastRow(a), vec![rows, m], data, requires))
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], data, requires))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let d = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = d[i * c + j];
            }
        }
        let requires = self.req(a);
        Ok(self.push(Op::Transpose(a), vec![c, r], data, requires))
    }

    // ── structural ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(TapeError::BadShape {
                op: "reshape",
                expected: "matching element count",
                got: shape,
            });
        }
        let data = self.data(a).to_vec();
        let requires = self.req(a);
        Ok(self.push(Op::Reshape(a), shape, data, requires))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TapeError::BadShape {
                op: "concat_rows",
                expected: "at least one part",
                got: vec![],
            });
        }
        let (_, c0) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != c0 {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    a: self.shape(parts[0]).to_vec(),
                    b: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c0);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let requires = parts.iter().any(|&p| self.req(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, c0], data, requires))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TapeError::BadShape {
                op: "concat_cols",
                expected: "at least one part",
                got: vec![],
            });
        }
        let (r0, _) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != r0 {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    a: self.shape(parts[0]).to_vec(),
                    b: self.shape(p).to_vec(),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0; r0 * cols];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims2(p, "concat_cols")?;
            let d = self.data(p);
            for i in 0..r0 {
                data[i * cols + off..i * cols + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let requires = parts.iter().any(|&p| self.req(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r0, cols], data, requires))
    }

    /// Rectangular sub-block `[r0..r1, c0..c1]` of a matrix.
    pub fn slice(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice")?;
        if r1 > r || c1 > c || r0 >= r1 || c0 >= c1 {
            return Err(TapeError::IndexOutOfRange { op: "slice", index: r1.max(c1), bound: r.max(c) });
        }
        let d = self.data(a);
        let (or, oc) = (r1 - r0, c1 - c0);
        let mut data = Vec::with_capacity(or * oc);
        for i in r0..r1 {
            data.extend_from_slice(&d[i * c + c0..i * c + c1]);
        }
        let requires = self.req(a);
        Ok(self.push(Op::Slice { x: a, r0, c0 }, vec![or, oc], data, requires))
    }

    /// Embeds a matrix into a larger zero matrix at offset `(r0, c0)`.
    /// This is the adjoint of `slice` and is exposed mainly for symmetry.
    pub fn pad(&mut self, a: Var, rows: usize, cols: usize, r0: usize, c0: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "pad")?;
        if r0 + r > rows || c0 + c > cols {
            return Err(TapeError::IndexOutOfRange { op: "pad", index: (r0 + r).max(c0 + c), bound: rows.max(cols) });
        }
        let d = self.data(a);
        let mut data = vec![0.0; rows * cols];
        for i in 0..r {
            data[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + c]
                .copy_from_slice(&d[i * c..(i + 1) * c]);
        }
        let requires = self.req(a);
        Ok(self.push(Op::Pad { x: a, r0, c0 }, vec![rows, cols], data, requires))
    }

    /// Gathers rows of `table` by token id: row i of the result is
    /// `table[ids[i]]`.
    pub fn lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table, "lookup")?;
        for &id in ids {
            if id as usize >= v {
                return Err(TapeError::IndexOutOfRange { op: "lookup", index: id as usize, bound: v });
            }
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let requires = self.req(table);
        Ok(self.push(Op::Lookup { table, ids: ids.to_vec() }, vec![ids.len(), d], data, requires))
    }

    /// Adjoint of `lookup`: scatter-adds the rows of `a` into a `rows x d`
    /// zero matrix at the given row ids (duplicate ids accumulate).
    pub fn scatter_rows(&mut self, a: Var, ids: &[u32], rows: usize) -> Result<Var> {
        let (n, d) = self.dims2(a, "scatter_rows")?;
        if n != ids.len() {
            return Err(TapeError::BadShape {
                op: "scatter_rows",
                expected: "one id per row",
                got: self.shape(a).to_vec(),
            });
        }
        for &id in ids {
            if id as usize >= rows {
                return Err(TapeError::IndexOutOfRange { op: "scatter_rows", index: id as usize, bound: rows });
            }
        }
        let ad = self.data(a);
        let mut data = vec![0.0; rows * d];
        for (i, &id) in ids.iter().enumerate() {
            let dst = &mut data[id as usize * d..(id as usize + 1) * d];
            let src = &ad[i * d..(i + 1) * d];
            for j in 0..d {
                dst[j] += src[j];
            }
        }
        let requires = self.req(a);
        Ok(self.push(Op::ScatterRows { x: a, ids: ids.to_vec() }, vec![rows, d], data, requires))
    }

    // ── neural-net ops ───────────────────────────────────────────────────

    /// Row-wise softmax of a matrix, numerically stabilized by max
    /// subtraction. Entries around -1e30 act as hard masks (probability 0).
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_softmax")?;
        let d = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[j] = e;
                z += e;
            }
            for v in out.iter_mut() {
                *v /= z;
            }
        }
        let requires = self.req(a);
        Ok(self.push(Op::RowSoftmax(a), vec![r, c], data, requires))
    }

    /// Mean cross-entropy between rows of logits and integer targets:
    /// `-(1/n) sum_i log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(TapeError::BadShape {
                op: "cross_entropy",
                expected: "one target per row",
                got: self.shape(logits).to_vec(),
            });
        }
        for &t in targets {
            if t as usize >= v {
                return Err(TapeError::IndexOutOfRange { op: "cross_entropy", index: t as usize, bound: v });
            }
        }
        let d = self.data(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &d[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        let requires = self.req(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            vec![],
            vec![total / n as f64],
            requires,
        ))
    }

    /// Row-wise standardization: each row is shifted to mean zero and scaled
    /// to unit variance (biased variance estimate, stabilized by `eps`).
    /// Affine gain/bias, where wanted, is applied by the caller.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (_, c) = self.dims2(a, "layer_norm")?;
        let mu_sum = self.row_sum(a)?;
        let mu = self.scale(mu_sum, 1.0 / c as f64)?;
        let mu_b = self.broadcast_col(mu, c)?;
        let centered = self.sub(a, mu_b)?;
        let sq = self.mul(centered, centered)?;
        let var_sum = self.row_sum(sq)?;
        let var = self.scale(var_sum, 1.0 / c as f64)?;
        let var_eps = self.add_scalar(var, eps)?;
        let std = self.sqrt(var_eps)?;
        let inv = self.safe_recip(std)?;
        let inv_b = self.broadcast_col(inv, c)?;
        self.mul(centered, inv_b)
    }

    /// GELU activation via the tanh approximation
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`, which keeps the
    /// whole activation inside the differentiable primitive set.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
        const CUBIC: f64 = 0.044715;
        let x2 = self.mul(a, a)?;
        let x3 = self.mul(x2, a)?;
        let x3s = self.scale(x3, CUBIC)?;
        let inner = self.add(a, x3s)?;
        let inner_s = self.scale(inner, SQRT_2_OVER_PI)?;
        let t = self.tanh(inner_s)?;
        let one_plus = self.add_scalar(t, 1.0)?;
        let half_x = self.scale(a, 0.5)?;
        self.mul(half_x, one_plus)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `root`, returning one gradient node per
    /// entry of `wrt` (zero tensors for inputs the root does not reach).
    ///
    /// With `create_graph` the adjoint computation is recorded as ordinary
    /// differentiable nodes, so the returned gradients can feed further
    /// computation whose own `backward` differentiates through this one.
    /// Without it the adjoints are recorded detached and a second-order
    /// sweep through them yields zeros.
    pub fn backward(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !self.shape(root).is_empty() {
            return Err(TapeError::NonScalarRoot(self.shape(root).to_vec()));
        }
        if !create_graph {
            self.detach_depth += 1;
        }
        let result = self.backward_sweep(root);
        if !create_graph {
            self.detach_depth -= 1;
        }
        let mut adj = result?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adj.get_mut(w.id() as usize).and_then(|a| a.take()) {
                Some(g) => out.push(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    out.push(self.zeros_const(shape));
                }
            }
        }
        Ok(out)
    }

    fn backward_sweep(&mut self, root: Var) -> Result<Vec<Option<Var>>> {
        let upto = root.id() as usize;
        let mut adj: Vec<Option<Var>> = vec![None; upto + 1];
        let seed = self.constant(Tensor::scalar(1.0))?;
        adj[upto] = Some(seed);

        for id in (0..=upto).rev() {
            let Some(g) = adj[id] else { continue };
            let node = &self.nodes[id];
            if !node.requires && !matches!(node.op, Op::Leaf) {
                continue;
            }
            let out = Var { id: id as u32 };
            // Clone the op descriptor so the borrow on self ends before we
            // start recording adjoint nodes.
            let op = node.op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(&mut adj, a, g)?;
                    self.acc(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, a, g)?;
                    if self.req(b) {
                        let ng = self.neg(g)?;
                        self.acc(&mut adj, b, ng)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.req(a) {
                        let ga = self.mul(g, b)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                    if self.req(b) {
                        let gb = self.mul(g, a)?;
                        self.acc(&mut adj, b, gb)?;
                    }
                }
                Op::Neg(a) => {
                    if self.req(a) {
                        let ga = self.neg(g)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::Scale(a, c) => {
                    if self.req(a) {
                        let ga = self.scale(g, c)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::AddScalar(a) => {
                    self.acc(&mut adj, a, g)?;
                }
                Op::Smul(s, x) => {
                    if self.req(s) {
                        let prod = self.mul(g, x)?;
                        let gs = self.sum(prod)?;
                        self.acc(&mut adj, s, gs)?;
                    }
                    if self.req(x) {
                        let gx = self.smul(s, g)?;
                        self.acc(&mut adj, x, gx)?;
                    }
                }
                Op::Matmul(a, b) => {
                    if self.req(a) {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                    if self.req(b) {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        self.acc(&mut adj, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    if self.req(a) {
                        let ga = self.transpose(g)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::RowSoftmax(a) => {
                    if self.req(a) {
                        let cols = self.shape(out)[1];
                        let gy = self.mul(g, out)?;
                        let srow = self.row_sum(gy)?;
                        let sb = self.broadcast_col(srow, cols)?;
                        let diff = self.sub(g, sb)?;
                        let ga = self.mul(out, diff)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::Tanh(a) => {
                    if self.req(a) {
                        let yy = self.mul(out, out)?;
                        let nyy = self.neg(yy)?;
                        let der = self.add_scalar(nyy, 1.0)?;
                        let ga = self.mul(g, der)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::Sqrt(a) => {
                    if self.req(a) {
                        let two_y = self.scale(out, 2.0)?;
                        let inv = self.safe_recip(two_y)?;
                        let ga = self.mul(g, inv)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::SafeRecip(a) => {
                    if self.req(a) {
                        let yy = self.mul(out, out)?;
                        let gyy = self.mul(g, yy)?;
                        let ga = self.neg(gyy)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::Abs(a) => {
                    if self.req(a) {
                        let sg = self.sign(a)?;
                        let ga = self.mul(g, sg)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::Sign => {}
                Op::L2Norm(a) => {
                    if self.req(a) {
                        let inv = self.safe_recip(out)?;
                        let s = self.mul(g, inv)?;
                        let ga = self.smul(s, a)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::Sum(a) => {
                    if self.req(a) {
                        let shape = self.shape(a).to_vec();
                        let numel: usize = shape.iter().product();
                        let ones = self.push(Op::Leaf, shape, vec![1.0; numel], false);
                        let ga = self.smul(g, ones)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::RowSum(a) => {
                    if self.req(a) {
                        let cols = self.shape(a)[1];
                        let ga = self.broadcast_col(g, cols)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::ColSum(a) => {
                    if self.req(a) {
                        let rows = self.shape(a)[0];
                        let ga = self.broadcast_row(g, rows)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::BroadcastCol(a) => {
                    if self.req(a) {
                        let ga = self.row_sum(g)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::BroadcastRow(a) => {
                    if self.req(a) {
                        let ga = self.col_sum(g)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = self.shape(out)[1];
                    let mut off = 0;
                    for p in parts {
                        let r = self.shape(p)[0];
                        if self.req(p) {
                            let gp = self.slice(g, off, off + r, 0, cols)?;
                            self.acc(&mut adj, p, gp)?;
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = self.shape(out)[0];
                    let mut off = 0;
                    for p in parts {
                        let c = self.shape(p)[1];
                        if self.req(p) {
                            let gp = self.slice(g, 0, rows, off, off + c)?;
                            self.acc(&mut adj, p, gp)?;
                        }
                        off += c;
                    }
                }
                Op::Slice { x, r0, c0 } => {
                    if self.req(x) {
                        let (rows, cols) = self.dims2(x, "slice")?;
                        let gx = self.pad(g, rows, cols, r0, c0)?;
                        self.acc(&mut adj, x, gx)?;
                    }
                }
                Op::Pad { x, r0, c0 } => {
                    if self.req(x) {
                        let (r, c) = self.dims2(x, "pad")?;
                        let gx = self.slice(g, r0, r0 + r, c0, c0 + c)?;
                        self.acc(&mut adj, x, gx)?;
                    }
                }
                Op::Lookup { table, ids } => {
                    if self.req(table) {
                        let rows = self.shape(table)[0];
                        let gt = self.scatter_rows(g, &ids, rows)?;
                        self.acc(&mut adj, table, gt)?;
                    }
                }
                Op::ScatterRows { x, ids } => {
                    if self.req(x) {
                        let gx = self.lookup(g, &ids)?;
                        self.acc(&mut adj, x, gx)?;
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    if self.req(logits) {
                        let (n, v) = self.dims2(logits, "cross_entropy")?;
                        let sm = self.row_softmax(logits)?;
                        let mut oh = vec![0.0; n * v];
                        for (i, &t) in targets.iter().enumerate() {
                            oh[i * v + t as usize] = 1.0;
                        }
                        let onehot = self.push(Op::Leaf, vec![n, v], oh, false);
                        let diff = self.sub(sm, onehot)?;
                        let gscaled = self.scale(g, 1.0 / n as f64)?;
                        let gl = self.smul(gscaled, diff)?;
                        self.acc(&mut adj, logits, gl)?;
                    }
                }
                Op::Reshape(a) => {
                    if self.req(a) {
                        let shape = self.shape(a).to_vec();
                        let ga = self.reshape(g, shape)?;
                        self.acc(&mut adj, a, ga)?;
                    }
                }
            }
        }
        Ok(adj)
    }

    fn acc(&mut self, adj: &mut [Option<Var>], v: Var, g: Var) -> Result<()> {
        // Constants never need adjoints; skipping them keeps the sweep and
        // the tape small.
        if !self.req(v) {
            return Ok(());
        }
        let slot = v.id() as usize;
        adj[slot] = Some(match adj[slot] {
            None => g,
            Some(prev) => self.add(prev, g)?,
        });
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Smul(..) => "smul",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::RowSoftmax(..) => "row_softmax",
        Op::Tanh(..) => "tanh",
        Op::Sqrt(..) => "sqrt",
        Op::SafeRecip(..) => "safe_recip",
        Op::Abs(..) => "abs",
        Op::Sign => "sign",
        Op::L2Norm(..) => "l2_norm",
        Op::Sum(..) => "sum",
        Op::RowSum(..) => "row_sum",
        Op::ColSum(..) => "col_sum",
        Op::BroadcastCol(..) => "broadcast_col",
        Op::BroadcastRow(..) => "broadcast_row",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Slice { .. } => "slice",
        Op::Pad { .. } => "pad",
        Op::Lookup { .. } => "lookup",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Reshape(..) => "reshape",
    }
}
