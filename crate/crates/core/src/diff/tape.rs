//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every forward operation of one training step; calling
//! [`Tape::backward`] replays the record in reverse and accumulates exact
//! vector-Jacobian products. The tape is scoped to a single step and dropped
//! afterwards. Forward and backward over one tape are single-threaded;
//! parallelism happens across tapes (one per sample), never inside one.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, F),
    PowScalar(Var, F),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, F, F),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: F },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    L2Norm(Var),
    Dot(Var, Var),
    Gather { x: Var, indices: Vec<usize> },
    AddRowVec { m: Var, v: Var },
    RowNormalize(Var),
}

struct Node<F> {
    tensor: Tensor<F>,
    op: Op<F>,
}

/// Gradients of a scalar output with respect to every tape node that
/// received one.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor<F>, op: Op<F>) -> Var {
        debug_assert!(tensor.all_finite(), "non-finite values produced by a tape op");
        let id = self.nodes.len();
        self.nodes.push(Node { tensor, op });
        Var(id)
    }

    /// Insert a differentiable input.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        self.push(tensor.with_grad(), Op::Leaf)
    }

    /// Insert a non-differentiable input (labels, masks, fixed prototypes).
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        let mut t = tensor;
        if t.requires_grad() {
            t = Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("valid tensor");
        }
        self.push(t, Op::Leaf)
    }

    /// Insert an input, honoring its `requires_grad` flag.
    pub fn input(&mut self, tensor: Tensor<F>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.index()].tensor
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.index()].tensor.shape()
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        matmul_nn(self.value(a).values(), self.value(b).values(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {} input", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).values();
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn zip_op(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op_name,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let out: Vec<F> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), out)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).values().iter().any(|&y| y == F::ZERO) {
            return Err(Error::degenerate("div", "zero denominator entry"));
        }
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ── scalar parameter ops ─────────────────────────────────────────

    fn map_op(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out: Vec<F> = self.value(x).values().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape_of(x).to_vec(), out).expect("shape preserved");
        self.push(t, op)
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Var {
        self.map_op(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: F) -> Var {
        self.map_op(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -F::ONE)
    }

    /// Elementwise `x^e` for constant `e ≥ 0`. Negative bases are rejected;
    /// at `x = 0` the derivative convention is 0 except for `e = 1`.
    pub fn pow_scalar(&mut self, x: Var, e: F) -> Result<Var> {
        if self.value(x).values().iter().any(|&v| v < F::ZERO) {
            return Err(Error::degenerate("pow_scalar", "negative base"));
        }
        Ok(self.map_op(
            x,
            |v| {
                if v == F::ZERO {
                    if e == F::ZERO {
                        F::ONE
                    } else {
                        F::ZERO
                    }
                } else {
                    v.powf(e)
                }
            },
            Op::PowScalar(x, e),
        ))
    }

    // ── elementwise nonlinearities ───────────────────────────────────

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).values().iter().any(|&v| v <= F::ZERO) {
            return Err(Error::degenerate("ln", "non-positive input"));
        }
        Ok(self.map_op(x, |v| v.ln(), Op::Ln(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| if v > F::ZERO { v } else { F::ZERO }, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_op(x, gelu_value, Op::Gelu(x))
    }

    /// Clamps every entry to `[lo, hi]`. The gradient passes through
    /// wherever the input is inside the bounds (inclusive) and is zero
    /// outside.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var> {
        if lo > hi {
            return Err(Error::contract("clamp", "lo exceeds hi"));
        }
        Ok(self.map_op(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, sigmoid_value, Op::Sigmoid(x))
    }

    /// `log(1 + exp(x))` in the overflow-safe form.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map_op(x, softplus_value, Op::Softplus(x))
    }

    /// Softmax over the last axis: per row for matrices, over the whole
    /// vector for rank-1 input. Rows are shifted by their max before
    /// exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        let (rows, cols) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            r => return Err(Error::shape("softmax", format!("rank {} input", r))),
        };
        let xv = self.value(x).values();
        let mut out = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::ZERO;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= sum;
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::SoftmaxRows(x)))
    }

    /// Per-row layer normalization with learned gain and bias of length
    /// `cols`. Rank-1 input is treated as a single row.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        let (rows, cols) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            r => return Err(Error::shape("layer_norm", format!("rank {} input", r))),
        };
        if self.shape_of(gain) != [cols] || self.shape_of(bias) != [cols] {
            return Err(Error::shape("layer_norm", "gain/bias must match row width".to_string()));
        }
        let xv = self.value(x).values();
        let gv = self.value(gain).values().to_vec();
        let bv = self.value(bias).values().to_vec();
        let n = F::from_count(cols);
        let mut out = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(F::ZERO, |a, &v| a + v) / n;
            let var = row.iter().fold(F::ZERO, |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv_std = (var + eps).sqrt().recip();
            for c in 0..cols {
                out[r * cols + c] = gv[c] * (row[c] - mean) * inv_std + bv[c];
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::LayerNormRows { x, gain, bias, eps }))
    }

    // ── structure ops ────────────────────────────────────────────────

    /// Concatenate along `axis` (0 or 1). Rank-1 inputs concat along axis 0.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let rank = self.shape_of(parts[0]).len();
        if parts.iter().any(|&p| self.shape_of(p).len() != rank) {
            return Err(Error::shape("concat", "mixed ranks".to_string()));
        }
        match (rank, axis) {
            (1, 0) => {
                let mut out = Vec::new();
                for &p in parts {
                    out.extend_from_slice(self.value(p).values());
                }
                let t = Tensor::vector(out);
                Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }))
            }
            (2, 0) => {
                let cols = self.shape_of(parts[0])[1];
                if parts.iter().any(|&p| self.shape_of(p)[1] != cols) {
                    return Err(Error::shape("concat", "column mismatch".to_string()));
                }
                let mut out = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    rows += self.shape_of(p)[0];
                    out.extend_from_slice(self.value(p).values());
                }
                let t = Tensor::new(vec![rows, cols], out)?;
                Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }))
            }
            (2, 1) => {
                let rows = self.shape_of(parts[0])[0];
                if parts.iter().any(|&p| self.shape_of(p)[0] != rows) {
                    return Err(Error::shape("concat", "row mismatch".to_string()));
                }
                let total_cols: usize = parts.iter().map(|&p| self.shape_of(p)[1]).sum();
                let mut out = vec![F::ZERO; rows * total_cols];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape_of(p)[1];
                    let pv = self.value(p).values();
                    for r in 0..rows {
                        out[r * total_cols + offset..r * total_cols + offset + pc]
                            .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
                    }
                    offset += pc;
                }
                let t = Tensor::new(vec![rows, total_cols], out)?;
                Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }))
            }
            _ => Err(Error::shape("concat", format!("axis {} on rank {}", axis, rank))),
        }
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        let xv = self.value(x).values();
        match (s.len(), axis) {
            (1, 0) => {
                if start + len > s[0] {
                    return Err(Error::shape("slice", "out of bounds".to_string()));
                }
                let t = Tensor::vector(xv[start..start + len].to_vec());
                Ok(self.push(t, Op::Slice { x, axis, start, len }))
            }
            (2, 0) => {
                let cols = s[1];
                if start + len > s[0] {
                    return Err(Error::shape("slice", "row range out of bounds".to_string()));
                }
                let t = Tensor::new(vec![len, cols], xv[start * cols..(start + len) * cols].to_vec())?;
                Ok(self.push(t, Op::Slice { x, axis, start, len }))
            }
            (2, 1) => {
                let (rows, cols) = (s[0], s[1]);
                if start + len > cols {
                    return Err(Error::shape("slice", "column range out of bounds".to_string()));
                }
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
                }
                let t = Tensor::new(vec![rows, len], out)?;
                Ok(self.push(t, Op::Slice { x, axis, start, len }))
            }
            _ => Err(Error::shape("slice", format!("axis {} on rank {}", axis, s.len()))),
        }
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape_of(x), new_shape),
            ));
        }
        let t = Tensor::new(new_shape, self.value(x).values().to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().fold(F::ZERO, |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).values().iter().fold(F::ZERO, |a, &v| a + v);
        self.push(Tensor::scalar(s / F::from_count(n)), Op::MeanAll(x))
    }

    /// Column means of a matrix: `[rows, cols] -> [cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 2 {
            return Err(Error::shape("mean_rows", format!("rank {} input", s.len())));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x).values();
        let n = F::from_count(rows);
        let mut out = vec![F::ZERO; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += xv[r * cols + c];
            }
        }
        for o in &mut out {
            *o /= n;
        }
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::MeanRows(x)))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).frobenius_norm();
        self.push(Tensor::scalar(n), Op::L2Norm(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let d = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .fold(F::ZERO, |acc, (&x, &y)| acc + x * y);
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b)))
    }

    /// Select entries of a rank-1 tensor by index (repeats allowed).
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 1 {
            return Err(Error::shape("gather", format!("rank {} input", s.len())));
        }
        let len = s[0];
        if indices.iter().any(|&i| i >= len) {
            return Err(Error::shape("gather", "index out of bounds".to_string()));
        }
        let xv = self.value(x).values();
        let out: Vec<F> = indices.iter().map(|&i| xv[i]).collect();
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::Gather { x, indices: indices.to_vec() }))
    }

    /// Broadcast-add a length-`cols` vector to every row of a matrix.
    pub fn add_row_vec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape_of(m).to_vec(), self.shape_of(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::shape("add_row_vec", format!("{:?} + {:?}", sm, sv)));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mv = self.value(m).values();
        let vv = self.value(v).values().to_vec();
        let mut out = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = mv[r * cols + c] + vv[c];
            }
        }
        let t = Tensor::new(sm, out)?;
        Ok(self.push(t, Op::AddRowVec { m, v }))
    }

    /// Normalize each row to unit L2 norm. Zero-norm rows are an error.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        let (rows, cols) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            r => return Err(Error::shape("row_normalize", format!("rank {} input", r))),
        };
        let xv = self.value(x).values();
        let mut out = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let norm = row.iter().fold(F::ZERO, |a, &v| a + v * v).sqrt();
            if norm == F::ZERO {
                return Err(Error::degenerate("row_normalize", format!("zero-norm row {}", r)));
            }
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::RowNormalize(x)))
    }

    // ── composites ───────────────────────────────────────────────────

    /// Cosine similarity of two equal-length vectors; errors on zero norm
    /// rather than silently returning 0.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape_of(u).len() != 1 || self.shape_of(u) != self.shape_of(v) {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", self.shape_of(u), self.shape_of(v)),
            ));
        }
        let nu = self.value(u).frobenius_norm();
        let nv = self.value(v).frobenius_norm();
        if nu == F::ZERO || nv == F::ZERO {
            return Err(Error::degenerate("cosine_sim", "zero-norm input vector"));
        }
        let d = self.dot(u, v)?;
        let a = self.l2_norm(u);
        let b = self.l2_norm(v);
        let ab = self.mul(a, b)?;
        self.div(d, ab)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::contract("mean_scalars", "empty list"));
        }
        for &v in vars {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("mean_scalars", "non-scalar term".to_string()));
            }
        }
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(self.mul_scalar(acc, F::ONE / F::from_count(vars.len())))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Returns gradients for every node
    /// reached; leaves inserted via [`Tape::constant`] are skipped.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<F>> {
        if self.value(output).numel() != 1 {
            return Err(Error::contract("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[output.index()] = Some(vec![F::ONE]);

        for i in (0..self.nodes.len()).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|values| {
                    Tensor::new(self.nodes[i].tensor.shape().to_vec(), values)
                        .expect("gradient shape matches node")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, delta: &[F]) {
        // Constants do not need storage; interior nodes and grad-leaves do.
        let node = &self.nodes[v.index()];
        if matches!(node.op, Op::Leaf) && !node.tensor.requires_grad() {
            return;
        }
        match &mut grads[v.index()] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => grads[v.index()] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, i: usize, op: &Op<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape_of(a);
                let sb = self.shape_of(b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let mut da = vec![F::ZERO; m * k];
                matmul_nt(g, bv, m, n, k, &mut da);
                self.accumulate(grads, a, &da);
                let mut db = vec![F::ZERO; k * n];
                matmul_tn(av, g, m, k, n, &mut db);
                self.accumulate(grads, b, &db);
            }
            Op::Transpose(x) => {
                let s = self.shape_of(x);
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![F::ZERO; r * c];
                for ii in 0..c {
                    for jj in 0..r {
                        dx[jj * c + ii] = g[ii * r + jj];
                    }
                }
                self.accumulate(grads, x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                self.accumulate(grads, b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let da: Vec<F> = g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, a, &da);
                let db: Vec<F> = g.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                self.accumulate(grads, b, &db);
            }
            Op::Div(a, b) => {
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let da: Vec<F> = g.iter().zip(bv).map(|(&gi, &y)| gi / y).collect();
                self.accumulate(grads, a, &da);
                let db: Vec<F> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                    .collect();
                self.accumulate(grads, b, &db);
            }
            Op::AddScalar(x) => self.accumulate(grads, x, g),
            Op::MulScalar(x, s) => {
                let dx: Vec<F> = g.iter().map(|&gi| gi * s).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::PowScalar(x, e) => {
                let xv = self.value(x).values();
                let dx: Vec<F> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| {
                        if v == F::ZERO {
                            if e == F::ONE {
                                gi
                            } else {
                                F::ZERO
                            }
                        } else {
                            gi * e * v.powf(e - F::ONE)
                        }
                    })
                    .collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Exp(x) => {
                let yv = self.nodes[i].tensor.values();
                let dx: Vec<F> = g.iter().zip(yv).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Ln(x) => {
                let xv = self.value(x).values();
                let dx: Vec<F> = g.iter().zip(xv).map(|(&gi, &v)| gi / v).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Relu(x) => {
                let xv = self.value(x).values();
                let dx: Vec<F> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > F::ZERO { gi } else { F::ZERO })
                    .collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(x).values();
                let dx: Vec<F> = g.iter().zip(xv).map(|(&gi, &v)| gi * gelu_derivative(v)).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(x).values();
                let dx: Vec<F> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v >= lo && v <= hi { gi } else { F::ZERO })
                    .collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[i].tensor.values();
                let dx: Vec<F> = g
                    .iter()
                    .zip(yv)
                    .map(|(&gi, &y)| gi * y * (F::ONE - y))
                    .collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Softplus(x) => {
                let xv = self.value(x).values();
                let dx: Vec<F> = g.iter().zip(xv).map(|(&gi, &v)| gi * sigmoid_value(v)).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::SoftmaxRows(x) => {
                let yv = self.nodes[i].tensor.values();
                let s = self.shape_of(x);
                let (rows, cols) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let mut dx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = F::ZERO;
                    for c in 0..cols {
                        dot += g[base + c] * yv[base + c];
                    }
                    for c in 0..cols {
                        dx[base + c] = yv[base + c] * (g[base + c] - dot);
                    }
                }
                self.accumulate(grads, x, &dx);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let s = self.shape_of(x);
                let (rows, cols) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let xv = self.value(x).values();
                let gv = self.value(gain).values();
                let n = F::from_count(cols);
                let mut dx = vec![F::ZERO; rows * cols];
                let mut dgain = vec![F::ZERO; cols];
                let mut dbias = vec![F::ZERO; cols];
                for r in 0..rows {
                    let base = r * cols;
                    let row = &xv[base..base + cols];
                    let mean = row.iter().fold(F::ZERO, |a, &v| a + v) / n;
                    let var = row.iter().fold(F::ZERO, |a, &v| a + (v - mean) * (v - mean)) / n;
                    let inv_std = (var + eps).sqrt().recip();
                    // dxhat, and the two row means the VJP needs
                    let mut mean_dxhat = F::ZERO;
                    let mut mean_dxhat_xhat = F::ZERO;
                    let mut xhat = vec![F::ZERO; cols];
                    let mut dxhat = vec![F::ZERO; cols];
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * inv_std;
                        dxhat[c] = g[base + c] * gv[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                        dgain[c] += g[base + c] * xhat[c];
                        dbias[c] += g[base + c];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for c in 0..cols {
                        dx[base + c] = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) * inv_std;
                    }
                }
                self.accumulate(grads, x, &dx);
                self.accumulate(grads, gain, &dgain);
                self.accumulate(grads, bias, &dbias);
            }
            Op::Concat { ref parts, axis } => {
                let rank = self.shape_of(parts[0]).len();
                match (rank, axis) {
                    (1, 0) | (2, 0) => {
                        let mut offset = 0;
                        for &p in parts {
                            let numel = self.value(p).numel();
                            self.accumulate(grads, p, &g[offset..offset + numel]);
                            offset += numel;
                        }
                    }
                    (2, 1) => {
                        let rows = self.shape_of(parts[0])[0];
                        let total_cols: usize = parts.iter().map(|&p| self.shape_of(p)[1]).sum();
                        let mut offset = 0;
                        for &p in parts {
                            let pc = self.shape_of(p)[1];
                            let mut dp = vec![F::ZERO; rows * pc];
                            for r in 0..rows {
                                dp[r * pc..(r + 1) * pc].copy_from_slice(
                                    &g[r * total_cols + offset..r * total_cols + offset + pc],
                                );
                            }
                            self.accumulate(grads, p, &dp);
                            offset += pc;
                        }
                    }
                    _ => unreachable!("validated at forward"),
                }
            }
            Op::Slice { x, axis, start, len } => {
                let s = self.shape_of(x);
                let mut dx = vec![F::ZERO; self.value(x).numel()];
                match (s.len(), axis) {
                    (1, 0) => dx[start..start + len].copy_from_slice(g),
                    (2, 0) => {
                        let cols = s[1];
                        dx[start * cols..(start + len) * cols].copy_from_slice(g);
                    }
                    (2, 1) => {
                        let (rows, cols) = (s[0], s[1]);
                        for r in 0..rows {
                            dx[r * cols + start..r * cols + start + len]
                                .copy_from_slice(&g[r * len..(r + 1) * len]);
                        }
                    }
                    _ => unreachable!("validated at forward"),
                }
                self.accumulate(grads, x, &dx);
            }
            Op::Reshape(x) => self.accumulate(grads, x, g),
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.value(x).numel()];
                self.accumulate(grads, x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.value(x).numel();
                let dx = vec![g[0] / F::from_count(n); n];
                self.accumulate(grads, x, &dx);
            }
            Op::MeanRows(x) => {
                let s = self.shape_of(x);
                let (rows, cols) = (s[0], s[1]);
                let scale = F::from_count(rows).recip();
                let mut dx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c] * scale;
                    }
                }
                self.accumulate(grads, x, &dx);
            }
            Op::L2Norm(x) => {
                let xv = self.value(x).values();
                let norm = self.nodes[i].tensor.item();
                if norm == F::ZERO {
                    return;
                }
                let dx: Vec<F> = xv.iter().map(|&v| g[0] * v / norm).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Dot(a, b) => {
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let da: Vec<F> = bv.iter().map(|&y| g[0] * y).collect();
                self.accumulate(grads, a, &da);
                let db: Vec<F> = av.iter().map(|&x| g[0] * x).collect();
                self.accumulate(grads, b, &db);
            }
            Op::Gather { x, ref indices } => {
                let mut dx = vec![F::ZERO; self.value(x).numel()];
                for (pos, &idx) in indices.iter().enumerate() {
                    dx[idx] += g[pos];
                }
                self.accumulate(grads, x, &dx);
            }
            Op::AddRowVec { m, v } => {
                self.accumulate(grads, m, g);
                let cols = self.shape_of(v)[0];
                let rows = self.shape_of(m)[0];
                let mut dv = vec![F::ZERO; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[c] += g[r * cols + c];
                    }
                }
                self.accumulate(grads, v, &dv);
            }
            Op::RowNormalize(x) => {
                let s = self.shape_of(x);
                let (rows, cols) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let xv = self.value(x).values();
                let yv = self.nodes[i].tensor.values();
                let mut dx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let norm = xv[base..base + cols]
                        .iter()
                        .fold(F::ZERO, |a, &v| a + v * v)
                        .sqrt();
                    let mut dot = F::ZERO;
                    for c in 0..cols {
                        dot += g[base + c] * yv[base + c];
                    }
                    for c in 0..cols {
                        dx[base + c] = (g[base + c] - yv[base + c] * dot) / norm;
                    }
                }
                self.accumulate(grads, x, &dx);
            }
        }
    }
}

// ── stable elementwise kernels ───────────────────────────────────────

pub(crate) fn sigmoid_value<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

pub(crate) fn softplus_value<F: Scalar>(x: F) -> F {
    x.max(F::ZERO) + (-x.abs()).exp().ln_1p()
}

/// GELU via the tanh approximation; smooth everywhere, which keeps the
/// finite-difference checks clean.
pub(crate) fn gelu_value<F: Scalar>(x: F) -> F {
    let c = F::cast(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::cast(0.044_715);
    let u = c * (x + k * x * x * x);
    F::HALF * x * (F::ONE + u.tanh())
}

pub(crate) fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::cast(0.797_884_560_802_865_4);
    let k = F::cast(0.044_715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::ONE - t * t;
    let du = c * (F::ONE + F::cast(3.0) * k * x * x);
    F::HALF * (F::ONE + t) + F::HALF * x * sech2 * du
}

// ── raw matmul kernels (row-major) ───────────────────────────────────

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T  (dot of rows with rows)
fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = F::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
