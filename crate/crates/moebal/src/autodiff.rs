//! Tape-based reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] owns every tensor buffer created on it and records one entry
//! per operation in creation order, which is already a topological order.
//! [`Tensor`] is a cheap handle (tape + slot index). Calling
//! [`Tensor::backward`] on a scalar walks the record in reverse exactly once
//! and accumulates gradients additively, so a tensor used k times receives
//! the sum of k single-use gradients.
//!
//! Everything is f64, row-major, and single-threaded per tape. Broadcasting
//! is limited to a right-hand side whose shape is a suffix of the left-hand
//! side (a per-row vector against a matrix); anything richer must be spelled
//! out by the caller. Op outputs are checked for NaN/Inf with debug
//! assertions only, so timed release runs pay nothing; leaf data coming from
//! outside the tape is always validated.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// One tensor buffer living in the tape arena.
struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Slot {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Recorded operation: slot indices plus whatever the backward rule needs.
enum OpRecord {
    MatMul { a: usize, b: usize, out: usize },
    Transpose { a: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    Sigmoid { a: usize, out: usize },
    Softmax { a: usize, axis: usize, out: usize },
    /// Row-wise softmax over a square [T, T] matrix where row t only sees
    /// columns 0..=t; columns beyond t are exactly zero in the output.
    CausalSoftmax { a: usize, out: usize },
    Sum { a: usize, out: usize },
    Mean { a: usize, out: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        /// Normalized activations, same shape as x.
        xhat: Vec<f64>,
        /// 1 / sqrt(var + eps), one per lane.
        inv_std: Vec<f64>,
    },
    Embedding { table: usize, ids: Vec<u32>, out: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        out: usize,
        /// Softmax probabilities saved from the forward pass.
        probs: Vec<f64>,
    },
    GatherRows { a: usize, rows: Vec<usize>, out: usize },
    GatherElems { a: usize, idx: Vec<usize>, out: usize },
    ScaleRows { x: usize, w: usize, out: usize },
    DivRows { x: usize, w: usize, out: usize },
    ScatterRows { a: usize, rows: Vec<usize>, out_rows: usize, out: usize },
}

#[derive(Default)]
struct TapeInner {
    slots: Vec<Slot>,
    ops: Vec<OpRecord>,
}

/// The recording tape. Clones share the same arena.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tensor on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[inline]
fn debug_assert_finite(data: &[f64], op: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {op}"
    );
    let _ = op;
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner::default())),
        }
    }

    /// Creates a leaf tensor from external data. Data is always validated
    /// for finiteness since it crosses the tape boundary.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if product(shape) != data.len() {
            return Err(Error::dim(format!(
                "leaf: shape {:?} holds {} elements, got {}",
                shape,
                product(shape),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("leaf data contains NaN/Inf".to_string()));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad))
    }

    /// Scalar constant (rank 0).
    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(Vec::new(), vec![v], false)
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.slots.len();
        inner.slots.push(Slot {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    fn record(&self, op: OpRecord) {
        self.inner.borrow_mut().ops.push(op);
    }

    pub fn num_ops(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn num_tensors(&self) -> usize {
        self.inner.borrow().slots.len()
    }
}

impl Tensor {
    /// The tape this tensor lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().slots[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().slots[self.id].numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().slots[self.id].requires_grad
    }

    /// Snapshot of the value buffer.
    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().slots[self.id].data.clone()
    }

    /// Runs `f` over the value buffer without copying it out.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.inner.borrow().slots[self.id].data)
    }

    /// The single value of a scalar tensor.
    pub fn value(&self) -> Result<f64> {
        let inner = self.tape.inner.borrow();
        let slot = &inner.slots[self.id];
        if slot.numel() != 1 {
            return Err(Error::contract(format!(
                "value: tensor has {} elements, expected scalar",
                slot.numel()
            )));
        }
        Ok(slot.data[0])
    }

    /// Gradient buffer populated by the last `backward` call, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().slots[self.id].grad.clone()
    }

    fn unary_shapes(&self) -> (Vec<usize>, Vec<f64>) {
        let inner = self.tape.inner.borrow();
        let slot = &inner.slots[self.id];
        (slot.shape.clone(), slot.data.clone())
    }

    /// 2-D matrix product. Backward accumulates dA += dC·Bᵀ and dB += Aᵀ·dC.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, da) = self.unary_shapes();
        let (sb, db) = rhs.unary_shapes();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        debug_assert_finite(&out, "matmul");
        let rg = self.requires_grad() || rhs.requires_grad();
        let t = self.tape.push(vec![m, n], out, rg);
        self.tape.record(OpRecord::MatMul {
            a: self.id,
            b: rhs.id,
            out: t.id,
        });
        Ok(t)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose: rank {} != 2", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = self.tape.push(vec![c, r], out, self.requires_grad());
        self.tape.record(OpRecord::Transpose {
            a: self.id,
            out: t.id,
        });
        Ok(t)
    }

    fn binary(&self, rhs: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize)> {
        let (sa, da) = self.unary_shapes();
        let (sb, db) = rhs.unary_shapes();
        let bc = broadcast_kind(&sa, &sb).ok_or_else(|| {
            Error::dim(format!("{name}: shapes {:?} vs {:?}", sa, sb))
        })?;
        let nb = db.len();
        let mut out = Vec::with_capacity(da.len());
        match bc {
            Broadcast::Exact => {
                for (x, y) in da.iter().zip(db.iter()) {
                    out.push(f(*x, *y));
                }
            }
            Broadcast::Suffix => {
                for (i, x) in da.iter().enumerate() {
                    out.push(f(*x, db[i % nb]));
                }
            }
        }
        debug_assert_finite(&out, name);
        let rg = self.requires_grad() || rhs.requires_grad();
        let t = self.tape.push(sa, out, rg);
        Ok((t, rhs.id))
    }

    /// Elementwise add; rhs may be a suffix-shaped broadcast (e.g. a row bias).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (t, b) = self.binary(rhs, "add", |x, y| x + y)?;
        self.tape.record(OpRecord::Add { a: self.id, b, out: t.id });
        Ok(t)
    }

    /// Elementwise subtract with the same broadcast rule as `add`.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (t, b) = self.binary(rhs, "sub", |x, y| x - y)?;
        self.tape.record(OpRecord::Sub { a: self.id, b, out: t.id });
        Ok(t)
    }

    /// Elementwise multiply with the same broadcast rule as `add`.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (t, b) = self.binary(rhs, "mul", |x, y| x * y)?;
        self.tape.record(OpRecord::Mul { a: self.id, b, out: t.id });
        Ok(t)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let (s, d) = self.unary_shapes();
        let out: Vec<f64> = d.iter().map(|x| x * c).collect();
        debug_assert_finite(&out, "scale");
        let t = self.tape.push(s, out, self.requires_grad());
        self.tape.record(OpRecord::Scale { a: self.id, c, out: t.id });
        t
    }

    pub fn sigmoid(&self) -> Tensor {
        let (s, d) = self.unary_shapes();
        let out: Vec<f64> = d.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        debug_assert_finite(&out, "sigmoid");
        let t = self.tape.push(s, out, self.requires_grad());
        self.tape.record(OpRecord::Sigmoid { a: self.id, out: t.id });
        t
    }

    /// x * sigmoid(x); built from recorded ops so the backward rule composes.
    pub fn silu(&self) -> Result<Tensor> {
        self.mul(&self.sigmoid())
    }

    /// Softmax along `axis` with max-shift for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if axis >= s.len() {
            return Err(Error::dim(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                s
            )));
        }
        let lane = s[axis];
        let inner_stride: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for r in 0..inner_stride {
                let base = o * lane * inner_stride + r;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(d[base + l * inner_stride]);
                }
                let mut z = 0.0;
                for l in 0..lane {
                    let e = (d[base + l * inner_stride] - mx).exp();
                    out[base + l * inner_stride] = e;
                    z += e;
                }
                for l in 0..lane {
                    out[base + l * inner_stride] /= z;
                }
            }
        }
        debug_assert_finite(&out, "softmax");
        let t = self.tape.push(s, out, self.requires_grad());
        self.tape.record(OpRecord::Softmax {
            a: self.id,
            axis,
            out: t.id,
        });
        Ok(t)
    }

    /// Causal row softmax over a square score matrix: row t is a softmax of
    /// columns 0..=t only, so positions can never attend forward. Kept
    /// structural (rather than additive masking) so invariance to future
    /// tokens is bit-exact.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim(format!("causal_softmax: shape {:?} not square", s)));
        }
        let n = s[0];
        let mut out = vec![0.0; n * n];
        for t in 0..n {
            let row = &d[t * n..t * n + t + 1];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[t * n + j] = e;
                z += e;
            }
            for j in 0..=t {
                out[t * n + j] /= z;
            }
        }
        debug_assert_finite(&out, "causal_softmax");
        let t = self.tape.push(s, out, self.requires_grad());
        self.tape.record(OpRecord::CausalSoftmax { a: self.id, out: t.id });
        Ok(t)
    }

    /// Full reduction to a scalar.
    pub fn sum(&self) -> Tensor {
        let (_, d) = self.unary_shapes();
        let total: f64 = d.iter().sum();
        let t = self.tape.push(Vec::new(), vec![total], self.requires_grad());
        self.tape.record(OpRecord::Sum { a: self.id, out: t.id });
        t
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&self) -> Tensor {
        let (_, d) = self.unary_shapes();
        let total: f64 = d.iter().sum();
        let m = total / d.len() as f64;
        let t = self.tape.push(Vec::new(), vec![m], self.requires_grad());
        self.tape.record(OpRecord::Mean { a: self.id, out: t.id });
        t
    }

    /// Layer normalization over the last axis with learnable gamma/beta.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        let lane = *s.last().ok_or_else(|| Error::dim("layer_norm: rank 0 input"))?;
        if gamma.shape() != [lane] || beta.shape() != [lane] {
            return Err(Error::dim(format!(
                "layer_norm: gamma/beta must be [{lane}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let g = gamma.data();
        let b = beta.data();
        let lanes = d.len() / lane;
        let mut out = vec![0.0; d.len()];
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; lanes];
        for l in 0..lanes {
            let x = &d[l * lane..(l + 1) * lane];
            let mu: f64 = x.iter().sum::<f64>() / lane as f64;
            let var: f64 = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / lane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[l] = is;
            for j in 0..lane {
                let xh = (x[j] - mu) * is;
                xhat[l * lane + j] = xh;
                out[l * lane + j] = xh * g[j] + b[j];
            }
        }
        debug_assert_finite(&out, "layer_norm");
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let t = self.tape.push(s, out, rg);
        self.tape.record(OpRecord::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            out: t.id,
            xhat,
            inv_std,
        });
        Ok(t)
    }

    /// Row lookup into an embedding table [V, d] by token ids.
    pub fn embedding_lookup(&self, ids: &[u32]) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 {
            return Err(Error::dim("embedding_lookup: table must be 2-D"));
        }
        let (v, dim) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::dim(format!(
                "embedding_lookup: id {bad} out of range for vocab {v}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&d[id as usize * dim..(id as usize + 1) * dim]);
        }
        let t = self.tape.push(vec![ids.len(), dim], out, self.requires_grad());
        self.tape.record(OpRecord::Embedding {
            table: self.id,
            ids: ids.to_vec(),
            out: t.id,
        });
        Ok(t)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// the logits [T, V]. Returns a scalar.
    pub fn cross_entropy(&self, targets: &[u32]) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 {
            return Err(Error::dim("cross_entropy: logits must be 2-D"));
        }
        let (t_rows, v) = (s[0], s[1]);
        if targets.len() != t_rows {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                t_rows
            )));
        }
        if let Some(bad) = targets.iter().find(|&&id| id as usize >= v) {
            return Err(Error::dim(format!(
                "cross_entropy: target {bad} out of range for vocab {v}"
            )));
        }
        let mut probs = vec![0.0; d.len()];
        let mut nll = 0.0;
        for r in 0..t_rows {
            let row = &d[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[r * v + j] /= z;
            }
            let lse = mx + z.ln();
            nll += lse - row[targets[r] as usize];
        }
        let loss = nll / t_rows as f64;
        debug_assert_finite(std::slice::from_ref(&loss), "cross_entropy");
        let t = self.tape.push(Vec::new(), vec![loss], self.requires_grad());
        self.tape.record(OpRecord::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            out: t.id,
            probs,
        });
        Ok(t)
    }

    /// Picks rows of a 2-D tensor; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows: input must be 2-D"));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("gather_rows: row {bad} out of range {r}")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let t = self.tape.push(vec![rows.len(), c], out, self.requires_grad());
        self.tape.record(OpRecord::GatherRows {
            a: self.id,
            rows: rows.to_vec(),
            out: t.id,
        });
        Ok(t)
    }

    /// Picks arbitrary elements (by flat index) into a 1-D tensor.
    pub fn gather_elems(&self, idx: &[usize]) -> Result<Tensor> {
        let (_, d) = self.unary_shapes();
        if let Some(bad) = idx.iter().find(|&&i| i >= d.len()) {
            return Err(Error::dim(format!(
                "gather_elems: flat index {bad} out of range {}",
                d.len()
            )));
        }
        let out: Vec<f64> = idx.iter().map(|&i| d[i]).collect();
        let t = self.tape.push(vec![idx.len()], out, self.requires_grad());
        self.tape.record(OpRecord::GatherElems {
            a: self.id,
            idx: idx.to_vec(),
            out: t.id,
        });
        Ok(t)
    }

    /// Multiplies row i of a 2-D tensor by w[i]; gradients flow to both.
    pub fn scale_rows(&self, w: &Tensor) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 || w.shape() != [s[0]] {
            return Err(Error::dim(format!(
                "scale_rows: x {:?} with weights {:?}",
                s,
                w.shape()
            )));
        }
        let (r, c) = (s[0], s[1]);
        let wd = w.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = d[i * c + j] * wd[i];
            }
        }
        debug_assert_finite(&out, "scale_rows");
        let rg = self.requires_grad() || w.requires_grad();
        let t = self.tape.push(s, out, rg);
        self.tape.record(OpRecord::ScaleRows {
            x: self.id,
            w: w.id,
            out: t.id,
        });
        Ok(t)
    }

    /// Divides row i of a 2-D tensor by w[i]; gradients flow to both.
    pub fn div_rows(&self, w: &Tensor) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 || w.shape() != [s[0]] {
            return Err(Error::dim(format!(
                "div_rows: x {:?} with weights {:?}",
                s,
                w.shape()
            )));
        }
        let (r, c) = (s[0], s[1]);
        let wd = w.data();
        if wd.iter().any(|&v| v == 0.0) {
            return Err(Error::contract("div_rows: zero divisor"));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = d[i * c + j] / wd[i];
            }
        }
        debug_assert_finite(&out, "div_rows");
        let rg = self.requires_grad() || w.requires_grad();
        let t = self.tape.push(s, out, rg);
        self.tape.record(OpRecord::DivRows {
            x: self.id,
            w: w.id,
            out: t.id,
        });
        Ok(t)
    }

    /// Spreads rows of an [m, d] tensor into a zero [out_rows, d] tensor at
    /// the given row indices, accumulating on duplicates.
    pub fn scatter_rows(&self, rows: &[usize], out_rows: usize) -> Result<Tensor> {
        let (s, d) = self.unary_shapes();
        if s.len() != 2 || rows.len() != s[0] {
            return Err(Error::dim(format!(
                "scatter_rows: {} indices for {:?}",
                rows.len(),
                s
            )));
        }
        let c = s[1];
        if let Some(bad) = rows.iter().find(|&&i| i >= out_rows) {
            return Err(Error::dim(format!(
                "scatter_rows: row {bad} out of range {out_rows}"
            )));
        }
        let mut out = vec![0.0; out_rows * c];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..c {
                out[r * c + j] += d[i * c + j];
            }
        }
        let t = self.tape.push(vec![out_rows, c], out, self.requires_grad());
        self.tape.record(OpRecord::ScatterRows {
            a: self.id,
            rows: rows.to_vec(),
            out_rows,
            out: t.id,
        });
        Ok(t)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are zeroed first,
    /// then every operation is visited exactly once in reverse order.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.slots[self.id].numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss has {} elements, expected scalar",
                inner.slots[self.id].numel()
            )));
        }
        let nslots = inner.slots.len();
        for s in inner.slots.iter_mut() {
            s.grad = None;
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); nslots];
        grads[self.id] = vec![1.0];

        // Avoid borrow conflicts: walk op records while indexing grads/data.
        let inner = &mut *inner;
        for op in inner.ops.iter().rev() {
            step_backward(op, &inner.slots, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if !g.is_empty() && inner.slots[i].requires_grad {
                inner.slots[i].grad = Some(g);
            }
        }
        Ok(())
    }
}

enum Broadcast {
    Exact,
    Suffix,
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Exact)
    } else if rhs.len() < lhs.len() && lhs.ends_with(rhs) && !rhs.is_empty() {
        Some(Broadcast::Suffix)
    } else {
        None
    }
}

fn ensure(grads: &mut [Vec<f64>], id: usize, n: usize) {
    if grads[id].is_empty() {
        grads[id] = vec![0.0; n];
    }
}

/// Accumulates `go` into grads[id], reducing over leading dims when the
/// holder is smaller than the flowing gradient (suffix broadcast).
fn accumulate_reduced(grads: &mut [Vec<f64>], id: usize, n_target: usize, go: &[f64]) {
    ensure(grads, id, n_target);
    let g = &mut grads[id];
    if n_target == go.len() {
        for (gi, &v) in g.iter_mut().zip(go.iter()) {
            *gi += v;
        }
    } else {
        for (i, &v) in go.iter().enumerate() {
            g[i % n_target] += v;
        }
    }
}

fn step_backward(op: &OpRecord, slots: &[Slot], grads: &mut [Vec<f64>]) {
    macro_rules! go {
        ($out:expr) => {{
            if grads[$out].is_empty() {
                return;
            }
            grads[$out].clone()
        }};
    }
    match op {
        OpRecord::MatMul { a, b, out } => {
            let go = go!(*out);
            let (m, k) = (slots[*a].shape[0], slots[*a].shape[1]);
            let n = slots[*b].shape[1];
            let da = &slots[*a].data;
            let db = &slots[*b].data;
            ensure(grads, *a, m * k);
            for i in 0..m {
                let grow = &go[i * n..(i + 1) * n];
                for kk in 0..k {
                    let brow = &db[kk * n..(kk + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grow[j] * brow[j];
                    }
                    grads[*a][i * k + kk] += acc;
                }
            }
            ensure(grads, *b, k * n);
            for i in 0..m {
                let grow = &go[i * n..(i + 1) * n];
                let arow = &da[i * k..(i + 1) * k];
                for (kk, &aik) in arow.iter().enumerate() {
                    if aik == 0.0 {
                        continue;
                    }
                    let gb = &mut grads[*b][kk * n..(kk + 1) * n];
                    for j in 0..n {
                        gb[j] += aik * grow[j];
                    }
                }
            }
        }
        OpRecord::Transpose { a, out } => {
            let go = go!(*out);
            let (r, c) = (slots[*a].shape[0], slots[*a].shape[1]);
            ensure(grads, *a, r * c);
            for i in 0..r {
                for j in 0..c {
                    grads[*a][i * c + j] += go[j * r + i];
                }
            }
        }
        OpRecord::Add { a, b, out } => {
            let go = go!(*out);
            accumulate_reduced(grads, *a, slots[*a].numel(), &go);
            accumulate_reduced(grads, *b, slots[*b].numel(), &go);
        }
        OpRecord::Sub { a, b, out } => {
            let go = go!(*out);
            accumulate_reduced(grads, *a, slots[*a].numel(), &go);
            let neg: Vec<f64> = go.iter().map(|v| -v).collect();
            accumulate_reduced(grads, *b, slots[*b].numel(), &neg);
        }
        OpRecord::Mul { a, b, out } => {
            let go = go!(*out);
            let da = &slots[*a].data;
            let db = &slots[*b].data;
            let nb = db.len();
            let wa: Vec<f64> = go.iter().enumerate().map(|(i, v)| v * db[i % nb]).collect();
            accumulate_reduced(grads, *a, da.len(), &wa);
            let wb: Vec<f64> = go.iter().enumerate().map(|(i, v)| v * da[i]).collect();
            accumulate_reduced(grads, *b, nb, &wb);
        }
        OpRecord::Scale { a, c, out } => {
            let go = go!(*out);
            ensure(grads, *a, slots[*a].numel());
            for (g, &v) in grads[*a].iter_mut().zip(go.iter()) {
                *g += c * v;
            }
        }
        OpRecord::Sigmoid { a, out } => {
            let go = go!(*out);
            let y = &slots[*out].data;
            ensure(grads, *a, slots[*a].numel());
            for i in 0..go.len() {
                grads[*a][i] += go[i] * y[i] * (1.0 - y[i]);
            }
        }
        OpRecord::Softmax { a, axis, out } => {
            let go = go!(*out);
            let s = &slots[*a].shape;
            let lane = s[*axis];
            let inner_stride: usize = s[*axis + 1..].iter().product();
            let outer: usize = s[..*axis].iter().product();
            let y = &slots[*out].data;
            ensure(grads, *a, slots[*a].numel());
            for o in 0..outer {
                for r in 0..inner_stride {
                    let base = o * lane * inner_stride + r;
                    let mut dot = 0.0;
                    for l in 0..lane {
                        let ix = base + l * inner_stride;
                        dot += go[ix] * y[ix];
                    }
                    for l in 0..lane {
                        let ix = base + l * inner_stride;
                        grads[*a][ix] += y[ix] * (go[ix] - dot);
                    }
                }
            }
        }
        OpRecord::CausalSoftmax { a, out } => {
            let go = go!(*out);
            let n = slots[*a].shape[0];
            let y = &slots[*out].data;
            ensure(grads, *a, n * n);
            for t in 0..n {
                let mut dot = 0.0;
                for j in 0..=t {
                    dot += go[t * n + j] * y[t * n + j];
                }
                for j in 0..=t {
                    let ix = t * n + j;
                    grads[*a][ix] += y[ix] * (go[ix] - dot);
                }
            }
        }
        OpRecord::Sum { a, out } => {
            let go = go!(*out)[0];
            ensure(grads, *a, slots[*a].numel());
            for g in grads[*a].iter_mut() {
                *g += go;
            }
        }
        OpRecord::Mean { a, out } => {
            let go = go!(*out)[0];
            let n = slots[*a].numel();
            ensure(grads, *a, n);
            let w = go / n as f64;
            for g in grads[*a].iter_mut() {
                *g += w;
            }
        }
        OpRecord::LayerNorm {
            x,
            gamma,
            beta,
            out,
            xhat,
            inv_std,
        } => {
            let go = go!(*out);
            let lane = slots[*gamma].numel();
            let lanes = slots[*x].numel() / lane;
            let g = &slots[*gamma].data;
            ensure(grads, *x, slots[*x].numel());
            ensure(grads, *gamma, lane);
            ensure(grads, *beta, lane);
            for l in 0..lanes {
                let base = l * lane;
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for j in 0..lane {
                    let dxh = go[base + j] * g[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[base + j];
                }
                let inv_lane = 1.0 / lane as f64;
                for j in 0..lane {
                    let dxh = go[base + j] * g[j];
                    grads[*x][base + j] += inv_std[l]
                        * (dxh - inv_lane * sum_dxh - xhat[base + j] * inv_lane * sum_dxh_xh);
                    grads[*gamma][j] += go[base + j] * xhat[base + j];
                    grads[*beta][j] += go[base + j];
                }
            }
        }
        OpRecord::Embedding { table, ids, out } => {
            let go = go!(*out);
            let dim = slots[*table].shape[1];
            ensure(grads, *table, slots[*table].numel());
            for (t, &id) in ids.iter().enumerate() {
                let dst = &mut grads[*table][id as usize * dim..(id as usize + 1) * dim];
                let src = &go[t * dim..(t + 1) * dim];
                for j in 0..dim {
                    dst[j] += src[j];
                }
            }
        }
        OpRecord::CrossEntropy {
            logits,
            targets,
            out,
            probs,
        } => {
            let go = go!(*out)[0];
            let v = slots[*logits].shape[1];
            let t_rows = targets.len();
            ensure(grads, *logits, slots[*logits].numel());
            let w = go / t_rows as f64;
            for (r, &tgt) in targets.iter().enumerate() {
                for j in 0..v {
                    let ind = if j == tgt as usize { 1.0 } else { 0.0 };
                    grads[*logits][r * v + j] += w * (probs[r * v + j] - ind);
                }
            }
        }
        OpRecord::GatherRows { a, rows, out } => {
            let go = go!(*out);
            let c = slots[*a].shape[1];
            ensure(grads, *a, slots[*a].numel());
            for (i, &r) in rows.iter().enumerate() {
                let dst = &mut grads[*a][r * c..(r + 1) * c];
                let src = &go[i * c..(i + 1) * c];
                for j in 0..c {
                    dst[j] += src[j];
                }
            }
        }
        OpRecord::GatherElems { a, idx, out } => {
            let go = go!(*out);
            ensure(grads, *a, slots[*a].numel());
            for (i, &ix) in idx.iter().enumerate() {
                grads[*a][ix] += go[i];
            }
        }
        OpRecord::ScaleRows { x, w, out } => {
            let go = go!(*out);
            let (r, c) = (slots[*x].shape[0], slots[*x].shape[1]);
            let xd = &slots[*x].data;
            let wd = &slots[*w].data;
            ensure(grads, *x, r * c);
            ensure(grads, *w, r);
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    grads[*x][i * c + j] += go[i * c + j] * wd[i];
                    acc += go[i * c + j] * xd[i * c + j];
                }
                grads[*w][i] += acc;
            }
        }
        OpRecord::DivRows { x, w, out } => {
            let go = go!(*out);
            let (r, c) = (slots[*x].shape[0], slots[*x].shape[1]);
            let xd = &slots[*x].data;
            let wd = &slots[*w].data;
            ensure(grads, *x, r * c);
            ensure(grads, *w, r);
            for i in 0..r {
                let inv = 1.0 / wd[i];
                let mut acc = 0.0;
                for j in 0..c {
                    grads[*x][i * c + j] += go[i * c + j] * inv;
                    acc += go[i * c + j] * xd[i * c + j];
                }
                grads[*w][i] -= acc * inv * inv;
            }
        }
        OpRecord::ScatterRows { a, rows, out_rows: _, out } => {
            let go = go!(*out);
            let c = slots[*a].shape[1];
            ensure(grads, *a, slots[*a].numel());
            for (i, &r) in rows.iter().enumerate() {
                let dst = &mut grads[*a][i * c..(i + 1) * c];
                let src = &go[r * c..(r + 1) * c];
                for j in 0..c {
                    dst[j] += src[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = tape.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let m = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let out = i2.matmul(&m).unwrap();
        assert_eq!(out.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilating() {
        let tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 0.0], false).unwrap();
        let b = tape.leaf(&[2, 2], vec![0.0, 0.0, 0.0, 1.0], false).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), vec![0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dim_error() {
        let tape = Tape::new();
        let a = tape.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        let b = tape.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        assert!(matches!(a.matmul(&b), Err(crate::error::Error::Dim(_))));
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = rand_vec(&mut rng, 9);
        let b0 = rand_vec(&mut rng, 9);

        let f = |a: &[f64]| {
            let tape = Tape::new();
            let a = tape.leaf(&[3, 3], a.to_vec(), false).unwrap();
            let b = tape.leaf(&[3, 3], b0.clone(), false).unwrap();
            a.matmul(&b).unwrap().sum().value().unwrap()
        };
        let fd = central_diff(f, &a0, 1e-5);

        let tape = Tape::new();
        let a = tape.leaf(&[3, 3], a0.clone(), true).unwrap();
        let b = tape.leaf(&[3, 3], b0.clone(), false).unwrap();
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        let g = a.grad().unwrap();
        assert!(max_rel_err(&g, &fd) < 1e-6);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![0.0; 3], false).unwrap();
        assert_eq!(x.sigmoid().data(), vec![0.5; 3]);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        for c in [-5.0, 0.0, 1.7, 300.0] {
            let tape = Tape::new();
            let x = tape.leaf(&[3], vec![c; 3], false).unwrap();
            let y = x.softmax(0).unwrap().data();
            for v in y {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits0 = rand_vec(&mut rng, 4 * 5);
        let targets = vec![1u32, 4, 0, 2];

        let f = |x: &[f64]| {
            let tape = Tape::new();
            let l = tape.leaf(&[4, 5], x.to_vec(), false).unwrap();
            l.cross_entropy(&targets).unwrap().value().unwrap()
        };
        let fd = central_diff(f, &logits0, 1e-5);

        let tape = Tape::new();
        let l = tape.leaf(&[4, 5], logits0.clone(), true).unwrap();
        let loss = l.cross_entropy(&targets).unwrap();
        loss.backward().unwrap();
        assert!(max_rel_err(&l.grad().unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&[2, 3], vec![3.0; 6], true).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(
            x.backward(),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn fan_out_accumulates_sum_of_single_use_gradients() {
        // x used k times through adds: grad should be exactly k * ones.
        let k = 5;
        let tape = Tape::new();
        let x = tape.leaf(&[4], vec![0.5; 4], true).unwrap();
        let mut acc = x.clone();
        for _ in 1..k {
            acc = acc.add(&x).unwrap();
        }
        acc.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![k as f64; 4]);
    }

    #[test]
    fn suffix_broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&[3, 2], vec![1.0; 6], true).unwrap();
        let b = tape.leaf(&[2], vec![0.1, 0.2], true).unwrap();
        let loss = x.add(&b).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn layer_norm_matches_scalar_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_vec(&mut rng, 2 * 4);
        let g0 = rand_vec(&mut rng, 4);
        let b0 = rand_vec(&mut rng, 4);
        let eps = 1e-5;

        // Scalar-loop oracle for the forward value.
        let mut want = vec![0.0; 8];
        for l in 0..2 {
            let row = &x0[l * 4..(l + 1) * 4];
            let mu = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            for j in 0..4 {
                want[l * 4 + j] = (row[j] - mu) / (var + eps).sqrt() * g0[j] + b0[j];
            }
        }
        let tape = Tape::new();
        let x = tape.leaf(&[2, 4], x0.clone(), true).unwrap();
        let g = tape.leaf(&[4], g0.clone(), true).unwrap();
        let b = tape.leaf(&[4], b0.clone(), true).unwrap();
        let y = x.layer_norm(&g, &b, eps).unwrap();
        for (a, w) in y.data().iter().zip(want.iter()) {
            assert!((a - w).abs() < 1e-12);
        }

        // FD check on x (weighted so the reduction is not symmetric).
        let wts = rand_vec(&mut rng, 8);
        let f = |xs: &[f64]| {
            let tape = Tape::new();
            let x = tape.leaf(&[2, 4], xs.to_vec(), false).unwrap();
            let g = tape.leaf(&[4], g0.clone(), false).unwrap();
            let b = tape.leaf(&[4], b0.clone(), false).unwrap();
            let w = tape.leaf(&[2, 4], wts.clone(), false).unwrap();
            x.layer_norm(&g, &b, eps)
                .unwrap()
                .mul(&w)
                .unwrap()
                .sum()
                .value()
                .unwrap()
        };
        let fd = central_diff(f, &x0, 1e-5);
        let w = tape.leaf(&[2, 4], wts.clone(), false).unwrap();
        let loss = y.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert!(max_rel_err(&x.grad().unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn embedding_lookup_scatters_gradient() {
        let tape = Tape::new();
        let table = tape
            .leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true)
            .unwrap();
        let out = table.embedding_lookup(&[2, 0, 2]).unwrap();
        assert_eq!(out.data(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        out.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d0 = rand_vec(&mut rng, 16);
        let tape = Tape::new();
        let x = tape.leaf(&[4, 4], d0, false).unwrap();
        let y = x.causal_softmax().unwrap().data();
        for t in 0..4 {
            let row_sum: f64 = y[t * 4..t * 4 + t + 1].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for j in t + 1..4 {
                assert_eq!(y[t * 4 + j], 0.0);
            }
        }
    }

    #[test]
    fn scatter_gather_roundtrip_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
        let spread = x.scatter_rows(&[3, 1], 4).unwrap();
        assert_eq!(spread.shape(), vec![4, 3]);
        let back = spread.gather_rows(&[3, 1]).unwrap();
        assert_eq!(back.data(), x.data());
        back.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let tape = Tape::new();
        assert!(matches!(
            tape.leaf(&[2], vec![1.0, f64::NAN], false),
            Err(crate::error::Error::NonFinite(_))
        ));
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x0 = rand_vec(&mut rng, 12);
            let tape = Tape::new();
            let x = tape.leaf(&[3, 4], x0, true).unwrap();
            let y = x.sigmoid().softmax(1).unwrap();
            let loss = y.mul(&x).unwrap().sum();
            loss.backward().unwrap();
            (y.data(), x.grad().unwrap())
        };
        let (d1, g1) = run();
        let (d2, g2) = run();
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
    }
}
