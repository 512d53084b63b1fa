//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its output value and
//! the information its adjoint needs. [`Tape::backward`] walks the nodes in
//! reverse execution order, accumulating gradients additively when a value
//! feeds several consumers, and deposits parameter gradients into the
//! [`ParamStore`] the parameters were bound from. The tape is cleared
//! afterwards; handles from a cleared tape are rejected.

use std::collections::HashMap;

use super::{NumericsError, ParamStore, Tensor};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    MaskedMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    SumCols(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    /// Test fixture: forward is the identity, adjoint is deliberately wrong.
    #[cfg(test)]
    BrokenIdentity(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    generation: u64,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(NumericsError::Rank {
            op,
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            generation: 0,
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients: parameters bind as constants.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<(), NumericsError> {
        if v.generation != self.generation || v.idx >= self.nodes.len() {
            return Err(NumericsError::StaleVar);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert!(
            v.generation == self.generation && v.idx < self.nodes.len(),
            "stale tape handle"
        );
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            idx: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn finish(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.idx].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Record a constant (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Bind a named parameter. Repeated binds return the same handle so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericsError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        let rg = t.requires_grad();
        let v = self.push(t.detached(), Op::Param(name.to_string()), rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.finish("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.finish("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.finish("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.finish("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Broadcast add of a length-`n` row (shape `[n]` or `[1,n]`) to every row
    /// of an `[m,n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        self.check(row)?;
        let (tx, tr) = (&self.nodes[x.idx].value, &self.nodes[row.idx].value);
        let (m, n) = dims2("add_row", tx)?;
        let ok = matches!(tr.shape(), [c] if *c == n) || matches!(tr.shape(), [1, c] if *c == n);
        if !ok {
            return Err(mismatch("add_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            add_into(&mut data[i * n..(i + 1) * n], tr.data());
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.finish("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        self.finish("scale", value, Op::Scale(x, s), &[x])
    }

    /// Softmax over the last axis of an `[r,c]` matrix.
    ///
    /// With `mask` (row-major, `r*c`, `true` = attend), masked entries get
    /// probability exactly zero and are never read, which is equivalent to a
    /// `-inf` logit. Every row must keep at least one entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("softmax", tx)?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(NumericsError::MaskLength {
                    op: "softmax",
                    expected: r * c,
                    got: m.len(),
                });
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if keep(i * c + j) && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::EmptyMask { op: "softmax" });
            }
            let mut total = 0.0;
            for (j, v) in row.iter().enumerate() {
                if keep(i * c + j) {
                    let e = (v - max).exp();
                    out[i * c + j] = e;
                    total += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= total;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.finish("softmax", value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("layer_norm", tx)?;
        let (tg, tb) = (&self.nodes[gamma.idx].value, &self.nodes[beta.idx].value);
        if tg.numel() != c {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != c {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.finish(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| gelu(*v)).collect())?;
        self.finish("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect())?;
        self.finish("relu", value, Op::Relu(x), &[x])
    }

    /// Row lookup `table[ids[i]]` from a `[V,d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        self.check(table)?;
        let tt = &self.nodes[table.idx].value;
        let (v, d) = dims2("embedding", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.finish(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Stack matrices with equal column counts along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput { op: "concat_rows" })?;
        self.check(first)?;
        let (_, c) = dims2("concat_rows", &self.nodes[first.idx].value)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            self.check(p)?;
            let t = &self.nodes[p.idx].value;
            let (r, c2) = dims2("concat_rows", t)?;
            if c2 != c {
                return Err(mismatch("concat_rows", &self.nodes[first.idx].value, t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.finish("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Join matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput { op: "concat_cols" })?;
        self.check(first)?;
        let (r, _) = dims2("concat_cols", &self.nodes[first.idx].value)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p)?;
            let t = &self.nodes[p.idx].value;
            let (r2, c) = dims2("concat_cols", t)?;
            if r2 != r {
                return Err(mismatch("concat_cols", &self.nodes[first.idx].value, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.idx].value.row_slice(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        self.finish("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("slice_rows", tx)?;
        if start + len > r {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let value = Tensor::new(vec![len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        self.finish("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("slice_cols", tx)?;
        if start + len > c {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row_slice(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.finish("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    /// `out[i] = x[idx[i]]` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("gather_rows", tx)?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(tx.row_slice(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        self.finish(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Zero every row `i` with `keep[i] == false`.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("mask_rows", tx)?;
        if keep.len() != r {
            return Err(NumericsError::MaskLength {
                op: "mask_rows",
                expected: r,
                got: keep.len(),
            });
        }
        let mut data = tx.data().to_vec();
        for (i, k) in keep.iter().enumerate() {
            if !k {
                data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.finish(
            "mask_rows",
            value,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            &[x],
        )
    }

    /// Column-wise max over the rows selected by `keep`, giving `[1,c]`.
    /// Rows outside the mask are never read. Ties resolve to the lowest row.
    pub fn masked_max_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("masked_max_rows", tx)?;
        if keep.len() != r {
            return Err(NumericsError::MaskLength {
                op: "masked_max_rows",
                expected: r,
                got: keep.len(),
            });
        }
        if !keep.iter().any(|k| *k) {
            return Err(NumericsError::EmptyMask {
                op: "masked_max_rows",
            });
        }
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0; c];
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            for (j, v) in tx.row_slice(i).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = i;
                }
            }
        }
        let value = Tensor::new(vec![1, c], out)?;
        self.finish("masked_max_rows", value, Op::MaskedMax { x, argmax }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("transpose", tx)?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.finish("transpose", value, Op::Transpose(x), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let total = self.nodes[x.idx].value.data().iter().sum();
        self.finish("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(NumericsError::EmptyInput { op: "mean" });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums of an `[r,c]` matrix, giving `[r,1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, _) = dims2("sum_cols", tx)?;
        let data = (0..r).map(|i| tx.row_slice(i).iter().sum()).collect();
        let value = Tensor::new(vec![r, 1], data)?;
        self.finish("sum_cols", value, Op::SumCols(x), &[x])
    }

    /// Sum a non-empty list of same-shape values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let mut it = xs.iter();
        let mut acc = *it.next().ok_or(NumericsError::EmptyInput { op: "add_all" })?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Mean softmax cross-entropy of `[r,C]` logits against class targets,
    /// evaluated with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        self.check(logits)?;
        let tl = &self.nodes[logits.idx].value;
        let (r, c) = dims2("cross_entropy", tl)?;
        if targets.len() != r {
            return Err(NumericsError::MaskLength {
                op: "cross_entropy",
                expected: r,
                got: targets.len(),
            });
        }
        if r == 0 {
            return Err(NumericsError::EmptyInput { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = tl.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / r as f64);
        self.finish(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Scale every row to unit L2 norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let tx = &self.nodes[x.idx].value;
        let (r, c) = dims2("l2_normalize_rows", tx)?;
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row_slice(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NumericsError::ZeroNorm);
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.finish("l2_normalize_rows", value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    #[cfg(test)]
    pub(crate) fn broken_identity(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let value = self.nodes[x.idx].value.detached();
        self.finish("broken_identity", value, Op::BrokenIdentity(x), &[x])
    }

    /// Propagate adjoints from the scalar `loss` back through the tape,
    /// accumulate parameter gradients into `params`, then clear the tape.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<(), NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::EmptyTape);
        }
        self.check(loss)?;
        if !self.grad_enabled {
            return Err(NumericsError::GradDisabled);
        }
        if !self.nodes[loss.idx].value.is_scalar() {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[loss.idx].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            // Accumulate `delta` into input `v` if it needs a gradient.
            let mut send = |v: Var, delta: Vec<f64>| {
                if !self.nodes[v.idx].requires_grad {
                    return;
                }
                match &mut grads[v.idx] {
                    Some(acc) => add_into(acc, &delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &self.nodes[v.idx].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    params.get_mut(name)?.accumulate_grad(&g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    if self.nodes[a.idx].requires_grad {
                        // da = g * b^T
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = tb.row_slice(p);
                                da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                            }
                        }
                        send(*a, da);
                    }
                    if self.nodes[b.idx].requires_grad {
                        // db = a^T * g
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ta.data()[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *d += av * gv;
                                }
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    send(*a, da);
                    send(*b, db);
                }
                Op::AddRow(x, row) => {
                    let n = out.cols();
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        add_into(&mut dr, chunk);
                    }
                    send(*row, dr);
                    send(*x, g);
                }
                Op::Scale(x, s) => {
                    send(*x, g.iter().map(|v| v * s).collect());
                }
                Op::Softmax(x) => {
                    let c = out.cols();
                    let y = out.data();
                    let mut dx = vec![0.0; y.len()];
                    for i in 0..out.rows() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = out.cols();
                    let r = out.rows();
                    let tg = val(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                            let dh = gr[j] * tg[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * tg[j];
                            dx[i * c + j] = inv_std[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                    send(*x, dx);
                }
                Op::Gelu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    send(*x, dx);
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    send(*x, dx);
                }
                Op::Embedding { table, ids } => {
                    let tt = val(*table);
                    let d = tt.cols();
                    let mut dt = vec![0.0; tt.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                    send(*table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(*p).numel();
                        send(*p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut start = 0;
                    for p in parts {
                        let tp = val(*p);
                        let w = tp.cols();
                        let mut dp = Vec::with_capacity(tp.numel());
                        for i in 0..tp.rows() {
                            dp.extend_from_slice(&g[i * total + start..i * total + start + w]);
                        }
                        send(*p, dp);
                        start += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = val(*x);
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    send(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let tx = val(*x);
                    let c = tx.cols();
                    let w = out.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for i in 0..tx.rows() {
                        dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    send(*x, dx);
                }
                Op::GatherRows { x, idx: rows } => {
                    let tx = val(*x);
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                    send(*x, dx);
                }
                Op::MaskRows { x, keep } => {
                    let c = out.cols();
                    let mut dx = g;
                    for (i, k) in keep.iter().enumerate() {
                        if !k {
                            dx[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    send(*x, dx);
                }
                Op::MaskedMax { x, argmax } => {
                    let tx = val(*x);
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for (j, &i) in argmax.iter().enumerate() {
                        dx[i * c + j] += g[j];
                    }
                    send(*x, dx);
                }
                Op::Transpose(x) => {
                    // out is [c,r]; g has out's layout.
                    let (c, r) = (out.rows(), out.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    send(*x, dx);
                }
                Op::Sum(x) => {
                    let n = val(*x).numel();
                    send(*x, vec![g[0]; n]);
                }
                Op::SumCols(x) => {
                    let tx = val(*x);
                    let c = tx.cols();
                    let mut dx = Vec::with_capacity(tx.numel());
                    for gv in &g {
                        dx.extend(std::iter::repeat_n(*gv, c));
                    }
                    send(*x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let r = targets.len();
                    let c = probs.len() / r;
                    let scale = g[0] / r as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * c + t] -= scale;
                    }
                    send(*logits, dl);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let c = out.cols();
                    let y = out.data();
                    let mut dx = vec![0.0; y.len()];
                    for (i, norm) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    send(*x, dx);
                }
                #[cfg(test)]
                Op::BrokenIdentity(x) => {
                    send(*x, g.iter().map(|v| 2.0 * v).collect());
                }
            }
        }
        self.clear();
        Ok(())
    }

    /// Drop all recorded nodes; outstanding handles become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
        self.generation += 1;
    }
}
