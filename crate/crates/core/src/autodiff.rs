//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations append nodes
//! in topological order (inputs always precede their consumers), and
//! [`Tape::backward`] replays the recorded backward rules in reverse,
//! accumulating gradients additively into every node with `requires_grad`.
//!
//! Forward values are checked for NaN/Inf after every operation; a non-finite
//! result is an explicit error, never a silent propagation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{strides_of, Tensor};

/// Minimum number of f64 multiply-adds before a kernel fans out over the
/// rayon pool. Work is split over disjoint output ranges, each computed
/// exactly as in the serial path, so results are bit-identical for any
/// thread count.
const PAR_FLOP_THRESHOLD: usize = 250_000;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise add; `broadcast` means b's shape is a suffix of a's.
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize, broadcast: bool },
    Scale { a: usize, c: f64 },
    /// a: [..., m, k] (leading dims batched), b: [k, n], bias: optional [n].
    Matmul { a: usize, b: usize, bias: Option<usize>, m: usize, k: usize, n: usize, groups: usize },
    /// a: [g, m, k], b: [g, k, n] (or [g, n, k] when `trans_b`).
    Bmm { a: usize, b: usize, m: usize, k: usize, n: usize, groups: usize, trans_b: bool },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, axis: usize, idx: Vec<usize> },
    /// Rows of `a` scattered to `idx` along `axis`; zeros elsewhere.
    IndexScatter { a: usize, axis: usize, idx: Vec<usize> },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// `tanh_cache` holds tanh(u) from the forward pass so backward avoids a
    /// second transcendental sweep.
    Gelu { a: usize, tanh_cache: Vec<f64> },
    Dropout { a: usize, mask: Vec<f64> },
    RotateEveryTwo { a: usize },
    /// Forward value is the quantized tensor; backward copies the gradient
    /// unchanged to `a` (identity Jacobian through the quantization).
    StraightThrough { a: usize },
    /// Fused rotary multi-head attention core (post-projection): head split,
    /// rotary position application to q and k, scaled dot products, softmax,
    /// attention dropout, value-weighted sum, head merge. One op instead of
    /// ~20 keeps the tape small and the inner loops cache-tight.
    Mha(Box<MhaOp>),
}

#[derive(Debug)]
struct MhaOp {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    dim_head: usize,
    n_q: usize,
    n_kv: usize,
    /// Tables, either shared over groups (len = n*dh) or per group
    /// (len = batch*heads*n*dh).
    sin_q: Vec<f64>,
    cos_q: Vec<f64>,
    sin_k: Vec<f64>,
    cos_k: Vec<f64>,
    /// Saved rotated q/k [groups, n, dh] and pre-dropout attention
    /// probabilities [groups, n_q, n_kv] for the backward pass.
    rq: Vec<f64>,
    rk: Vec<f64>,
    attn: Vec<f64>,
    /// Inverted-dropout multipliers on the attention matrix, empty when off.
    mask: Vec<f64>,
}

struct Node {
    t: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_run: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_run: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf holding `t`, honoring `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Record a constant leaf (no gradient).
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    /// Record a parameter leaf (tracked for gradients).
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].t
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].t.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].t.data
    }

    /// Copy of the value, detached from the tape.
    pub fn detach(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].t.shape.clone(),
            data: self.nodes[v.0].t.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].t.grad.as_deref()
    }

    fn push(&mut self, t: Tensor, op: Op) -> Var {
        self.nodes.push(Node { t, op });
        Var(self.nodes.len() - 1)
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        let requires_grad = self.op_requires_grad(&op);
        let t = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        t.check_finite(name)?;
        Ok(self.push(t, op))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let req = |i: &usize| self.nodes[*i].t.requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add { a, b, .. } | Op::Sub { a, b } | Op::Mul { a, b, .. } => req(a) || req(b),
            Op::Matmul { a, b, bias, .. } => req(a) || req(b) || bias.map_or(false, |v| req(&v)),
            Op::Bmm { a, b, .. } => req(a) || req(b),
            Op::Mha(m) => req(&m.q) || req(&m.k) || req(&m.v),
            Op::LayerNorm { a, gamma, beta, .. } => req(a) || req(gamma) || req(beta),
            Op::Concat { inputs, .. } => inputs.iter().any(req),
            Op::Scale { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Narrow { a, .. }
            | Op::IndexSelect { a, .. }
            | Op::IndexScatter { a, .. }
            | Op::SumAxis { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::SumAll { a }
            | Op::MeanAll { a }
            | Op::Softmax { a, .. }
            | Op::Gelu { a, .. }
            | Op::Dropout { a, .. }
            | Op::RotateEveryTwo { a }
            | Op::StraightThrough { a } => req(a),
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    /// Elementwise sum. Shapes must match exactly, or b's shape must be a
    /// suffix of a's (bias-style broadcast over leading dimensions).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::shape("sub", &sa, &sb));
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.result(sa, data, Op::Sub { a: a.0, b: b.0 }, "sub")
    }

    /// Elementwise product, with the same suffix broadcast rule as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "mul")
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, name: &str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = if sa == sb {
            false
        } else if sa.len() > sb.len() && sa.ends_with(&sb) {
            true
        } else {
            return Err(Error::shape(name, &sa, &sb));
        };
        let is_add = name == "add";
        let data: Vec<f64> = {
            let da = self.data(a);
            let db = self.data(b);
            if broadcast {
                let bn = db.len().max(1);
                let mut out = vec![0.0; da.len()];
                let work = |(ochunk, achunk): (&mut [f64], &[f64])| {
                    if is_add {
                        for ((o, x), y) in ochunk.iter_mut().zip(achunk).zip(db) {
                            *o = x + y;
                        }
                    } else {
                        for ((o, x), y) in ochunk.iter_mut().zip(achunk).zip(db) {
                            *o = x * y;
                        }
                    }
                };
                if da.len() >= 65_536 {
                    out.par_chunks_mut(bn).zip(da.par_chunks(bn)).for_each(work);
                } else {
                    out.chunks_mut(bn).zip(da.chunks(bn)).for_each(work);
                }
                out
            } else if is_add {
                da.iter().zip(db).map(|(x, y)| x + y).collect()
            } else {
                da.iter().zip(db).map(|(x, y)| x * y).collect()
            }
        };
        let op = if is_add {
            Op::Add { a: a.0, b: b.0, broadcast }
        } else {
            Op::Mul { a: a.0, b: b.0, broadcast }
        };
        self.result(sa, data, op, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        self.result(shape, data, Op::Scale { a: a.0, c }, "scale")
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// `a` of shape [..., m, k] times a 2-D `b` of shape [k, n]. Leading
    /// dimensions of `a` are treated as a batch (the whole product runs as
    /// one flattened [prod*m, k] x [k, n] kernel).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_bias(a, b, None)
    }

    /// Matmul with the bias add fused into the kernel: rows start from the
    /// bias instead of zero.
    pub fn matmul_bias(&mut self, a: Var, b: Var, bias: Option<Var>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[1]);
        if let Some(bv) = bias {
            if self.shape(bv) != [n] {
                return Err(Error::shape("matmul bias", self.shape(bv), &[n]));
            }
        }
        let groups: usize = sa[..sa.len() - 2].iter().product();
        let rows = groups * m;
        let mut out = match bias {
            None => vec![0.0; rows * n],
            Some(bv) => {
                let bdata = self.data(bv);
                let mut buf = Vec::with_capacity(rows * n);
                for _ in 0..rows {
                    buf.extend_from_slice(bdata);
                }
                buf
            }
        };
        mm_nn_par(&mut out, self.data(a), self.data(b), rows, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        self.result(
            shape,
            out,
            Op::Matmul { a: a.0, b: b.0, bias: bias.map(|v| v.0), m, k, n, groups },
            "matmul",
        )
    }

    /// Grouped matmul: `a` [g, m, k] times `b` [g, k, n], or `a` [g, m, k]
    /// times transposed `b` [g, n, k] when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let k_b = if trans_b { sb[2] } else { sb[1] };
        if k != k_b {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            let work = |(g, cg): (usize, &mut [f64])| {
                let ag = &da[g * m * k..(g + 1) * m * k];
                if trans_b {
                    mm_nt_acc(cg, ag, &db[g * n * k..(g + 1) * n * k], m, k, n);
                } else {
                    mm_nn_acc(cg, ag, &db[g * k * n..(g + 1) * k * n], m, k, n);
                }
            };
            if groups * m * k * n >= PAR_FLOP_THRESHOLD && groups > 1 {
                out.par_chunks_mut(m * n).enumerate().for_each(work);
            } else {
                out.chunks_mut(m * n).enumerate().for_each(work);
            }
        }
        self.result(
            vec![groups, m, n],
            out,
            Op::Bmm { a: a.0, b: b.0, m, k, n, groups, trans_b },
            "bmm",
        )
    }

    // ── Shape ───────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        self.result(shape.to_vec(), data, Op::Reshape { a: a.0 }, "reshape")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axes.len() != sa.len() || {
            let mut seen = vec![false; sa.len()];
            axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true))
        } {
            return Err(Error::Invalid(format!(
                "permute: axes {axes:?} invalid for shape {sa:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let data = permute_data(self.data(a), &sa, axes);
        self.result(out_shape, data, Op::Permute { a: a.0, axes: axes.to_vec() }, "permute")
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Invalid("concat: no inputs".into()));
        }
        let first = self.shape(vars[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Invalid(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &v in vars {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let row = axis_total * inner;
        let mut offset = 0usize;
        for &v in vars {
            let len = self.shape(v)[axis] * inner;
            let src = self.data(v);
            for o in 0..outer {
                data[o * row + offset..o * row + offset + len]
                    .copy_from_slice(&src[o * len..(o + 1) * len]);
            }
            offset += len;
        }
        let ids = vars.iter().map(|v| v.0).collect();
        self.result(out_shape, data, Op::Concat { inputs: ids, axis }, "concat")
    }

    /// Contiguous slice [start, start+len) along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::Invalid(format!(
                "narrow: [{start}, {start}+{len}) out of range on axis {axis} of {sa:?}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        let src = self.data(a);
        let row = sa[axis] * inner;
        for o in 0..outer {
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[o * row + start * inner..o * row + (start + len) * inner]);
        }
        self.result(out_shape, data, Op::Narrow { a: a.0, axis, start }, "narrow")
    }

    /// Gather slices along `axis` at the given indices (duplicates allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Invalid(format!(
                "index_select: axis {axis} out of range for {sa:?}"
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= sa[axis]) {
            return Err(Error::Invalid(format!(
                "index_select: index {bad} out of range for axis length {}",
                sa[axis]
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] = idx.len();
        let mut data = vec![0.0; outer * idx.len() * inner];
        let src = self.data(a);
        let src_row = sa[axis] * inner;
        let dst_row = idx.len() * inner;
        for o in 0..outer {
            for (j, &i) in idx.iter().enumerate() {
                data[o * dst_row + j * inner..o * dst_row + (j + 1) * inner]
                    .copy_from_slice(&src[o * src_row + i * inner..o * src_row + (i + 1) * inner]);
            }
        }
        self.result(out_shape, data, Op::IndexSelect { a: a.0, axis, idx: idx.to_vec() }, "index_select")
    }

    /// Inverse of `index_select`: place slice j of `a` at `idx[j]` along
    /// `axis` of a zero tensor whose axis length is `out_len`.
    pub fn index_scatter(&mut self, a: Var, axis: usize, idx: &[usize], out_len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || idx.len() != sa[axis] {
            return Err(Error::Invalid(format!(
                "index_scatter: {} indices for axis length {} of {sa:?}",
                idx.len(),
                sa.get(axis).copied().unwrap_or(0)
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_len) {
            return Err(Error::Invalid(format!(
                "index_scatter: index {bad} out of range for output length {out_len}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] = out_len;
        let mut data = vec![0.0; outer * out_len * inner];
        let src = self.data(a);
        let src_row = sa[axis] * inner;
        let dst_row = out_len * inner;
        for o in 0..outer {
            for (j, &i) in idx.iter().enumerate() {
                data[o * dst_row + i * inner..o * dst_row + (i + 1) * inner]
                    .copy_from_slice(&src[o * src_row + j * inner..o * src_row + (j + 1) * inner]);
            }
        }
        self.result(out_shape, data, Op::IndexScatter { a: a.0, axis, idx: idx.to_vec() }, "index_scatter")
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Invalid(format!(
                "reduce: axis {axis} out of range for {sa:?}"
            )));
        }
        if sa[axis] == 0 {
            return Err(Error::Invalid("reduce: axis of length 0".into()));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        let src = self.data(a);
        for o in 0..outer {
            for l in 0..len {
                let base = o * len * inner + l * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            for v in data.iter_mut() {
                *v *= inv;
            }
        }
        let op = if mean {
            Op::MeanAxis { a: a.0, axis }
        } else {
            Op::SumAxis { a: a.0, axis }
        };
        self.result(out_shape, data, op, "reduce_axis")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        self.result(vec![], vec![s], Op::SumAll { a: a.0 }, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::Invalid("mean_all: empty tensor".into()));
        }
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        self.result(vec![], vec![s], Op::MeanAll { a: a.0 }, "mean_all")
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    /// Numerically stable softmax (max subtraction) along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Invalid(format!(
                "softmax: axis {axis} out of range for {sa:?}"
            )));
        }
        if sa[axis] == 0 {
            return Err(Error::Invalid("softmax: axis of length 0".into()));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        if inner == 1 {
            // contiguous lanes (the attention case)
            let work = |(row, srow): (&mut [f64], &[f64])| {
                let mut mx = f64::NEG_INFINITY;
                for &v in srow {
                    mx = mx.max(v);
                }
                let mut z = 0.0;
                for (d, &v) in row.iter_mut().zip(srow) {
                    let e = (v - mx).exp();
                    *d = e;
                    z += e;
                }
                let inv = 1.0 / z;
                for d in row.iter_mut() {
                    *d *= inv;
                }
            };
            if src.len() >= 16_384 {
                data.par_chunks_mut(len).zip(src.par_chunks(len)).for_each(work);
            } else {
                data.chunks_mut(len).zip(src.chunks(len)).for_each(work);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| o * len * inner + l * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..len {
                        mx = mx.max(src[at(l)]);
                    }
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (src[at(l)] - mx).exp();
                        data[at(l)] = e;
                        z += e;
                    }
                    let inv = 1.0 / z;
                    for l in 0..len {
                        data[at(l)] *= inv;
                    }
                }
            }
        }
        self.result(sa, data, Op::Softmax { a: a.0, axis }, "softmax")
    }

    /// Layer normalization over the last axis, with learnable `gamma`/`beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| Error::Invalid("layer_norm: scalar input".into()))?;
        if d == 0 {
            return Err(Error::Invalid("layer_norm: last axis of length 0".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Invalid("layer_norm: eps must be > 0".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm gamma/beta", &sa, self.shape(gamma)));
        }
        let rows = self.data(a).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        {
            let src = self.data(a);
            let g = self.data(gamma);
            let b = self.data(beta);
            let work = |(((xh_row, inv), out_row), row): (((&mut [f64], &mut f64), &mut [f64]), &[f64])| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                *inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    let xh = (row[j] - mean) * *inv;
                    xh_row[j] = xh;
                    out_row[j] = g[j] * xh + b[j];
                }
            };
            if rows * d >= 65_536 {
                xhat.par_chunks_mut(d)
                    .zip(inv_std.par_iter_mut())
                    .zip(data.par_chunks_mut(d))
                    .zip(src.par_chunks(d))
                    .for_each(work);
            } else {
                xhat.chunks_mut(d)
                    .zip(inv_std.iter_mut())
                    .zip(data.chunks_mut(d))
                    .zip(src.chunks(d))
                    .for_each(work);
            }
        }
        self.result(
            sa,
            data,
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            "layer_norm",
        )
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        let mut tanh_cache = vec![0.0; src.len()];
        let work = |((y, t), &x): ((&mut f64, &mut f64), &f64)| {
            let th = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
            *t = th;
            *y = 0.5 * x * (1.0 + th);
        };
        if src.len() >= 16_384 {
            data.par_iter_mut()
                .zip(tanh_cache.par_iter_mut())
                .zip(src.par_iter())
                .for_each(work);
        } else {
            data.iter_mut().zip(tanh_cache.iter_mut()).zip(src.iter()).for_each(work);
        }
        self.result(shape, data, Op::Gelu { a: a.0, tanh_cache }, "gelu")
    }

    /// Inverted dropout: in training, zero each element with probability `p`
    /// and scale survivors by 1/(1-p); outside training this is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout: p={p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(a).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.result(shape, data, Op::Dropout { a: a.0, mask }, "dropout")
    }

    /// Map consecutive pairs (x1, x2) to (-x2, x1) along the last axis.
    pub fn rotate_every_two(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || d % 2 != 0 {
            return Err(Error::Invalid(format!(
                "rotate_every_two: last axis {d} must be even and non-zero"
            )));
        }
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for pair in 0..src.len() / 2 {
            data[2 * pair] = -src[2 * pair + 1];
            data[2 * pair + 1] = src[2 * pair];
        }
        self.result(shape, data, Op::RotateEveryTwo { a: a.0 }, "rotate_every_two")
    }

    /// Straight-through: the forward value is `value` (e.g. quantized codes),
    /// while gradients pass to `a` as if the op were the identity.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var> {
        let base = self.detach(a);
        self.straight_through_rebased(a, &value, &base)
    }

    /// Straight-through with an explicit base point: the output tracks
    /// `value + (a - base)` elementwise. While `a` still holds `base` the
    /// output equals `value` exactly (the difference is exactly zero);
    /// replaying a recorded quantization under perturbed inputs then moves
    /// the output with `a`, which is the function a finite-difference check
    /// of this estimator has to probe.
    pub fn straight_through_rebased(&mut self, a: Var, value: &Tensor, base: &Tensor) -> Result<Var> {
        if self.shape(a) != value.shape.as_slice() {
            return Err(Error::shape("straight_through", self.shape(a), &value.shape));
        }
        if base.shape != value.shape {
            return Err(Error::shape("straight_through base", &base.shape, &value.shape));
        }
        value.check_finite("straight_through")?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(&base.data)
            .zip(&value.data)
            .map(|((now, b), v)| v + (now - b))
            .collect();
        self.result(value.shape.clone(), data, Op::StraightThrough { a: a.0 }, "straight_through")
    }

    /// Fused rotary multi-head attention over projected q/k/v of shape
    /// [B, N, heads*dim_head]. Rotary tables are [N, dim_head] (shared) or
    /// [B*heads, N, dim_head] (per group). Scores are scaled by
    /// 1/sqrt(dim_head); dropout applies to the attention probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        sin_q: &Tensor,
        cos_q: &Tensor,
        sin_k: &Tensor,
        cos_k: &Tensor,
        heads: usize,
        dim_head: usize,
        dropout_p: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        let h_width = heads * dim_head;
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sk != sv
            || sq[2] != h_width || sk[2] != h_width
        {
            return Err(Error::shape("attention", &sq, &sk));
        }
        if dim_head % 2 != 0 {
            return Err(Error::Invalid(format!("attention: dim_head {dim_head} must be even")));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Invalid(format!("attention dropout {dropout_p} outside [0, 1)")));
        }
        let (b, n_q, n_kv) = (sq[0], sq[1], sk[1]);
        let groups = b * heads;
        let check_tables = |t: &Tensor, n: usize, name: &str| -> Result<bool> {
            // returns true when the table is per group
            if t.shape == [n, dim_head] {
                Ok(false)
            } else if t.shape == [groups, n, dim_head] {
                Ok(true)
            } else {
                Err(Error::shape(name, &t.shape, &[n, dim_head]))
            }
        };
        check_tables(sin_q, n_q, "attention q tables")?;
        check_tables(sin_k, n_kv, "attention k tables")?;
        if sin_q.shape != cos_q.shape || sin_k.shape != cos_k.shape {
            return Err(Error::shape("attention tables", &sin_q.shape, &cos_q.shape));
        }

        // dropout multipliers drawn sequentially in group order
        let mask: Vec<f64> = if training && dropout_p > 0.0 {
            let keep = 1.0 / (1.0 - dropout_p);
            (0..groups * n_q * n_kv)
                .map(|_| if rng.uniform() < dropout_p { 0.0 } else { keep })
                .collect()
        } else {
            Vec::new()
        };

        let scale = 1.0 / (dim_head as f64).sqrt();
        let mut rq = vec![0.0; groups * n_q * dim_head];
        let mut rk = vec![0.0; groups * n_kv * dim_head];
        let mut attn = vec![0.0; groups * n_q * n_kv];
        let mut out_tmp = vec![0.0; groups * n_q * dim_head];
        {
            let qd = &self.nodes[q.0].t.data;
            let kd = &self.nodes[k.0].t.data;
            let vd = &self.nodes[v.0].t.data;
            let per_group_q = sin_q.shape.len() == 3;
            let per_group_k = sin_k.shape.len() == 3;
            let work = |(((g, rq_g), rk_g), (attn_g, out_g)): (
                ((usize, &mut [f64]), &mut [f64]),
                (&mut [f64], &mut [f64]),
            )| {
                let bi = g / heads;
                let hi = g % heads;
                // rotate q and k heads into contiguous buffers
                for i in 0..n_q {
                    let src = &qd[bi * n_q * h_width + i * h_width + hi * dim_head..][..dim_head];
                    let toff = if per_group_q { (g * n_q + i) * dim_head } else { i * dim_head };
                    let (s, c) = (&sin_q.data[toff..toff + dim_head], &cos_q.data[toff..toff + dim_head]);
                    let dst = &mut rq_g[i * dim_head..(i + 1) * dim_head];
                    for t in 0..dim_head / 2 {
                        let (x0, x1) = (src[2 * t], src[2 * t + 1]);
                        dst[2 * t] = x0 * c[2 * t] - x1 * s[2 * t];
                        dst[2 * t + 1] = x1 * c[2 * t + 1] + x0 * s[2 * t + 1];
                    }
                }
                for j in 0..n_kv {
                    let src = &kd[bi * n_kv * h_width + j * h_width + hi * dim_head..][..dim_head];
                    let toff = if per_group_k { (g * n_kv + j) * dim_head } else { j * dim_head };
                    let (s, c) = (&sin_k.data[toff..toff + dim_head], &cos_k.data[toff..toff + dim_head]);
                    let dst = &mut rk_g[j * dim_head..(j + 1) * dim_head];
                    for t in 0..dim_head / 2 {
                        let (x0, x1) = (src[2 * t], src[2 * t + 1]);
                        dst[2 * t] = x0 * c[2 * t] - x1 * s[2 * t];
                        dst[2 * t + 1] = x1 * c[2 * t + 1] + x0 * s[2 * t + 1];
                    }
                }
                // scaled dot products, softmax rows
                mm_nt_acc(attn_g, rq_g, rk_g, n_q, dim_head, n_kv);
                for row in attn_g.chunks_mut(n_kv) {
                    let mut mx = f64::NEG_INFINITY;
                    for r in row.iter_mut() {
                        *r *= scale;
                        mx = mx.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    let inv = 1.0 / z;
                    for r in row.iter_mut() {
                        *r *= inv;
                    }
                }
                // value-weighted sum with optional dropout on the weights
                let mask_g = if mask.is_empty() { &[][..] } else { &mask[g * n_q * n_kv..(g + 1) * n_q * n_kv] };
                for i in 0..n_q {
                    let out_row = &mut out_g[i * dim_head..(i + 1) * dim_head];
                    for j in 0..n_kv {
                        let mut w = attn_g[i * n_kv + j];
                        if !mask_g.is_empty() {
                            w *= mask_g[i * n_kv + j];
                        }
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = &vd[bi * n_kv * h_width + j * h_width + hi * dim_head..][..dim_head];
                        for (o, x) in out_row.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            };
            if groups * n_q * n_kv * dim_head >= PAR_FLOP_THRESHOLD && groups > 1 {
                rq.par_chunks_mut(n_q * dim_head)
                    .enumerate()
                    .zip(rk.par_chunks_mut(n_kv * dim_head))
                    .zip(attn.par_chunks_mut(n_q * n_kv).zip(out_tmp.par_chunks_mut(n_q * dim_head)))
                    .for_each(work);
            } else {
                rq.chunks_mut(n_q * dim_head)
                    .enumerate()
                    .zip(rk.chunks_mut(n_kv * dim_head))
                    .zip(attn.chunks_mut(n_q * n_kv).zip(out_tmp.chunks_mut(n_q * dim_head)))
                    .for_each(work);
            }
        }
        // merge heads: [groups, n_q, dh] -> [B, n_q, heads*dh]
        let mut out = vec![0.0; b * n_q * h_width];
        for g in 0..groups {
            let bi = g / heads;
            let hi = g % heads;
            for i in 0..n_q {
                out[bi * n_q * h_width + i * h_width + hi * dim_head..][..dim_head]
                    .copy_from_slice(&out_tmp[(g * n_q + i) * dim_head..(g * n_q + i + 1) * dim_head]);
            }
        }
        self.result(
            vec![b, n_q, h_width],
            out,
            Op::Mha(Box::new(MhaOp {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                dim_head,
                n_q,
                n_kv,
                sin_q: sin_q.data.clone(),
                cos_q: cos_q.data.clone(),
                sin_k: sin_k.data.clone(),
                cos_k: cos_k.data.clone(),
                rq,
                rk,
                attn,
                mask,
            })),
            "attention",
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients for every `requires_grad` node reachable from
    /// `loss`, which must be scalar. A tape can only run backward once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_run {
            return Err(Error::Invalid(
                "backward already run on this tape; build a new tape per forward pass".into(),
            ));
        }
        if self.nodes[loss.0].t.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].t.requires_grad {
            return Err(Error::Invalid(
                "backward: loss is detached from all gradient-tracked tensors".into(),
            ));
        }
        self.backward_run = true;
        self.nodes[loss.0].t.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].t.requires_grad || self.nodes[i].t.grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].t.grad.take().unwrap();
            self.step_backward(i, &grad);
            self.nodes[i].t.grad = Some(grad);
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, delta: &[f64]) {
        if !self.nodes[id].t.requires_grad {
            return;
        }
        match &mut self.nodes[id].t.grad {
            None => self.nodes[id].t.grad = Some(delta.to_vec()),
            Some(g) => {
                if g.len() >= 65_536 {
                    g.par_iter_mut().zip(delta).for_each(|(gi, di)| *gi += di);
                } else {
                    for (gi, di) in g.iter_mut().zip(delta) {
                        *gi += di;
                    }
                }
            }
        }
    }

    /// Accumulate an owned delta; the first contribution moves the buffer.
    fn acc_owned(&mut self, id: usize, delta: Vec<f64>) {
        if !self.nodes[id].t.requires_grad {
            return;
        }
        match &mut self.nodes[id].t.grad {
            None => self.nodes[id].t.grad = Some(delta),
            Some(g) => {
                if g.len() >= 65_536 {
                    g.par_iter_mut().zip(&delta).for_each(|(gi, di)| *gi += di);
                } else {
                    for (gi, di) in g.iter_mut().zip(&delta) {
                        *gi += di;
                    }
                }
            }
        }
    }

    fn step_backward(&mut self, id: usize, g: &[f64]) {
        // The op is taken apart by shared reference; all pushes go through acc().
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b, broadcast } => {
                self.acc(*a, g);
                if *broadcast {
                    let bn = self.nodes[*b].t.data.len();
                    let mut gb = vec![0.0; bn];
                    for chunk in g.chunks(bn) {
                        for (s, gi) in gb.iter_mut().zip(chunk) {
                            *s += gi;
                        }
                    }
                    self.acc_owned(*b, gb);
                } else {
                    self.acc(*b, g);
                }
            }
            Op::Sub { a, b } => {
                self.acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc_owned(*b, neg);
            }
            Op::Mul { a, b, broadcast } => {
                let bn = self.nodes[*b].t.data.len();
                let da: Vec<f64> = if *broadcast {
                    let db = &self.nodes[*b].t.data;
                    let mut out = Vec::with_capacity(g.len());
                    for chunk in g.chunks(bn) {
                        out.extend(chunk.iter().zip(db).map(|(gi, bi)| gi * bi));
                    }
                    out
                } else {
                    g.iter().zip(&self.nodes[*b].t.data).map(|(gi, bi)| gi * bi).collect()
                };
                self.acc_owned(*a, da);
                if self.nodes[*b].t.requires_grad {
                    let da_vals = &self.nodes[*a].t.data;
                    let mut db = vec![0.0; bn];
                    for (chunk_g, chunk_a) in g.chunks(bn).zip(da_vals.chunks(bn)) {
                        for ((s, gi), ai) in db.iter_mut().zip(chunk_g).zip(chunk_a) {
                            *s += gi * ai;
                        }
                    }
                    self.acc_owned(*b, db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.acc_owned(*a, da);
            }
            Op::Matmul { a, b, bias, m, k, n, groups } => {
                let (m, k, n, groups) = (*m, *k, *n, *groups);
                let rows = groups * m;
                if let Some(bv) = bias {
                    if self.nodes[*bv].t.requires_grad {
                        let mut dbias = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (s, gi) in dbias.iter_mut().zip(row) {
                                *s += gi;
                            }
                        }
                        self.acc_owned(*bv, dbias);
                    }
                }
                if self.nodes[*a].t.requires_grad {
                    // dA = dC B^T over the flattened rows
                    let mut da = vec![0.0; rows * k];
                    mm_nt_par(&mut da, g, &self.nodes[*b].t.data, rows, n, k);
                    self.acc_owned(*a, da);
                }
                if self.nodes[*b].t.requires_grad {
                    // dB = A^T dC: transpose A once, then one row-parallel kernel
                    let a_vals = &self.nodes[*a].t.data;
                    let mut at = vec![0.0; k * rows];
                    if rows * k >= 65_536 {
                        at.par_chunks_mut(rows).enumerate().for_each(|(c, out_row)| {
                            for (r, slot) in out_row.iter_mut().enumerate() {
                                *slot = a_vals[r * k + c];
                            }
                        });
                    } else {
                        for r in 0..rows {
                            for c in 0..k {
                                at[c * rows + r] = a_vals[r * k + c];
                            }
                        }
                    }
                    let mut dbuf = vec![0.0; k * n];
                    mm_nn_par(&mut dbuf, &at, g, k, rows, n);
                    self.acc_owned(*b, dbuf);
                }
            }
            Op::Bmm { a, b, m, k, n, groups, trans_b } => {
                let (m, k, n, groups, trans_b) = (*m, *k, *n, *groups, *trans_b);
                let par = groups * m * k * n >= PAR_FLOP_THRESHOLD && groups > 1;
                if self.nodes[*a].t.requires_grad {
                    let mut da = vec![0.0; groups * m * k];
                    let db = &self.nodes[*b].t.data;
                    let work = |(gi, dag): (usize, &mut [f64])| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        if trans_b {
                            // c = a b^T  =>  da = dc b
                            mm_nn_acc(dag, gg, &db[gi * n * k..(gi + 1) * n * k], m, n, k);
                        } else {
                            mm_nt_acc(dag, gg, &db[gi * k * n..(gi + 1) * k * n], m, n, k);
                        }
                    };
                    if par {
                        da.par_chunks_mut(m * k).enumerate().for_each(work);
                    } else {
                        da.chunks_mut(m * k).enumerate().for_each(work);
                    }
                    self.acc_owned(*a, da);
                }
                if self.nodes[*b].t.requires_grad {
                    let da_vals = &self.nodes[*a].t.data;
                    let mut db = vec![0.0; groups * n * k];
                    let work = |(gi, dbg): (usize, &mut [f64])| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ag = &da_vals[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            // c = a b^T  =>  db = dc^T a
                            mm_tn_acc(dbg, gg, ag, m, n, k);
                        } else {
                            mm_tn_acc(dbg, ag, gg, m, k, n);
                        }
                    };
                    if par {
                        db.par_chunks_mut(n * k).enumerate().for_each(work);
                    } else {
                        db.chunks_mut(n * k).enumerate().for_each(work);
                    }
                    self.acc_owned(*b, db);
                }
            }
            Op::Reshape { a } | Op::StraightThrough { a } => {
                self.acc(*a, g);
            }
            Op::Permute { a, axes } => {
                // Gradient flows through the inverse permutation.
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let out_shape: Vec<usize> = {
                    let in_shape = &self.nodes[*a].t.shape;
                    axes.iter().map(|&ax| in_shape[ax]).collect()
                };
                let da = permute_data(g, &out_shape, &inverse);
                self.acc_owned(*a, da);
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let first = self.nodes[inputs[0]].t.shape.clone();
                let outer: usize = first[..axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total: usize = inputs.iter().map(|&i| self.nodes[i].t.shape[axis]).sum();
                let row = total * inner;
                let mut offset = 0usize;
                for &input in inputs {
                    let len = self.nodes[input].t.shape[axis] * inner;
                    if self.nodes[input].t.requires_grad {
                        let mut d = vec![0.0; outer * len];
                        for o in 0..outer {
                            d[o * len..(o + 1) * len]
                                .copy_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        self.acc_owned(input, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (axis, start) = (*axis, *start);
                let sa = self.nodes[*a].t.shape.clone();
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let full_row = sa[axis] * inner;
                let block = g.len() / outer.max(1); // len * inner
                let mut da = vec![0.0; self.nodes[*a].t.data.len()];
                for o in 0..outer {
                    da[o * full_row + start * inner..o * full_row + start * inner + block]
                        .copy_from_slice(&g[o * block..(o + 1) * block]);
                }
                self.acc_owned(*a, da);
            }
            Op::IndexSelect { a, axis, idx } => {
                let axis = *axis;
                let sa = self.nodes[*a].t.shape.clone();
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let src_row = sa[axis] * inner;
                let dst_row = idx.len() * inner;
                let mut da = vec![0.0; self.nodes[*a].t.data.len()];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let dst = &g[o * dst_row + j * inner..o * dst_row + (j + 1) * inner];
                        let acc = &mut da[o * src_row + i * inner..o * src_row + (i + 1) * inner];
                        for (ai, di) in acc.iter_mut().zip(dst) {
                            *ai += di;
                        }
                    }
                }
                self.acc_owned(*a, da);
            }
            Op::IndexScatter { a, axis, idx } => {
                let axis = *axis;
                let sa = self.nodes[*a].t.shape.clone();
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let src_row = sa[axis] * inner;
                let out_len = self.nodes[id].t.shape[axis];
                let dst_row = out_len * inner;
                let mut da = vec![0.0; self.nodes[*a].t.data.len()];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        da[o * src_row + j * inner..o * src_row + (j + 1) * inner]
                            .copy_from_slice(&g[o * dst_row + i * inner..o * dst_row + (i + 1) * inner]);
                    }
                }
                self.acc_owned(*a, da);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let axis = *axis;
                let sa = self.nodes[*a].t.shape.clone();
                let outer: usize = sa[..axis].iter().product();
                let len = sa[axis];
                let inner: usize = sa[axis + 1..].iter().product();
                let scale = if matches!(op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut da = vec![0.0; self.nodes[*a].t.data.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = o * len * inner + l * inner;
                        for i in 0..inner {
                            da[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.acc_owned(*a, da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[*a].t.data.len()];
                self.acc_owned(*a, da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[*a].t.data.len();
                let da = vec![g[0] / n as f64; n];
                self.acc_owned(*a, da);
            }
            Op::Softmax { a, axis } => {
                let axis = *axis;
                let s = &self.nodes[id].t.data;
                let shape = self.nodes[id].t.shape.clone();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut da = vec![0.0; s.len()];
                if inner == 1 {
                    let work = |((drow, srow), grow): ((&mut [f64], &[f64]), &[f64])| {
                        let mut dot = 0.0;
                        for (gi, si) in grow.iter().zip(srow) {
                            dot += gi * si;
                        }
                        for ((di, si), gi) in drow.iter_mut().zip(srow).zip(grow) {
                            *di = si * (gi - dot);
                        }
                    };
                    if s.len() >= 16_384 {
                        da.par_chunks_mut(len)
                            .zip(s.par_chunks(len))
                            .zip(g.par_chunks(len))
                            .for_each(work);
                    } else {
                        da.chunks_mut(len).zip(s.chunks(len)).zip(g.chunks(len)).for_each(work);
                    }
                } else {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                dot += g[at(l)] * s[at(l)];
                            }
                            for l in 0..len {
                                da[at(l)] = s[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
                self.acc_owned(*a, da);
            }
            Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                let d = self.nodes[*gamma].t.data.len();
                let rows = xhat.len() / d;
                let gm = self.nodes[*gamma].t.data.clone();
                if self.nodes[*a].t.requires_grad {
                    let mut da = vec![0.0; xhat.len()];
                    let work = |(((da_row, g_row), xh_row), inv): (((&mut [f64], &[f64]), &[f64]), &f64)| {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = g_row[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xh_row[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g_row[j] * gm[j];
                            da_row[j] = inv * (dxh - m1 - xh_row[j] * m2);
                        }
                    };
                    if rows * d >= 65_536 {
                        da.par_chunks_mut(d)
                            .zip(g.par_chunks(d))
                            .zip(xhat.par_chunks(d))
                            .zip(inv_std.par_iter())
                            .for_each(work);
                    } else {
                        da.chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .zip(inv_std.iter())
                            .for_each(work);
                    }
                    self.acc_owned(*a, da);
                }
                if self.nodes[*gamma].t.requires_grad {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.acc_owned(*gamma, dg);
                }
                if self.nodes[*beta].t.requires_grad {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    self.acc_owned(*beta, db);
                }
            }
            Op::Gelu { a, tanh_cache } => {
                let da: Vec<f64> = self.nodes[*a]
                    .t
                    .data
                    .iter()
                    .zip(g)
                    .zip(tanh_cache)
                    .map(|((&x, gi), &t)| {
                        gi * (0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x))
                    })
                    .collect();
                self.acc_owned(*a, da);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                self.acc_owned(*a, da);
            }
            Op::RotateEveryTwo { a } => {
                // out = (-x2, x1)  =>  dx1 += g2, dx2 -= g1
                let mut da = vec![0.0; g.len()];
                for pair in 0..g.len() / 2 {
                    da[2 * pair] = g[2 * pair + 1];
                    da[2 * pair + 1] = -g[2 * pair];
                }
                self.acc_owned(*a, da);
            }
            Op::Mha(mha) => {
                let MhaOp {
                    q,
                    k,
                    v,
                    heads,
                    dim_head,
                    n_q,
                    n_kv,
                    sin_q,
                    cos_q,
                    sin_k,
                    cos_k,
                    rq,
                    rk,
                    attn,
                    mask,
                } = mha.as_ref();
                let (heads, dh, n_q, n_kv) = (*heads, *dim_head, *n_q, *n_kv);
                let h_width = heads * dh;
                let groups = rq.len() / (n_q * dh);
                let scale = 1.0 / (dh as f64).sqrt();
                let per_group_q = sin_q.len() == groups * n_q * dh;
                let per_group_k = sin_k.len() == groups * n_kv * dh;
                let vd = &self.nodes[*v].t.data;
                let mut dq_tmp = vec![0.0; groups * n_q * dh];
                let mut dk_tmp = vec![0.0; groups * n_kv * dh];
                let mut dv_tmp = vec![0.0; groups * n_kv * dh];
                let work = |(((gi, dq_g), dk_g), dv_g): (((usize, &mut [f64]), &mut [f64]), &mut [f64])| {
                    let bi = gi / heads;
                    let hi = gi % heads;
                    // upstream gradient and value head, contiguous
                    let mut go = vec![0.0; n_q * dh];
                    for i in 0..n_q {
                        go[i * dh..(i + 1) * dh]
                            .copy_from_slice(&g[bi * n_q * h_width + i * h_width + hi * dh..][..dh]);
                    }
                    let mut vh = vec![0.0; n_kv * dh];
                    for j in 0..n_kv {
                        vh[j * dh..(j + 1) * dh]
                            .copy_from_slice(&vd[bi * n_kv * h_width + j * h_width + hi * dh..][..dh]);
                    }
                    let attn_g = &attn[gi * n_q * n_kv..(gi + 1) * n_q * n_kv];
                    let mask_g = if mask.is_empty() { &[][..] } else { &mask[gi * n_q * n_kv..(gi + 1) * n_q * n_kv] };
                    // d(attn_used) = go v^T; dv = attn_used^T go
                    let mut d_attn = vec![0.0; n_q * n_kv];
                    mm_nt_acc(&mut d_attn, &go, &vh, n_q, dh, n_kv);
                    if mask_g.is_empty() {
                        mm_tn_acc(dv_g, attn_g, &go, n_q, n_kv, dh);
                        // (d_attn already equals the gradient at the probabilities)
                    } else {
                        let attn_used: Vec<f64> = attn_g.iter().zip(mask_g).map(|(a, m)| a * m).collect();
                        mm_tn_acc(dv_g, &attn_used, &go, n_q, n_kv, dh);
                        for (da, m) in d_attn.iter_mut().zip(mask_g) {
                            *da *= m;
                        }
                    }
                    // softmax rows, then score scale
                    for (d_row, a_row) in d_attn.chunks_mut(n_kv).zip(attn_g.chunks(n_kv)) {
                        let mut dot = 0.0;
                        for (d, a) in d_row.iter().zip(a_row) {
                            dot += d * a;
                        }
                        for (d, a) in d_row.iter_mut().zip(a_row) {
                            *d = a * (*d - dot) * scale;
                        }
                    }
                    // back through the dot products
                    let rq_g = &rq[gi * n_q * dh..(gi + 1) * n_q * dh];
                    let rk_g = &rk[gi * n_kv * dh..(gi + 1) * n_kv * dh];
                    let mut d_rq = vec![0.0; n_q * dh];
                    let mut d_rk = vec![0.0; n_kv * dh];
                    mm_nn_acc(&mut d_rq, &d_attn, rk_g, n_q, n_kv, dh);
                    mm_tn_acc(&mut d_rk, &d_attn, rq_g, n_q, n_kv, dh);
                    // back through the rotation
                    for i in 0..n_q {
                        let toff = if per_group_q { (gi * n_q + i) * dh } else { i * dh };
                        let (s, c) = (&sin_q[toff..toff + dh], &cos_q[toff..toff + dh]);
                        let dr = &d_rq[i * dh..(i + 1) * dh];
                        let dst = &mut dq_g[i * dh..(i + 1) * dh];
                        for t in 0..dh / 2 {
                            dst[2 * t] = dr[2 * t] * c[2 * t] + dr[2 * t + 1] * s[2 * t + 1];
                            dst[2 * t + 1] = dr[2 * t + 1] * c[2 * t + 1] - dr[2 * t] * s[2 * t];
                        }
                    }
                    for j in 0..n_kv {
                        let toff = if per_group_k { (gi * n_kv + j) * dh } else { j * dh };
                        let (s, c) = (&sin_k[toff..toff + dh], &cos_k[toff..toff + dh]);
                        let dr = &d_rk[j * dh..(j + 1) * dh];
                        let dst = &mut dk_g[j * dh..(j + 1) * dh];
                        for t in 0..dh / 2 {
                            dst[2 * t] = dr[2 * t] * c[2 * t] + dr[2 * t + 1] * s[2 * t + 1];
                            dst[2 * t + 1] = dr[2 * t + 1] * c[2 * t + 1] - dr[2 * t] * s[2 * t];
                        }
                    }
                };
                if groups * n_q * n_kv * dh >= PAR_FLOP_THRESHOLD && groups > 1 {
                    dq_tmp
                        .par_chunks_mut(n_q * dh)
                        .enumerate()
                        .zip(dk_tmp.par_chunks_mut(n_kv * dh))
                        .zip(dv_tmp.par_chunks_mut(n_kv * dh))
                        .for_each(work);
                } else {
                    dq_tmp
                        .chunks_mut(n_q * dh)
                        .enumerate()
                        .zip(dk_tmp.chunks_mut(n_kv * dh))
                        .zip(dv_tmp.chunks_mut(n_kv * dh))
                        .for_each(work);
                }
                // merge per-group gradients back to [B, N, heads*dh]
                let b = groups / heads;
                let merge = |tmp: &[f64], n: usize| -> Vec<f64> {
                    let mut full = vec![0.0; b * n * h_width];
                    for gi in 0..groups {
                        let bi = gi / heads;
                        let hi = gi % heads;
                        for i in 0..n {
                            full[bi * n * h_width + i * h_width + hi * dh..][..dh]
                                .copy_from_slice(&tmp[(gi * n + i) * dh..(gi * n + i + 1) * dh]);
                        }
                    }
                    full
                };
                if self.nodes[*q].t.requires_grad {
                    let dq = merge(&dq_tmp, n_q);
                    self.acc_owned(*q, dq);
                }
                if self.nodes[*k].t.requires_grad {
                    let dk = merge(&dk_tmp, n_kv);
                    self.acc_owned(*k, dk);
                }
                if self.nodes[*v].t.requires_grad {
                    let dv = merge(&dv_tmp, n_kv);
                    self.acc_owned(*v, dv);
                }
            }
        }
        self.nodes[id].op = op;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

// Rational tanh/exp in the classic Cephes style: full double precision,
// several times faster than the libm calls that dominate GELU-heavy passes.
// The coefficient digits are kept as published.

#[allow(clippy::excessive_precision)]
fn fast_exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const C1: f64 = 6.93145751953125e-1;
    const C2: f64 = 1.42860682030941723212e-6;
    const P: [f64; 3] = [
        1.26177193074810590878e-4,
        3.02994407707441961300e-2,
        9.99999999999999999910e-1,
    ];
    const Q: [f64; 4] = [
        3.00198505138664455042e-6,
        2.52448340349684104192e-3,
        2.27265548208155028766e-1,
        2.00000000000000000005e0,
    ];
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -709.0 {
        return 0.0;
    }
    let k = (LOG2E * x + 0.5).floor();
    let r = x - k * C1 - k * C2;
    let r2 = r * r;
    let p = r * (P[0] * r2 * r2 + P[1] * r2 + P[2]);
    let q = Q[0] * r2 * r2 * r2 + Q[1] * r2 * r2 + Q[2] * r2 + Q[3];
    let e = 1.0 + 2.0 * p / (q - p);
    // scale by 2^k
    let bits = ((k as i64 + 1023) as u64) << 52;
    e * f64::from_bits(bits)
}

#[allow(clippy::excessive_precision)]
fn fast_tanh(x: f64) -> f64 {
    const P: [f64; 3] = [
        -9.64399179425052238628e-1,
        -9.92877231001918586564e1,
        -1.61468768441708447952e3,
    ];
    const Q: [f64; 3] = [
        1.12811678491632931402e2,
        2.23548839060100448583e3,
        4.84406305325125486048e3,
    ];
    let z = x.abs();
    if z > 19.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    if z >= 0.625 {
        let s = fast_exp(2.0 * z);
        let t = 1.0 - 2.0 / (s + 1.0);
        if x >= 0.0 {
            t
        } else {
            -t
        }
    } else {
        let w = x * x;
        let num = ((P[0] * w + P[1]) * w + P[2]) * w;
        let den = ((w + Q[0]) * w + Q[1]) * w + Q[2];
        x + x * num / den
    }
}

// ── Matmul kernels (all accumulate into c) ──────────────────────────────

/// Row-parallel c[m,n] += a[m,k] b[k,n].
fn mm_nn_par(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| mm_nn_acc(crow, arow, b, 1, k, n));
    } else {
        mm_nn_acc(c, a, b, m, k, n);
    }
}

/// Row-parallel c[m,n] += a[m,k] b[n,k]^T.
fn mm_nt_par(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| mm_nt_acc(crow, arow, b, 1, k, n));
    } else {
        mm_nt_acc(c, a, b, m, k, n);
    }
}

/// c[m,n] += a[m,k] b[k,n]
fn mm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

/// c[m,n] += a[m,k] b[n,k]^T
fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// c[k,n] += a[m,k]^T b[m,n]
fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

fn permute_data(src: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let in_strides = strides_of(in_shape);
    // stride in the input for a unit step along each output axis
    let step: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = vec![0.0; src.len()];
    let mut counter = vec![0usize; rank];
    let mut in_off = 0usize;
    for (out_off, slot) in out.iter_mut().enumerate() {
        *slot = src[in_off];
        if out_off + 1 == src.len() {
            break;
        }
        // advance the output multi-index, updating the input offset in step
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            in_off += step[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
            in_off -= step[ax] * out_shape[ax];
        }
    }
    out
}


#[cfg(test)]
mod mathx_tests {
    use super::{fast_exp, fast_tanh};
    use crate::rng::SeedTree;

    #[test]
    fn fast_exp_matches_std() {
        let mut rng = SeedTree::new(90).rng();
        for _ in 0..20_000 {
            let x = rng.uniform_in(-40.0, 40.0);
            let a = fast_exp(x);
            let b = x.exp();
            let rel = (a - b).abs() / b.max(1e-300);
            assert!(rel < 1e-14, "x={x}: {a} vs {b}");
        }
        assert_eq!(fast_exp(-1000.0), 0.0);
        assert!(fast_exp(1000.0).is_infinite());
    }

    #[test]
    fn fast_tanh_matches_std() {
        let mut rng = SeedTree::new(91).rng();
        for _ in 0..20_000 {
            let x = rng.uniform_in(-25.0, 25.0);
            let a = fast_tanh(x);
            let b = x.tanh();
            assert!((a - b).abs() < 1e-14, "x={x}: {a} vs {b}");
        }
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(30.0), 1.0);
        assert_eq!(fast_tanh(-30.0), -1.0);
    }
}
