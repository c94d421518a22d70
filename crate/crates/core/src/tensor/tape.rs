//! Reverse-mode tape. Every op appends one node holding its output value
//! and whatever it needs for the backward sweep; `backward` replays the
//! nodes in exact reverse order, accumulating (`+=`) into inputs.

use super::kernels::{self, gemm, View};
use super::{Float, ParamId, ParamStore, Segments, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Recip(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SegmentMean { x: Var, segs: Segments },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Gather { x: Var, idx: Vec<Option<usize>> },
    MaskRows { x: Var, mask: Vec<bool> },
    LayerNorm { x: Var, inv_std: Vec<F> },
    Attention { q: Var, k: Var, v: Var, segs: Segments, heads: usize, probs: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Mse { pred: Var, target: Var, mask: Option<Vec<bool>>, denom: usize },
    L2NormalizeRows { x: Var, norms: Vec<F> },
    CosineRows { a: Var, b: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Below this norm a vector is treated as degenerate by the cosine and
/// normalization ops: the result is zero and no gradient flows.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    param_vars: Vec<Option<Var>>,
    links: Vec<(Var, ParamId)>,
    consumed: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), param_vars: Vec::new(), links: Vec::new(), consumed: false }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_vars.clear();
        self.links.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is retained after `backward`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.param_vars[id.0] = Some(v);
        self.links.push((v, id));
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, name: &'static str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let tr = self.value(r);
        if tr.numel() != cols {
            return Err(shape_err(name, self.shape(a), tr.shape()));
        }
        let ta = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(ta.row(i).iter().zip(tr.data()).map(|(&x, &y)| f(x, y)));
        }
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(r);
        self.push(out, op, rg, name)
    }

    /// `a[i, :] + r` for every row.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, "add_row", |x, y| x + y, Op::AddRow(a, r))
    }

    /// `a[i, :] * r` for every row.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, "mul_row", |x, y| x * y, Op::MulRow(a, r))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(a);
        self.push(out, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", kernels::gelu, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "silu", kernels::silu, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= F::zero()) {
            return Err(Error::invalid("log", "non-positive input"));
        }
        self.unary(a, "log", |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x == F::zero()) {
            return Err(Error::invalid("recip", "division by zero"));
        }
        self.unary(a, "recip", |x| F::one() / x, Op::Recip(a))
    }

    /// `a * s` where `s` is a one-element tensor on the tape.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(shape_err("mul_scalar_var", self.shape(a), ts.shape()));
        }
        let c = ts.item();
        let rg = self.rg(a) || self.rg(s);
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push(out, Op::MulScalarVar(a, s), rg, "mul_scalar_var")
    }

    // ---- linear algebra -----------------------------------------------

    /// `a b`, or `a b^T` when `trans_b`.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        let bv = if trans_b { View::full(br, bc).t() } else { View::full(br, bc) };
        gemm(F::one(), self.value(a).data(), View::full(m, k), self.value(b).data(), bv, F::zero(), &mut out, View::full(m, n));
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(m, n, out)?, Op::MatMul { a, b, trans_b }, rg, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (wk, n) = self.dims(w);
        if k != wk {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![F::zero(); m * n];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != n {
                return Err(shape_err("linear_bias", self.shape(w), tb.shape()));
            }
            for i in 0..m {
                out[i * n..(i + 1) * n].copy_from_slice(tb.data());
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm(F::one(), self.value(x).data(), View::full(m, k), self.value(w).data(), View::full(k, n), beta, &mut out, View::full(m, n));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(m, n, out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let ta = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(c, r, out)?, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::invalid("mean", "empty input"));
        }
        let s = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Mean over the rows of each segment: `[N, D] -> [S, D]`.
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let (n, d) = self.dims(x);
        if segs.total_rows() != n {
            return Err(shape_err("segment_mean", self.shape(x), &[segs.total_rows()]));
        }
        let tx = self.value(x);
        let mut out = vec![F::zero(); segs.len() * d];
        for (s, (start, len)) in segs.iter().enumerate() {
            if len == 0 {
                return Err(Error::invalid("segment_mean", "empty segment"));
            }
            let o = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                for (acc, &v) in o.iter_mut().zip(tx.row(r)) {
                    *acc += v;
                }
            }
            let inv = F::one() / F::of(len as f64);
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(segs.len(), d, out)?, Op::SegmentMean { x, segs: segs.clone() }, rg, "segment_mean")
    }

    // ---- structural ---------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, total, out)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(shape_err("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(len, c, data)?, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(shape_err("slice_cols", self.shape(x), &[start, len]));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(r, len, data)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Row gather; `None` yields a zero row. Doubles as embedding lookup,
    /// length regulation, temporal upsampling and per-segment broadcast.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let tx = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            match i {
                Some(i) if i < r => data.extend_from_slice(tx.row(i)),
                Some(i) => return Err(Error::invalid("gather_rows", format!("row {i} out of range for {r} rows"))),
                None => data.extend(std::iter::repeat_n(F::zero(), c)),
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(idx.len(), c, data)?, Op::Gather { x, idx: idx.to_vec() }, rg, "gather_rows")
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
        self.gather_rows(x, &idx)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// Zero the rows whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != r {
            return Err(shape_err("mask_rows", self.shape(x), &[mask.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = F::zero());
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(r, c, data)?, Op::MaskRows { x, mask: mask.to_vec() }, rg, "mask_rows")
    }

    // ---- normalization and attention -----------------------------------

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let tx = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let cf = F::of(c as f64);
        for i in 0..r {
            let row = tx.row(i);
            let mu = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
            let is = F::one() / (var + F::of(eps)).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&v| (v - mu) * is));
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(r, c, out)?, Op::LayerNorm { x, inv_std }, rg, "layer_norm")
    }

    /// Multi-head scaled dot-product attention restricted to each segment.
    /// `q`, `k`, `v` are `[N, heads * head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: &Segments, heads: usize) -> Result<Var> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || segs.total_rows() != n {
            return Err(Error::invalid("attention", format!("width {d} heads {heads} rows {n} segments {}", segs.total_rows())));
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![F::zero(); n * d];
        let psize: usize = segs.iter().map(|(_, l)| l * l).sum::<usize>() * heads;
        let mut probs = vec![F::zero(); psize];
        let mut poff = 0;
        for (start, len) in segs.iter() {
            for h in 0..heads {
                let p = &mut probs[poff..poff + len * len];
                let qv = View::block(start * d + h * dh, len, dh, d);
                gemm(scale, tq, qv, tk, qv.t(), F::zero(), p, View::full(len, len));
                for row in p.chunks_mut(len) {
                    kernels::softmax_row(row);
                }
                gemm(F::one(), p, View::full(len, len), tv, qv, F::zero(), &mut out, qv);
                poff += len * len;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention { q, k, v, segs: segs.clone(), heads, probs };
        self.push(Tensor::from_vec(n, d, out)?, op, rg, "attention")
    }

    /// Row-wise L2 normalization; degenerate rows map to zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let tx = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = tx.row(i);
            let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(nrm);
            if nrm.f64() < DEGENERATE_NORM {
                log::debug!("l2_normalize_rows: degenerate row {i}");
                out.extend(std::iter::repeat_n(F::zero(), c));
            } else {
                out.extend(row.iter().map(|&v| v / nrm));
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(r, c, out)?, Op::L2NormalizeRows { x, norms }, rg, "l2_normalize_rows")
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(logits);
        if targets.len() != n {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid("cross_entropy", format!("target {t} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
            loss += lse - row[targets[i]];
            kernels::softmax_row(row);
        }
        loss /= F::of(n as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, rg, "cross_entropy")
    }

    /// Mean squared error over the entries of unmasked rows.
    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err("mse", tp.shape(), tt.shape()));
        }
        let (r, c) = (tp.rows(), tp.cols());
        if let Some(m) = mask {
            if m.len() != r {
                return Err(shape_err("mse_mask", tp.shape(), &[m.len()]));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let kept = (0..r).filter(|&i| keep(i)).count();
        if kept == 0 || c == 0 {
            return Err(Error::invalid("mse", "every entry is masked"));
        }
        let mut s = F::zero();
        for i in (0..r).filter(|&i| keep(i)) {
            for (&a, &b) in tp.row(i).iter().zip(tt.row(i)) {
                s += (a - b) * (a - b);
            }
        }
        let denom = kept * c;
        let loss = s / F::of(denom as f64);
        let rg = self.rg(pred) || self.rg(target);
        let op = Op::Mse { pred, target, mask: mask.map(|m| m.to_vec()), denom };
        self.push(Tensor::scalar(loss), op, rg, "mse")
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.mse_masked(pred, target, None)
    }

    /// Cosine similarity of matching rows, `[N, D] x [N, D] -> [N, 1]`.
    /// Degenerate rows give 0 with zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine", ta.shape(), tb.shape()));
        }
        let r = ta.rows();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let (x, y) = (ta.row(i), tb.row(i));
            let nx = x.iter().map(|&v| v * v).sum::<F>().sqrt();
            let ny = y.iter().map(|&v| v * v).sum::<F>().sqrt();
            if nx.f64() < DEGENERATE_NORM || ny.f64() < DEGENERATE_NORM {
                log::debug!("cosine: degenerate row {i}");
                out.push(F::zero());
            } else {
                let dot = x.iter().zip(y).map(|(&p, &q)| p * q).sum::<F>();
                out.push(dot / (nx * ny));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(r, 1, out)?, Op::CosineRows { a, b }, rg, "cosine")
    }

    // ---- backward -------------------------------------------------------

    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape(), g.clone()).ok()
    }

    /// Add the gradients of every parameter brought onto this tape into
    /// the store's gradient buffers.
    pub fn write_param_grads(&self, store: &mut ParamStore<F>) {
        for &(v, id) in &self.links {
            if let Some(Some(g)) = self.grads.get(v.0) {
                store.accumulate_grad(id, g);
            }
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", "loss must have a single element"));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            backprop(&self.nodes, &mut self.grads, i, &g);
            let any_bad = g.iter().any(|x| !x.is_finite());
            self.grads[i] = Some(g);
            if any_bad {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }
}

/// Gradient buffer of `v`, allocated on first touch; `None` when `v`
/// does not require a gradient.
fn slot<'a, F: Float>(nodes: &[Node<F>], grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn backprop<F: Float>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(nodes, grads, v) {
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                for ((d, &x), &y) in s.iter_mut().zip(g).zip(vb) {
                    *d += x * y;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((d, &x), &y) in s.iter_mut().zip(g).zip(va) {
                    *d += x * y;
                }
            }
        }
        Op::AddRow(a, r) => {
            let c = nodes[r.0].value.numel();
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(s) = slot(nodes, grads, *r) {
                for row in g.chunks(c) {
                    s.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::MulRow(a, r) => {
            let vr = val(*r);
            let va = val(*a);
            let c = vr.len();
            if let Some(s) = slot(nodes, grads, *a) {
                for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                    for ((d, &x), &y) in srow.iter_mut().zip(grow).zip(vr) {
                        *d += x * y;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *r) {
                for (arow, grow) in va.chunks(c).zip(g.chunks(c)) {
                    for ((d, &x), &y) in s.iter_mut().zip(grow).zip(arow) {
                        *d += x * y;
                    }
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::MulScalarVar(a, sv) => {
            let c = val(*sv)[0];
            let va = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
            }
            if let Some(s) = slot(nodes, grads, *sv) {
                s[0] += g.iter().zip(va).map(|(&x, &y)| x * y).sum::<F>();
            }
        }
        Op::Recip(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((d, &x), &y) in s.iter_mut().zip(g).zip(out) {
                    *d -= x * y * y;
                }
            }
        }
        Op::Gelu(a) | Op::Silu(a) | Op::Tanh(a) | Op::Exp(a) | Op::Log(a) | Op::Square(a) => {
            let va = val(*a);
            let op = &node.op;
            if let Some(s) = slot(nodes, grads, *a) {
                for (j, d) in s.iter_mut().enumerate() {
                    let x = va[j];
                    let dy = match op {
                        Op::Gelu(_) => kernels::gelu_grad(x),
                        Op::Silu(_) => kernels::silu_grad(x),
                        Op::Tanh(_) => F::one() - out[j] * out[j],
                        Op::Exp(_) => out[j],
                        Op::Log(_) => F::one() / x,
                        _ => F::of(2.0) * x,
                    };
                    *d += g[j] * dy;
                }
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let (br, bc) = (nodes[b.0].value.rows(), nodes[b.0].value.cols());
            let n = if *trans_b { br } else { bc };
            let (va, vb) = (val(*a), val(*b));
            let bview = if *trans_b { View::full(br, bc).t() } else { View::full(br, bc) };
            if let Some(s) = slot(nodes, grads, *a) {
                // dA = G B^T
                gemm(F::one(), g, View::full(m, n), vb, bview.t(), F::one(), s, View::full(m, k));
            }
            if let Some(s) = slot(nodes, grads, *b) {
                // dB = A^T G (or its transpose)
                if *trans_b {
                    gemm(F::one(), g, View::full(m, n).t(), va, View::full(m, k), F::one(), s, View::full(br, bc));
                } else {
                    gemm(F::one(), va, View::full(m, k).t(), g, View::full(m, n), F::one(), s, View::full(br, bc));
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (m, k) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
            let n = nodes[w.0].value.cols();
            let (vx, vw) = (val(*x), val(*w));
            if let Some(s) = slot(nodes, grads, *x) {
                gemm(F::one(), g, View::full(m, n), vw, View::full(k, n).t(), F::one(), s, View::full(m, k));
            }
            if let Some(s) = slot(nodes, grads, *w) {
                gemm(F::one(), vx, View::full(m, k).t(), g, View::full(m, n), F::one(), s, View::full(k, n));
            }
            if let Some(b) = b {
                if let Some(s) = slot(nodes, grads, *b) {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = F::of(nodes[a.0].value.numel() as f64);
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::SegmentMean { x, segs } => {
            let d = nodes[x.0].value.cols();
            if let Some(s) = slot(nodes, grads, *x) {
                for (si, (start, len)) in segs.iter().enumerate() {
                    let inv = F::one() / F::of(len as f64);
                    let gs = &g[si * d..(si + 1) * d];
                    for r in start..start + len {
                        for (dst, &v) in s[r * d..(r + 1) * d].iter_mut().zip(gs) {
                            *dst += v * inv;
                        }
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut off = 0;
            for &p in parts {
                let c = nodes[p.0].value.cols();
                if let Some(s) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        for j in 0..c {
                            s[r * c + j] += g[r * total + off + j];
                        }
                    }
                }
                off += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p.0].value.numel();
                if let Some(s) = slot(nodes, grads, p) {
                    s.iter_mut().zip(&g[off..off + n]).for_each(|(d, &x)| *d += x);
                }
                off += n;
            }
        }
        Op::SliceRows { x, start } => {
            let c = nodes[x.0].value.cols();
            if let Some(s) = slot(nodes, grads, *x) {
                s[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::SliceCols { x, start } => {
            let c = nodes[x.0].value.cols();
            let len = node.value.cols();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, grow) in g.chunks(len).enumerate() {
                    s[r * c + start..r * c + start + len].iter_mut().zip(grow).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Gather { x, idx } => {
            let c = nodes[x.0].value.cols();
            if let Some(s) = slot(nodes, grads, *x) {
                for (o, &i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        for (d, &v) in s[i * c..(i + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::MaskRows { x, mask } => {
            let c = nodes[x.0].value.cols();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, &keep) in mask.iter().enumerate() {
                    if keep {
                        s[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let c = node.value.cols();
            let cf = F::of(c as f64);
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, &is) in inv_std.iter().enumerate() {
                    let y = &out[r * c..(r + 1) * c];
                    let gy = &g[r * c..(r + 1) * c];
                    let mg = gy.iter().copied().sum::<F>() / cf;
                    let mgy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<F>() / cf;
                    for j in 0..c {
                        s[r * c + j] += is * (gy[j] - mg - y[j] * mgy);
                    }
                }
            }
        }
        Op::Attention { q, k, v, segs, heads, probs } => {
            attention_backward(nodes, grads, g, *q, *k, *v, segs, *heads, probs);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = nodes[logits.0].value.cols();
            let n = targets.len();
            let scale = g[0] / F::of(n as f64);
            if let Some(s) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let oh = if j == t { F::one() } else { F::zero() };
                        s[r * c + j] += scale * (probs[r * c + j] - oh);
                    }
                }
            }
        }
        Op::Mse { pred, target, mask, denom } => {
            let c = nodes[pred.0].value.cols();
            let (vp, vt) = (val(*pred), val(*target));
            let scale = F::of(2.0) * g[0] / F::of(*denom as f64);
            let keep = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
            for (v, sign) in [(*pred, F::one()), (*target, -F::one())] {
                if let Some(s) = slot(nodes, grads, v) {
                    for (j, d) in s.iter_mut().enumerate() {
                        if keep(j / c.max(1)) {
                            *d += sign * scale * (vp[j] - vt[j]);
                        }
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let c = node.value.cols();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, &nrm) in norms.iter().enumerate() {
                    if nrm.f64() < DEGENERATE_NORM {
                        continue;
                    }
                    let y = &out[r * c..(r + 1) * c];
                    let gy = &g[r * c..(r + 1) * c];
                    let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..c {
                        s[r * c + j] += (gy[j] - y[j] * dot) / nrm;
                    }
                }
            }
        }
        Op::CosineRows { a, b } => {
            let c = nodes[a.0].value.cols();
            let (va, vb) = (val(*a), val(*b));
            let rows = out.len();
            let mut ga = vec![F::zero(); va.len()];
            let mut gb = vec![F::zero(); vb.len()];
            for r in 0..rows {
                let x = &va[r * c..(r + 1) * c];
                let y = &vb[r * c..(r + 1) * c];
                let nx = x.iter().map(|&v| v * v).sum::<F>().sqrt();
                let ny = y.iter().map(|&v| v * v).sum::<F>().sqrt();
                if nx.f64() < DEGENERATE_NORM || ny.f64() < DEGENERATE_NORM {
                    continue;
                }
                let cs = out[r];
                for j in 0..c {
                    ga[r * c + j] = g[r] * (y[j] / (nx * ny) - cs * x[j] / (nx * nx));
                    gb[r * c + j] = g[r] * (x[j] / (nx * ny) - cs * y[j] / (ny * ny));
                }
            }
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(&ga).for_each(|(d, &v)| *d += v);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(&gb).for_each(|(d, &v)| *d += v);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Float>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    q: Var,
    k: Var,
    v: Var,
    segs: &Segments,
    heads: usize,
    probs: &[F],
) {
    let (n, d) = (nodes[q.0].value.rows(), nodes[q.0].value.cols());
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (tq, tk, tv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    let mut poff = 0;
    for (start, len) in segs.iter() {
        let mut dp = vec![F::zero(); len * len];
        for h in 0..heads {
            let p = &probs[poff..poff + len * len];
            let blk = View::block(start * d + h * dh, len, dh, d);
            let pv = View::full(len, len);
            // dV = P^T dO
            gemm(F::one(), p, pv.t(), g, blk, F::zero(), &mut dv, blk);
            // dP = dO V^T
            gemm(F::one(), g, blk, tv, blk.t(), F::zero(), &mut dp, pv);
            // dS = P * (dP - rowsum(dP * P))
            for r in 0..len {
                let pr = &p[r * len..(r + 1) * len];
                let dr = &mut dp[r * len..(r + 1) * len];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot);
                }
            }
            // dQ = dS K * scale, dK = dS^T Q * scale
            gemm(scale, &dp, pv, tk, blk, F::zero(), &mut dq, blk);
            gemm(scale, &dp, pv.t(), tq, blk, F::zero(), &mut dk, blk);
            poff += len * len;
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(s) = slot(nodes, grads, var) {
            s.iter_mut().zip(&buf).for_each(|(d, &x)| *d += x);
        }
    }
}
