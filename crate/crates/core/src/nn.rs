//! Layers built from tape ops. A layer only stores parameter ids, so the
//! same model definition runs over an `f32` store for training and an
//! `f64` store for gradient checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Float, ParamId, ParamStore, Segments, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn normal_tensor<F: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// N(0, 1/fan_in)
    Fan,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Fan => normal_tensor(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        let w = store.add(format!("{name}.w"), w);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Learned lookup table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), normal_tensor(&[rows, dim], std, rng));
        Embedding { table, rows }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.embedding(t, ids)
    }
}

/// Learned absolute positions, indexed by position within each segment.
pub fn add_positions<F: Float>(tape: &mut Tape<F>, store: &ParamStore<F>, table: &Embedding, x: Var, segs: &Segments) -> Result<Var> {
    let pos: Vec<usize> = segs.row_positions().into_iter().map(|p| p.min(table.rows - 1)).collect();
    let p = table.forward(tape, store, &pos)?;
    tape.add(x, p)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, dims: (usize, usize, usize), out_init: Init, rng: &mut R) -> Self {
        let (i, h, o) = dims;
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), i, h, true, Init::Fan, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), h, o, true, out_init, rng),
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        SelfAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, Init::Fan, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, Init::Fan, rng),
            heads,
            width,
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, segs: &Segments) -> Result<Var> {
        let qkv = self.qkv.forward(tape, store, x)?;
        let w = self.width;
        let q = tape.slice_cols(qkv, 0, w)?;
        let k = tape.slice_cols(qkv, w, w)?;
        let v = tape.slice_cols(qkv, 2 * w, w)?;
        let a = tape.attention(q, k, v, segs, self.heads)?;
        self.out.forward(tape, store, a)
    }
}

/// Pre-norm transformer block over packed segments.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: SelfAttention,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, width: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        TransformerBlock {
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (width, hidden, width), Init::Fan, rng),
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, segs: &Segments) -> Result<Var> {
        let h = tape.layer_norm(x, LN_EPS)?;
        let a = self.attn.forward(tape, store, h, segs)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, LN_EPS)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}

/// `norm(x) * (1 + scale) + shift`, with `shift`/`scale` already row-aligned.
pub fn modulate<F: Float>(tape: &mut Tape<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x, LN_EPS)?;
    let s = tape.add_scalar(scale, F::one())?;
    let h = tape.mul(h, s)?;
    tape.add(h, shift)
}

/// Kernel-3 convolution along each segment, zero-padded at segment edges.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub proj: Linear,
}

impl Conv1d {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Conv1d { proj: Linear::new(store, name, 3 * fan_in, fan_out, true, Init::Fan, rng) }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, segs: &Segments) -> Result<Var> {
        let mut prev = Vec::with_capacity(segs.total_rows());
        let mut next = Vec::with_capacity(segs.total_rows());
        for (start, len) in segs.iter() {
            for p in 0..len {
                let r = start + p;
                prev.push((p > 0).then(|| r - 1));
                next.push((p + 1 < len).then_some(r + 1));
            }
        }
        let a = tape.gather_rows(x, &prev)?;
        let c = tape.gather_rows(x, &next)?;
        let cols = tape.concat_cols(&[a, x, c])?;
        self.proj.forward(tape, store, cols)
    }
}

/// Sinusoidal features of scalar times, one row per time.
pub fn timestep_features<F: Float>(times: &[f64], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        let x = t * 1000.0;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(F::of((x * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(F::of((x * freq).cos()));
        }
        for _ in 2 * half..dim {
            data.push(F::zero());
        }
    }
    Tensor::from_vec(times.len(), dim, data).expect("consistent size")
}

/// Randomize every parameter (including zero-initialized ones); used to
/// make gradient checks exercise all paths.
pub fn jitter_all<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, std: f64, rng: &mut R) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let v = store.value_mut(id);
        for x in v.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x += F::of(z * std);
        }
    }
}
