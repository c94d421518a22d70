//! Dual-encoder style embedding: an audio branch over latent frames and a
//! text branch over style descriptors, trained contrastively with
//! auxiliary attribute heads on the pooled audio features.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{add_positions, Embedding, Init, Linear, Mlp, TransformerBlock, LN_EPS};
use crate::tensor::{clip_grad_norm, warmup_lr, AdamConfig, AdamState, Float, ParamId, ParamStore, Segments, Tape, Tensor, Var};
use crate::world::{
    sample_utterance_with, timbre_perturb, Classifier, Dataset, FitConfig, StyleFactors, StyleText, Utterance, World, NUM_EMOTIONS,
    NUM_STYLE_COMBOS, STYLE_VOCAB,
};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleEncoderConfig {
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub audio_blocks: usize,
    pub text_blocks: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub max_frames: usize,
}

impl Default for StyleEncoderConfig {
    fn default() -> Self {
        StyleEncoderConfig { width: 64, heads: 4, mlp_hidden: 128, audio_blocks: 2, text_blocks: 1, embed_dim: 32, head_hidden: 64, max_frames: 128 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleLossWeights {
    pub lambda_c: f64,
    pub lambda_m: f64,
}

impl Default for StyleLossWeights {
    fn default() -> Self {
        StyleLossWeights { lambda_c: 1.0, lambda_m: 1.0 }
    }
}

/// Width of one front-end row for `channels`-wide frames.
pub fn frontend_width(channels: usize) -> usize {
    2 * channels + 1
}

/// Per-frame audio input: per-channel z-scored frame, its first
/// difference, and the utterance's log mean channel std. Z-scoring within
/// the utterance removes the per-channel speaker gain and offset.
pub fn audio_frontend(frames: &Tensor<f32>) -> Vec<f64> {
    let (t, d) = (frames.rows(), frames.cols());
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for r in 0..t {
        for (c, &x) in frames.row(r).iter().enumerate() {
            mean[c] += x as f64 / t as f64;
        }
    }
    for r in 0..t {
        for (c, &x) in frames.row(r).iter().enumerate() {
            var[c] += (x as f64 - mean[c]).powi(2) / t as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
    let energy = (std.iter().sum::<f64>() / d as f64).ln();
    let width = frontend_width(d);
    let mut out = vec![0.0f64; t * width];
    for r in 0..t {
        for c in 0..d {
            let z = (frames.row(r)[c] as f64 - mean[c]) / std[c];
            out[r * width + c] = z;
            if r > 0 {
                out[r * width + d + c] = z - out[(r - 1) * width + c];
            }
        }
        out[r * width + 2 * d] = energy;
    }
    out
}

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub config: StyleEncoderConfig,
    pub channels: usize,
    audio_in: Linear,
    audio_pos: Embedding,
    audio_blocks: Vec<TransformerBlock>,
    audio_proj: Linear,
    emotion_head: Mlp,
    energy_head: Mlp,
    rate_head: Mlp,
    text_emb: Embedding,
    text_pos: Embedding,
    text_blocks: Vec<TransformerBlock>,
    text_proj: Linear,
    pub tau: ParamId,
}

/// Pooled pre-projection features and unit-norm embeddings, one row per item.
#[derive(Clone, Copy, Debug)]
pub struct AudioOut {
    pub h_pre: Var,
    pub h_a: Var,
}

impl StyleEncoder {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, config: &StyleEncoderConfig, channels: usize, rng: &mut R) -> Self {
        let c = config;
        let w = c.width;
        let blocks = |store: &mut ParamStore<F>, rng: &mut R, prefix: &str, n: usize| {
            (0..n).map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), w, c.heads, c.mlp_hidden, rng)).collect::<Vec<_>>()
        };
        let audio_in = Linear::new(store, "style.audio.in", frontend_width(channels), w, true, Init::Fan, rng);
        let audio_pos = Embedding::new(store, "style.audio.pos", c.max_frames, w, 0.02, rng);
        let audio_blocks = blocks(store, rng, "style.audio", c.audio_blocks);
        let audio_proj = Linear::new(store, "style.audio.proj", w, c.embed_dim, true, Init::Fan, rng);
        let emotion_head = Mlp::new(store, "style.head.emotion", (w, c.head_hidden, NUM_EMOTIONS), Init::Zero, rng);
        let energy_head = Mlp::new(store, "style.head.energy", (w, c.head_hidden, 1), Init::Zero, rng);
        let rate_head = Mlp::new(store, "style.head.rate", (w, c.head_hidden, 1), Init::Zero, rng);
        let text_emb = Embedding::new(store, "style.text.emb", STYLE_VOCAB.len(), w, 1.0, rng);
        let text_pos = Embedding::new(store, "style.text.pos", 3, w, 0.02, rng);
        let text_blocks = blocks(store, rng, "style.text", c.text_blocks);
        let text_proj = Linear::new(store, "style.text.proj", w, c.embed_dim, true, Init::Fan, rng);
        let tau = store.add("style.tau", Tensor::scalar(F::of(TAU_INIT)));
        StyleEncoder {
            config: c.clone(),
            channels,
            audio_in,
            audio_pos,
            audio_blocks,
            audio_proj,
            emotion_head,
            energy_head,
            rate_head,
            text_emb,
            text_pos,
            text_blocks,
            text_proj,
            tau,
        }
    }

    pub fn forward_audio<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, frames: &[&Tensor<f32>]) -> Result<AudioOut> {
        let width = frontend_width(self.channels);
        let mut rows = Vec::new();
        let mut lengths = Vec::with_capacity(frames.len());
        for f in frames {
            if f.rows() == 0 {
                return Err(Error::invalid("encode_audio", "empty frame sequence"));
            }
            if f.cols() != self.channels {
                return Err(Error::Shape { op: "encode_audio", lhs: f.shape().to_vec(), rhs: vec![f.rows(), self.channels] });
            }
            rows.extend(audio_frontend(f).into_iter().map(F::of));
            lengths.push(f.rows());
        }
        let segs = Segments::from_lengths(&lengths);
        let x = tape.constant(Tensor::from_vec(segs.total_rows(), width, rows)?);
        let mut h = self.audio_in.forward(tape, store, x)?;
        h = add_positions(tape, store, &self.audio_pos, h, &segs)?;
        for b in &self.audio_blocks {
            h = b.forward(tape, store, h, &segs)?;
        }
        h = tape.layer_norm(h, LN_EPS)?;
        let h_pre = tape.segment_mean(h, &segs)?;
        let p = self.audio_proj.forward(tape, store, h_pre)?;
        let h_a = tape.l2_normalize_rows(p)?;
        Ok(AudioOut { h_pre, h_a })
    }

    pub fn forward_text<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, texts: &[&StyleText]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(texts.len());
        for t in texts {
            if t.tokens.is_empty() {
                return Err(Error::invalid("encode_style_text", "empty descriptor"));
            }
            if let Some(&bad) = t.tokens.iter().find(|&&x| x >= STYLE_VOCAB.len()) {
                return Err(Error::invalid("encode_style_text", format!("token {bad} outside the style vocabulary")));
            }
            ids.extend_from_slice(&t.tokens);
            lengths.push(t.tokens.len());
        }
        let segs = Segments::from_lengths(&lengths);
        let mut h = self.text_emb.forward(tape, store, &ids)?;
        h = add_positions(tape, store, &self.text_pos, h, &segs)?;
        for b in &self.text_blocks {
            h = b.forward(tape, store, h, &segs)?;
        }
        h = tape.layer_norm(h, LN_EPS)?;
        let pooled = tape.segment_mean(h, &segs)?;
        let p = self.text_proj.forward(tape, store, pooled)?;
        tape.l2_normalize_rows(p)
    }

    /// Emotion logits `[N, 5]` and `[energy, rate]` regressions `[N, 2]`.
    pub fn aux_heads<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, h_pre: Var) -> Result<(Var, Var)> {
        let logits = self.emotion_head.forward(tape, store, h_pre)?;
        let e = self.energy_head.forward(tape, store, h_pre)?;
        let r = self.rate_head.forward(tape, store, h_pre)?;
        Ok((logits, tape.concat_cols(&[e, r])?))
    }

    pub fn tau_value<F: Float>(&self, store: &ParamStore<F>) -> f64 {
        store.value(self.tau).item().f64()
    }

    /// Clamp tau into `[tau_min, TAU_MAX]`.
    pub fn clamp_tau<F: Float>(&self, store: &mut ParamStore<F>, tau_min: f64) {
        let t = store.value_mut(self.tau);
        let v = t.data()[0].f64().clamp(tau_min, TAU_MAX);
        t.data_mut()[0] = F::of(v);
    }
}

/// Audio-anchored InfoNCE over cosine similarities of unit-norm rows:
/// mean over i of `-log softmax_j(sim(a_i, t_j) / tau)[i]`.
pub fn infonce_loss<F: Float>(tape: &mut Tape<F>, h_a: Var, h_t: Var, tau: Var) -> Result<Var> {
    let n = tape.value(h_a).rows();
    if n < 2 {
        return Err(Error::invalid("infonce", format!("batch of {n} has no negatives")));
    }
    let sims = tape.matmul_t(h_a, h_t, true)?;
    let inv = tape.recip(tau)?;
    let logits = tape.mul_scalar_var(sims, inv)?;
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &targets)
}

/// Standardization of the `[energy level, rate level]` regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl RegressionStats {
    pub fn fit(factors: &[StyleFactors]) -> Self {
        let n = factors.len().max(1) as f64;
        let raw = |f: &StyleFactors| [f.energy as f64, f.rate as f64];
        let mut mean = [0.0; 2];
        let mut sq = [0.0; 2];
        for f in factors {
            let v = raw(f);
            for k in 0..2 {
                mean[k] += v[k] / n;
                sq[k] += v[k] * v[k] / n;
            }
        }
        let std = [(sq[0] - mean[0] * mean[0]).max(1e-12).sqrt(), (sq[1] - mean[1] * mean[1]).max(1e-12).sqrt()];
        RegressionStats { mean, std }
    }

    pub fn targets(&self, f: &StyleFactors) -> [f64; 2] {
        [(f.energy as f64 - self.mean[0]) / self.std[0], (f.rate as f64 - self.mean[1]) / self.std[1]]
    }
}

/// `(L_ce, L_mse)` from the auxiliary heads on `h_pre`.
pub fn multitask_losses<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    encoder: &StyleEncoder,
    h_pre: Var,
    factors: &[StyleFactors],
    stats: &RegressionStats,
) -> Result<(Var, Var)> {
    for f in factors {
        f.validate()?;
    }
    let (logits, reg) = encoder.aux_heads(tape, store, h_pre)?;
    let emotions: Vec<usize> = factors.iter().map(|f| f.emotion).collect();
    let ce = tape.cross_entropy(logits, &emotions)?;
    let targets: Vec<f64> = factors.iter().flat_map(|f| stats.targets(f)).collect();
    let t = tape.constant(Tensor::from_f64(&[factors.len(), 2], &targets)?);
    let mse = tape.mse(reg, t)?;
    Ok((ce, mse))
}

/// `L_con + lambda_c * L_ce + lambda_m * L_mse`.
pub fn style_total_loss<F: Float>(tape: &mut Tape<F>, con: Var, ce: Var, mse: Var, w: &StyleLossWeights) -> Result<Var> {
    if w.lambda_c < 0.0 || w.lambda_m < 0.0 {
        return Err(Error::invalid("style_total_loss", "weights must be non-negative"));
    }
    let a = tape.scale(ce, F::of(w.lambda_c))?;
    let b = tape.scale(mse, F::of(w.lambda_m))?;
    let s = tape.add(con, a)?;
    tape.add(s, b)
}

/// A trained (or initialized) encoder with its parameters.
#[derive(Clone, Debug)]
pub struct StyleModel {
    pub encoder: StyleEncoder,
    pub store: ParamStore<f32>,
    pub stats: RegressionStats,
}

const EMBED_CHUNK: usize = 64;

impl StyleModel {
    pub fn new(config: &StyleEncoderConfig, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = StyleEncoder::new(&mut store, config, channels, &mut rng);
        StyleModel { encoder, store, stats: RegressionStats { mean: [1.0, 1.0], std: [1.0, 1.0] } }
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.config.embed_dim
    }

    fn rows_of(t: &Tensor<f32>) -> Vec<Vec<f32>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    pub fn embed_audio(&self, frames: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(frames.len());
        let mut tape = Tape::new();
        for chunk in frames.chunks(EMBED_CHUNK) {
            tape.reset();
            let o = self.encoder.forward_audio(&mut tape, &self.store, chunk)?;
            out.extend(Self::rows_of(tape.value(o.h_a)));
        }
        Ok(out)
    }

    /// Pre-projection pooled features (used by the auxiliary heads).
    pub fn pooled_audio(&self, frames: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(frames.len());
        let mut tape = Tape::new();
        for chunk in frames.chunks(EMBED_CHUNK) {
            tape.reset();
            let o = self.encoder.forward_audio(&mut tape, &self.store, chunk)?;
            out.extend(Self::rows_of(tape.value(o.h_pre)));
        }
        Ok(out)
    }

    pub fn embed_text(&self, texts: &[StyleText]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        let mut tape = Tape::new();
        for chunk in texts.chunks(EMBED_CHUNK) {
            tape.reset();
            let refs: Vec<&StyleText> = chunk.iter().collect();
            let h = self.encoder.forward_text(&mut tape, &self.store, &refs)?;
            out.extend(Self::rows_of(tape.value(h)));
        }
        Ok(out)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Fraction of audio embeddings whose most similar text embedding is
/// their own pair (index-aligned).
pub fn retrieval_accuracy(model: &StyleModel, audio: &[&Tensor<f32>], texts: &[StyleText]) -> Result<f64> {
    if audio.len() != texts.len() || audio.is_empty() {
        return Err(Error::invalid("retrieval_accuracy", "need equally many non-empty audio and text candidates"));
    }
    let ha = model.embed_audio(audio)?;
    let ht = model.embed_text(texts)?;
    Ok(retrieval_from_embeddings(&ha, &ht))
}

pub fn retrieval_from_embeddings(ha: &[Vec<f32>], ht: &[Vec<f32>]) -> f64 {
    let mut hits = 0;
    for (i, a) in ha.iter().enumerate() {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, t) in ht.iter().enumerate() {
            let s = dot(a, t);
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        hits += (best == i) as usize;
    }
    hits as f64 / ha.len() as f64
}

/// Mean top-1 over `trials` fresh batches holding one utterance per
/// style combination, scored against the 45 full descriptors.
pub fn retrieval_eval(model: &StyleModel, world: &World, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts: Vec<StyleText> = StyleFactors::all().map(StyleText::from_factors).collect();
    let ht = model.embed_text(&texts)?;
    let mut total = 0.0;
    for _ in 0..trials {
        let utts: Vec<Utterance> = StyleFactors::all().map(|f| sample_utterance_with(world, f, &mut rng)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.frames).collect();
        let ha = model.embed_audio(&refs)?;
        total += retrieval_from_embeddings(&ha, &ht);
    }
    Ok(total / trials.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Held-out speaker accuracy of a fresh linear probe on `h_a`.
    pub speaker_acc: f64,
    /// Held-out emotion accuracy of a fresh linear probe on `h_a`.
    pub emotion_acc: f64,
    /// Mean embedding distance between an utterance and its timbre-perturbed copy.
    pub perturb_distance: f64,
}

/// Fit linear probes on `h_a` of fresh utterances and report what they
/// recover on held-out ones.
pub fn embedding_leakage(model: &StyleModel, world: &World, n_train: usize, n_test: usize, seed: u64) -> Result<LeakageReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utts: Vec<Utterance> = crate::world::fresh_utterances(world, n_train + n_test, &mut rng)?;
    let refs: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.frames).collect();
    let emb = model.embed_audio(&refs)?;
    let dim = model.embed_dim();
    let flat: Vec<f32> = emb[..n_train].concat();
    let fit = FitConfig { steps: 400, batch: usize::MAX, lr: 0.05 };
    let probe_acc = |labels: &dyn Fn(&Utterance) -> usize, classes: usize, rng: &mut ChaCha8Rng| -> Result<f64> {
        let y: Vec<usize> = utts[..n_train].iter().map(labels).collect();
        let clf = Classifier::fit(&flat, dim, &y, classes, None, &fit, rng)?;
        let hits = utts[n_train..].iter().zip(&emb[n_train..]).filter(|(u, e)| clf.predict(e) == labels(u)).count();
        Ok(hits as f64 / n_test.max(1) as f64)
    };
    let speaker_acc = probe_acc(&|u| u.speaker, world.num_speakers(), &mut rng)?;
    let emotion_acc = probe_acc(&|u| u.factors.emotion, NUM_EMOTIONS, &mut rng)?;
    let n_pert = n_test.min(200);
    let mut dist = 0.0;
    let pert: Vec<Utterance> = utts[n_train..n_train + n_pert].iter().map(|u| timbre_perturb(world, u, &mut rng)).collect::<Result<_>>()?;
    let prefs: Vec<&Tensor<f32>> = pert.iter().map(|u| &u.frames).collect();
    let pemb = model.embed_audio(&prefs)?;
    for (a, b) in emb[n_train..].iter().zip(&pemb) {
        dist += a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    }
    Ok(LeakageReport { speaker_acc, emotion_acc, perturb_distance: dist / n_pert.max(1) as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleTrainConfig {
    pub encoder: StyleEncoderConfig,
    pub weights: StyleLossWeights,
    pub n_utterances: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub perturb_prob: f64,
    pub descriptor_dropout: f64,
    pub eval_trials: usize,
    /// Lower clamp of the learned temperature, within `[TAU_MIN, TAU_MAX]`.
    pub tau_min: f64,
    /// Draw each batch from distinct style combinations instead of
    /// uniformly from the dataset.
    pub distinct_combos: bool,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        StyleTrainConfig {
            encoder: StyleEncoderConfig::default(),
            weights: StyleLossWeights::default(),
            n_utterances: 2000,
            steps: 1000,
            batch: 32,
            lr: 1e-3,
            warmup_frac: 0.05,
            clip: 1.0,
            perturb_prob: 0.5,
            descriptor_dropout: 0.2,
            eval_trials: 10,
            tau_min: 0.1,
            distinct_combos: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStepLog {
    pub step: usize,
    pub total: f64,
    pub con: f64,
    pub ce: f64,
    pub mse: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMetrics {
    pub history: Vec<StyleStepLog>,
    pub retrieval_top1: f64,
}

/// Train the encoder on `config.n_utterances` fresh pairs. Each step draws
/// a batch of distinct style combinations (so no in-batch false
/// negatives), re-renders each audio with another speaker with
/// probability `perturb_prob`, and drops energy/rate words with
/// probability `descriptor_dropout`.
pub fn train_style_encoder(world: &World, config: &StyleTrainConfig, seed: u64) -> Result<(StyleModel, StyleMetrics)> {
    let c = config;
    if c.n_utterances < 2000 {
        return Err(Error::invalid("train_style_encoder", format!("dataset of {} pairs < 2000", c.n_utterances)));
    }
    if c.batch < 2 || c.batch > NUM_STYLE_COMBOS {
        return Err(Error::invalid("train_style_encoder", format!("batch {} outside 2..=45", c.batch)));
    }
    if !(TAU_MIN..=TAU_MAX).contains(&c.tau_min) {
        return Err(Error::invalid("train_style_encoder", format!("tau_min {} outside [{TAU_MIN}, {TAU_MAX}]", c.tau_min)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Dataset::generate(world, c.n_utterances, rng.random())?;
    let mut model = StyleModel::new(&c.encoder, world.channels(), rng.random());
    let factors: Vec<StyleFactors> = data.utterances.iter().map(|u| u.factors).collect();
    model.stats = RegressionStats::fit(&factors);
    let mut by_combo: Vec<Vec<usize>> = vec![Vec::new(); NUM_STYLE_COMBOS];
    for (i, u) in data.utterances.iter().enumerate() {
        by_combo[u.factors.combo()].push(i);
    }
    let combos: Vec<usize> = (0..NUM_STYLE_COMBOS).filter(|&k| !by_combo[k].is_empty()).collect();
    let batch = c.batch.min(combos.len());
    let supervised = c.weights.lambda_c > 0.0 || c.weights.lambda_m > 0.0;

    let mut adam = AdamState::new(&model.store, AdamConfig::default());
    let mut history = Vec::with_capacity(c.steps);
    let mut tape = Tape::new();
    let mut order = combos.clone();
    for step in 0..c.steps {
        order.shuffle(&mut rng);
        let mut audio = Vec::with_capacity(batch);
        let mut texts = Vec::with_capacity(batch);
        let mut fs = Vec::with_capacity(batch);
        for &k in &order[..batch] {
            let i = if c.distinct_combos { *by_combo[k].choose(&mut rng).expect("non-empty combo") } else { rng.random_range(0..data.utterances.len()) };
            let u = &data.utterances[i];
            let frames = if rng.random::<f64>() < c.perturb_prob { timbre_perturb(world, u, &mut rng)?.frames } else { u.frames.clone() };
            audio.push(frames);
            texts.push(u.style_text().with_dropout(c.descriptor_dropout, &mut rng));
            fs.push(u.factors);
        }
        tape.reset();
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step, what: "style loss" },
            e => e,
        };
        let refs: Vec<&Tensor<f32>> = audio.iter().collect();
        let trefs: Vec<&StyleText> = texts.iter().collect();
        let out = model.encoder.forward_audio(&mut tape, &model.store, &refs).map_err(diverged)?;
        let h_t = model.encoder.forward_text(&mut tape, &model.store, &trefs).map_err(diverged)?;
        let tau = tape.param(&model.store, model.encoder.tau);
        let con = infonce_loss(&mut tape, out.h_a, h_t, tau).map_err(diverged)?;
        let (ce, mse) = if supervised {
            multitask_losses(&mut tape, &model.store, &model.encoder, out.h_pre, &fs, &model.stats).map_err(diverged)?
        } else {
            let z = tape.constant(Tensor::scalar(0.0));
            (z, z)
        };
        let total = style_total_loss(&mut tape, con, ce, mse, &c.weights).map_err(diverged)?;
        let log = StyleStepLog {
            step,
            total: tape.value(total).item() as f64,
            con: tape.value(con).item() as f64,
            ce: tape.value(ce).item() as f64,
            mse: tape.value(mse).item() as f64,
            tau: model.encoder.tau_value(&model.store),
        };
        if !log.total.is_finite() {
            return Err(Error::Diverged { step, what: "style loss" });
        }
        tape.backward(total)?;
        tape.write_param_grads(&mut model.store);
        if c.clip > 0.0 {
            clip_grad_norm(&mut model.store, c.clip);
        }
        adam.step(&mut model.store, warmup_lr(step, c.steps, c.warmup_frac, c.lr)).map_err(|_| Error::Diverged { step, what: "style gradient" })?;
        model.encoder.clamp_tau(&mut model.store, c.tau_min);
        if step % 100 == 0 {
            log::info!("style step {step}: total {:.4} con {:.4} ce {:.4} mse {:.4} tau {:.4}", log.total, log.con, log.ce, log.mse, log.tau);
        }
        history.push(log);
    }
    let retrieval_top1 = retrieval_eval(&model, world, c.eval_trials, rng.random())?;
    log::info!("style retrieval top-1 {retrieval_top1:.4}");
    Ok((model, StyleMetrics { history, retrieval_top1 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::jitter_all;
    use crate::tensor::param_gradient_check;
    use crate::world::{make_world, WorldConfig};

    fn orthonormal4() -> Tensor<f64> {
        let mut d = vec![0.0; 16];
        for i in 0..4 {
            d[i * 4 + i] = 1.0;
        }
        Tensor::from_vec(4, 4, d).unwrap()
    }

    fn infonce_value(a: Tensor<f64>, t: Tensor<f64>, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(a);
        let t = tape.constant(t);
        let tau = tape.constant(Tensor::scalar(tau));
        let l = infonce_loss(&mut tape, a, t, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn infonce_closed_forms() {
        let e = std::f64::consts::E;
        let v = infonce_value(orthonormal4(), orthonormal4(), 1.0);
        assert!((v - -(e / (e + 3.0)).ln()).abs() < 1e-12);
        assert!((v - 0.7437).abs() < 1e-4);
        let same = Tensor::from_vec(4, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
        let v = infonce_value(same.clone(), same, 0.3);
        assert!((v - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn infonce_decreases_with_temperature_on_perfect_pairs() {
        let vals: Vec<f64> = [1.0, 0.5, 0.1].iter().map(|&t| infonce_value(orthonormal4(), orthonormal4(), t)).collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn infonce_needs_negatives() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let tau = tape.constant(Tensor::scalar(1.0));
        assert!(infonce_loss(&mut tape, a, a, tau).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let [a, b, c] = [0.7, 1.6, 1.0].map(|v| tape.constant(Tensor::scalar(v)));
        let l = style_total_loss(&mut tape, a, b, c, &StyleLossWeights::default()).unwrap();
        assert!((tape.value(l).item() - 3.3).abs() < 1e-12);
        let l = style_total_loss(&mut tape, a, b, c, &StyleLossWeights { lambda_c: 0.0, lambda_m: 0.0 }).unwrap();
        assert_eq!(tape.value(l).item(), 0.7);
        assert!(style_total_loss(&mut tape, a, b, c, &StyleLossWeights { lambda_c: -1.0, lambda_m: 0.0 }).is_err());
    }

    fn tiny() -> StyleEncoderConfig {
        StyleEncoderConfig { width: 8, heads: 2, mlp_hidden: 12, audio_blocks: 1, text_blocks: 1, embed_dim: 6, head_hidden: 8, max_frames: 16 }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let w = make_world(0, &WorldConfig::default()).unwrap();
        let m = StyleModel::new(&StyleEncoderConfig::default(), 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let utts = crate::world::fresh_utterances(&w, 5, &mut rng).unwrap();
        let refs: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.frames).collect();
        let a = m.embed_audio(&refs).unwrap();
        let b = m.embed_audio(&refs).unwrap();
        assert_eq!(a, b);
        for e in &a {
            assert!((dot(e, e).sqrt() - 1.0).abs() < 1e-5);
        }
        let texts: Vec<StyleText> = utts.iter().map(|u| u.style_text()).collect();
        for e in m.embed_text(&texts).unwrap() {
            assert!((dot(&e, &e).sqrt() - 1.0).abs() < 1e-5);
        }
        assert!(m.embed_text(&[StyleText { tokens: vec![11] }]).is_err());
        assert!(m.embed_audio(&[&Tensor::zeros(&[0, 16])]).is_err());
    }

    #[test]
    fn cross_entropy_at_init_is_near_ln5() {
        let w = make_world(0, &WorldConfig::default()).unwrap();
        let m = StyleModel::new(&StyleEncoderConfig::default(), 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let utts = crate::world::fresh_utterances(&w, 32, &mut rng).unwrap();
        let refs: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.frames).collect();
        let fs: Vec<StyleFactors> = utts.iter().map(|u| u.factors).collect();
        let mut tape = Tape::new();
        let out = m.encoder.forward_audio(&mut tape, &m.store, &refs).unwrap();
        let stats = RegressionStats::fit(&fs);
        let (ce, _) = multitask_losses(&mut tape, &m.store, &m.encoder, out.h_pre, &fs, &stats).unwrap();
        assert!((tape.value(ce).item() as f64 - 5f64.ln()).abs() <= 0.3);
    }

    #[test]
    fn standardized_targets_have_zero_mean() {
        let fs: Vec<StyleFactors> = StyleFactors::all().collect();
        let s = RegressionStats::fit(&fs);
        let sum: [f64; 2] = fs.iter().map(|f| s.targets(f)).fold([0.0, 0.0], |a, t| [a[0] + t[0], a[1] + t[1]]);
        assert!(sum[0].abs() < 1e-9 && sum[1].abs() < 1e-9);
    }

    #[test]
    fn style_loss_gradients_check_out() {
        let w = make_world(0, &WorldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let enc = StyleEncoder::new(&mut store, &tiny(), 16, &mut rng);
        jitter_all(&mut store, 0.1, &mut rng);
        store.set(enc.tau, Tensor::scalar(0.5)).unwrap();
        let utts: Vec<Utterance> = (0..4)
            .map(|i| {
                let mut u = sample_utterance_with(&w, StyleFactors::from_combo(i * 7), &mut rng).unwrap();
                u.frames = Tensor::from_vec(4, 16, u.frames.data()[..64].to_vec()).unwrap();
                u
            })
            .collect();
        let fs: Vec<StyleFactors> = utts.iter().map(|u| u.factors).collect();
        let texts: Vec<StyleText> = utts.iter().map(|u| u.style_text()).collect();
        let stats = RegressionStats::fit(&fs);
        let report = param_gradient_check(
            &store,
            |tp, st| {
                let refs: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.frames).collect();
                let trefs: Vec<&StyleText> = texts.iter().collect();
                let out = enc.forward_audio(tp, st, &refs)?;
                let h_t = enc.forward_text(tp, st, &trefs)?;
                let tau = tp.param(st, enc.tau);
                let con = infonce_loss(tp, out.h_a, h_t, tau)?;
                let (ce, mse) = multitask_losses(tp, st, &enc, out.h_pre, &fs, &stats)?;
                style_total_loss(tp, con, ce, mse, &StyleLossWeights::default())
            },
            1e-3,
            6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
