//! Conditional velocity network: content encoder, reference speaker
//! encoder, duration predictor and a DiT backbone with adaptive layer-norm
//! conditioning on timestep, speaker and style.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{add_positions, modulate, normal_tensor, timestep_features, Conv1d, Embedding, Init, Linear, Mlp, SelfAttention, TransformerBlock, LN_EPS};
use crate::tensor::{Float, ParamId, ParamStore, Segments, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsConfig {
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub text_blocks: usize,
    pub speaker_blocks: usize,
    pub dit_blocks: usize,
    /// Zero-based index of the DiT block whose output feeds REPA.
    pub student_block: usize,
    pub speaker_dim: usize,
    pub style_dim: usize,
    pub time_dim: usize,
    pub dur_hidden: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
}

impl Default for TtsConfig {
    fn default() -> Self {
        TtsConfig {
            width: 64,
            heads: 4,
            mlp_hidden: 128,
            text_blocks: 2,
            speaker_blocks: 2,
            dit_blocks: 4,
            student_block: 1,
            speaker_dim: 32,
            style_dim: 32,
            time_dim: 64,
            dur_hidden: 64,
            max_frames: 128,
            max_tokens: 32,
        }
    }
}

/// Which conditions are present for one item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionSet {
    pub text: bool,
    pub spk: bool,
    pub style: bool,
}

impl ConditionSet {
    pub const ALL: ConditionSet = ConditionSet { text: true, spk: true, style: true };
    pub const NONE: ConditionSet = ConditionSet { text: false, spk: false, style: false };
    pub const TEXT: ConditionSet = ConditionSet { text: true, spk: false, style: false };
    pub const TEXT_SPK: ConditionSet = ConditionSet { text: true, spk: true, style: false };
}

#[derive(Clone, Debug)]
struct DitBlock {
    attn: SelfAttention,
    mlp: Mlp,
    ada: Linear,
}

#[derive(Clone, Debug)]
pub struct TtsModel {
    pub config: TtsConfig,
    pub vocab: usize,
    pub channels: usize,
    pub teacher_dim: usize,
    tok_emb: Embedding,
    tok_pos: Embedding,
    text_blocks: Vec<TransformerBlock>,
    spk_in: Linear,
    spk_pos: Embedding,
    spk_blocks: Vec<TransformerBlock>,
    spk_proj: Linear,
    dur_conv1: Conv1d,
    dur_conv2: Conv1d,
    dur_out: Mlp,
    dit_in: Linear,
    dit_pos: Embedding,
    time_mlp: Mlp,
    spk_cond: Linear,
    style_cond: Linear,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    final_out: Linear,
    pub repa_proj: Linear,
    pub null_content: ParamId,
    pub null_spk: ParamId,
    pub null_style: ParamId,
    /// Style row of the duration predictor when style is absent.
    pub dur_null_style: ParamId,
}

/// Per-item inputs to one batched DiT evaluation. Rows of `z_t` and
/// `content` are packed by `segs`; `spk` and `style` have one row per item.
pub struct DitInput<'a> {
    pub z_t: Var,
    pub times: &'a [f64],
    pub segs: &'a Segments,
    pub content: Var,
    pub spk: Var,
    pub style: Var,
    pub conds: &'a [ConditionSet],
}

#[derive(Clone, Copy, Debug)]
pub struct DitOutput {
    pub velocity: Var,
    /// Output of the student block, `[sum T, width]`.
    pub student: Var,
}

impl TtsModel {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, config: &TtsConfig, vocab: usize, channels: usize, teacher_dim: usize, rng: &mut R) -> Self {
        let c = config;
        let w = c.width;
        assert!(c.student_block < c.dit_blocks, "student block must be inside the DiT");
        let tblocks = |store: &mut ParamStore<F>, rng: &mut R, prefix: &str, n: usize| {
            (0..n).map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), w, c.heads, c.mlp_hidden, rng)).collect::<Vec<_>>()
        };
        let tok_emb = Embedding::new(store, "tts.text.emb", vocab, w, 1.0, rng);
        let tok_pos = Embedding::new(store, "tts.text.pos", c.max_tokens, w, 0.02, rng);
        let text_blocks = tblocks(store, rng, "tts.text", c.text_blocks);
        let spk_in = Linear::new(store, "tts.spk.in", channels, w, true, Init::Fan, rng);
        let spk_pos = Embedding::new(store, "tts.spk.pos", c.max_frames, w, 0.02, rng);
        let spk_blocks = tblocks(store, rng, "tts.spk", c.speaker_blocks);
        let spk_proj = Linear::new(store, "tts.spk.proj", w, c.speaker_dim, true, Init::Fan, rng);
        let dur_conv1 = Conv1d::new(store, "tts.dur.conv1", w + c.style_dim, c.dur_hidden, rng);
        let dur_conv2 = Conv1d::new(store, "tts.dur.conv2", c.dur_hidden, c.dur_hidden, rng);
        let dur_out = Mlp::new(store, "tts.dur.out", (c.dur_hidden, c.dur_hidden, 1), Init::Fan, rng);
        let dit_in = Linear::new(store, "tts.dit.in", channels + w, w, true, Init::Fan, rng);
        let dit_pos = Embedding::new(store, "tts.dit.pos", c.max_frames, w, 0.02, rng);
        let time_mlp = Mlp::new(store, "tts.dit.time", (c.time_dim, w, w), Init::Fan, rng);
        let spk_cond = Linear::new(store, "tts.dit.spk_cond", c.speaker_dim, w, true, Init::Fan, rng);
        let style_cond = Linear::new(store, "tts.dit.style_cond", c.style_dim, w, true, Init::Fan, rng);
        let blocks = (0..c.dit_blocks)
            .map(|i| DitBlock {
                attn: SelfAttention::new(store, &format!("tts.dit.block{i}.attn"), w, c.heads, rng),
                mlp: Mlp::new(store, &format!("tts.dit.block{i}.mlp"), (w, c.mlp_hidden, w), Init::Fan, rng),
                ada: Linear::new(store, &format!("tts.dit.block{i}.ada"), w, 6 * w, true, Init::Zero, rng),
            })
            .collect();
        let final_ada = Linear::new(store, "tts.dit.final_ada", w, 2 * w, true, Init::Zero, rng);
        let final_out = Linear::new(store, "tts.dit.final_out", w, channels, true, Init::Zero, rng);
        let repa_proj = Linear::new(store, "tts.repa.proj", w, teacher_dim, true, Init::Fan, rng);
        let null_content = store.add("tts.null.content", normal_tensor(&[1, w], 1.0, rng));
        let null_spk = store.add("tts.null.spk", normal_tensor(&[1, c.speaker_dim], 1.0, rng));
        let null_style = store.add("tts.null.style", normal_tensor(&[1, c.style_dim], 1.0, rng));
        let dur_null_style = store.add("tts.dur.null_style", normal_tensor(&[1, c.style_dim], 1.0, rng));
        TtsModel {
            config: c.clone(),
            vocab,
            channels,
            teacher_dim,
            tok_emb,
            tok_pos,
            text_blocks,
            spk_in,
            spk_pos,
            spk_blocks,
            spk_proj,
            dur_conv1,
            dur_conv2,
            dur_out,
            dit_in,
            dit_pos,
            time_mlp,
            spk_cond,
            style_cond,
            blocks,
            final_ada,
            final_out,
            repa_proj,
            null_content,
            null_spk,
            null_style,
            dur_null_style,
        }
    }

    /// Per-token features `[sum L, width]` for a batch of token sequences.
    pub fn encode_content<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, tokens: &[&[usize]]) -> Result<(Var, Segments)> {
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(tokens.len());
        for t in tokens {
            if t.is_empty() {
                return Err(Error::invalid("encode_content", "empty token list"));
            }
            if let Some(&bad) = t.iter().find(|&&x| x >= self.vocab) {
                return Err(Error::invalid("encode_content", format!("token {bad} >= vocab {}", self.vocab)));
            }
            ids.extend_from_slice(t);
            lengths.push(t.len());
        }
        let segs = Segments::from_lengths(&lengths);
        let mut h = self.tok_emb.forward(tape, store, &ids)?;
        h = add_positions(tape, store, &self.tok_pos, h, &segs)?;
        for b in &self.text_blocks {
            h = b.forward(tape, store, h, &segs)?;
        }
        Ok((tape.layer_norm(h, LN_EPS)?, segs))
    }

    /// Speaker embeddings `[B, speaker_dim]` from standardized reference frames.
    pub fn encode_speaker<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, refs: &[&Tensor<f32>]) -> Result<Var> {
        let mut rows = Vec::new();
        let mut lengths = Vec::with_capacity(refs.len());
        for r in refs {
            if r.rows() == 0 {
                return Err(Error::invalid("encode_speaker", "empty reference"));
            }
            if r.cols() != self.channels {
                return Err(Error::Shape { op: "encode_speaker", lhs: r.shape().to_vec(), rhs: vec![r.rows(), self.channels] });
            }
            rows.extend(r.data().iter().map(|&x| F::of(x as f64)));
            lengths.push(r.rows());
        }
        let segs = Segments::from_lengths(&lengths);
        let x = tape.constant(Tensor::from_vec(segs.total_rows(), self.channels, rows)?);
        let mut h = self.spk_in.forward(tape, store, x)?;
        h = add_positions(tape, store, &self.spk_pos, h, &segs)?;
        for b in &self.spk_blocks {
            h = b.forward(tape, store, h, &segs)?;
        }
        h = tape.layer_norm(h, LN_EPS)?;
        let pooled = tape.segment_mean(h, &segs)?;
        self.spk_proj.forward(tape, store, pooled)
    }

    /// Select each item's row of `real` (`[B, D]`) or the null row.
    fn select_or_null<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, real: Var, null: ParamId, present: impl Iterator<Item = bool>) -> Result<Var> {
        let b = tape.value(real).rows();
        let n = tape.param(store, null);
        let both = tape.concat_rows(&[real, n])?;
        let idx: Vec<usize> = present.enumerate().map(|(i, p)| if p { i } else { b }).collect();
        tape.gather(both, &idx)
    }

    /// Log-duration per token from detached token features and the
    /// detached style embedding (the predictor's own null row when style
    /// is absent). Gradients reach only the predictor's parameters.
    pub fn predict_durations<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        token_feats: Var,
        token_segs: &Segments,
        style: Var,
        style_present: &[bool],
    ) -> Result<Var> {
        let feats = tape.detach(token_feats);
        let style = tape.detach(style);
        let sel = self.select_or_null(tape, store, style, self.dur_null_style, style_present.iter().copied())?;
        let owner = token_segs.row_owner();
        let per_token = tape.gather(sel, &owner)?;
        let x = tape.concat_cols(&[feats, per_token])?;
        let h = self.dur_conv1.forward(tape, store, x, token_segs)?;
        let h = tape.gelu(h)?;
        let h = self.dur_conv2.forward(tape, store, h, token_segs)?;
        let h = tape.gelu(h)?;
        self.dur_out.forward(tape, store, h)
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, inp: &DitInput) -> Result<DitOutput> {
        let segs = inp.segs;
        let b = segs.len();
        let n = segs.total_rows();
        if inp.times.len() != b || inp.conds.len() != b {
            return Err(Error::invalid("dit_forward", format!("{b} segments but {} times and {} condition sets", inp.times.len(), inp.conds.len())));
        }
        if let Some(t) = inp.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid("dit_forward", format!("t = {t} outside [0, 1]")));
        }
        if tape.value(inp.z_t).rows() != n {
            return Err(Error::Shape { op: "dit_forward", lhs: tape.shape(inp.z_t).to_vec(), rhs: vec![n, self.channels] });
        }
        if tape.value(inp.content).rows() != n {
            return Err(Error::Shape { op: "dit_forward", lhs: tape.shape(inp.content).to_vec(), rhs: vec![n, self.config.width] });
        }
        let w = self.config.width;

        // content or the learned null row, frame by frame
        let null_c = tape.param(store, self.null_content);
        let both = tape.concat_rows(&[inp.content, null_c])?;
        let owner = segs.row_owner();
        let cidx: Vec<usize> = (0..n).map(|r| if inp.conds[owner[r]].text { r } else { n }).collect();
        let content = tape.gather(both, &cidx)?;

        let x = tape.concat_cols(&[inp.z_t, content])?;
        let mut h = self.dit_in.forward(tape, store, x)?;
        h = add_positions(tape, store, &self.dit_pos, h, segs)?;

        let tf = tape.constant(timestep_features::<F>(inp.times, self.config.time_dim));
        let temb = self.time_mlp.forward(tape, store, tf)?;
        let spk = self.select_or_null(tape, store, inp.spk, self.null_spk, inp.conds.iter().map(|c| c.spk))?;
        let spk = self.spk_cond.forward(tape, store, spk)?;
        let style = self.select_or_null(tape, store, inp.style, self.null_style, inp.conds.iter().map(|c| c.style))?;
        let style = self.style_cond.forward(tape, store, style)?;
        let cvec = tape.add(temb, spk)?;
        let cvec = tape.add(cvec, style)?;
        let cact = tape.silu(cvec)?;

        let mut student = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let m = blk.ada.forward(tape, store, cact)?;
            let m = tape.gather(m, &owner)?;
            let part = |tape: &mut Tape<F>, k: usize| tape.slice_cols(m, k * w, w);
            let (sh1, sc1, g1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
            let (sh2, sc2, g2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);
            let a = modulate(tape, h, sh1, sc1)?;
            let a = blk.attn.forward(tape, store, a, segs)?;
            let a = tape.mul(a, g1)?;
            h = tape.add(h, a)?;
            let f = modulate(tape, h, sh2, sc2)?;
            let f = blk.mlp.forward(tape, store, f)?;
            let f = tape.mul(f, g2)?;
            h = tape.add(h, f)?;
            if i == self.config.student_block {
                student = Some(h);
            }
        }
        let m = self.final_ada.forward(tape, store, cact)?;
        let m = tape.gather(m, &owner)?;
        let sh = tape.slice_cols(m, 0, w)?;
        let sc = tape.slice_cols(m, w, w)?;
        let o = modulate(tape, h, sh, sc)?;
        let velocity = self.final_out.forward(tape, store, o)?;
        Ok(DitOutput { velocity, student: student.expect("student block inside the DiT") })
    }
}

/// Rounded, clamped durations from predicted log-durations.
pub fn round_durations(log_durs: &[f64]) -> Vec<usize> {
    log_durs
        .iter()
        .map(|&l| {
            let d = l.exp().round();
            if d < 1.0 || !d.is_finite() {
                log::warn!("predicted duration {d} clamped to 1");
                1
            } else {
                d as usize
            }
        })
        .collect()
}

/// Repeat token `i`'s feature row `durations[i]` times. Zero durations are
/// clamped to one. Returns the regulated features and per-item frame
/// segments.
pub fn length_regulate<F: Float>(tape: &mut Tape<F>, token_feats: Var, token_segs: &Segments, durations: &[usize]) -> Result<(Var, Segments)> {
    if durations.len() != token_segs.total_rows() {
        return Err(Error::Shape { op: "length_regulate", lhs: tape.shape(token_feats).to_vec(), rhs: vec![durations.len()] });
    }
    let mut idx = Vec::new();
    let mut lengths = Vec::with_capacity(token_segs.len());
    for (start, len) in token_segs.iter() {
        let mut total = 0;
        for (r, &d) in durations.iter().enumerate().skip(start).take(len) {
            let d = if d == 0 {
                log::warn!("length_regulate: zero duration clamped to 1");
                1
            } else {
                d
            };
            idx.extend(std::iter::repeat_n(r, d));
            total += d;
        }
        lengths.push(total);
    }
    Ok((tape.gather(token_feats, &idx)?, Segments::from_lengths(&lengths)))
}

/// A model definition together with its parameter values.
#[derive(Clone, Debug)]
pub struct TtsBundle {
    pub model: TtsModel,
    pub store: ParamStore<f32>,
}

impl TtsBundle {
    pub fn new(config: &TtsConfig, vocab: usize, channels: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = TtsModel::new(&mut store, config, vocab, channels, teacher_dim, &mut rng);
        TtsBundle { model, store }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::jitter_all;

    pub(crate) fn tiny() -> TtsConfig {
        TtsConfig {
            width: 8,
            heads: 2,
            mlp_hidden: 12,
            text_blocks: 1,
            speaker_blocks: 1,
            dit_blocks: 2,
            student_block: 0,
            speaker_dim: 4,
            style_dim: 4,
            time_dim: 6,
            dur_hidden: 6,
            max_frames: 16,
            max_tokens: 8,
        }
    }

    fn run_dit(store: &ParamStore<f64>, m: &TtsModel, conds: &[ConditionSet]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let (tok, tsegs) = m.encode_content(&mut tape, store, &[&[1, 2], &[3]]).unwrap();
        let (content, segs) = length_regulate(&mut tape, tok, &tsegs, &[2, 1, 3]).unwrap();
        let z = tape.constant(normal_tensor(&[6, 5], 1.0, &mut rng));
        let spk = tape.constant(normal_tensor(&[2, 4], 1.0, &mut rng));
        let style = tape.constant(normal_tensor(&[2, 4], 1.0, &mut rng));
        let out = m.forward(&mut tape, store, &DitInput { z_t: z, times: &[0.3, 0.8], segs: &segs, content, spk, style, conds }).unwrap();
        tape.value(out.velocity).data().to_vec()
    }

    #[test]
    fn dit_shapes_nulls_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let m = TtsModel::new(&mut store, &tiny(), 5, 5, 7, &mut rng);
        jitter_all(&mut store, 0.2, &mut rng);
        let all = run_dit(&store, &m, &[ConditionSet::ALL; 2]);
        assert_eq!(all.len(), 30);
        assert_eq!(all, run_dit(&store, &m, &[ConditionSet::ALL; 2]));
        let no_spk = run_dit(&store, &m, &[ConditionSet { spk: false, ..ConditionSet::ALL }; 2]);
        assert_ne!(all, no_spk);
        let none = run_dit(&store, &m, &[ConditionSet::NONE; 2]);
        assert_ne!(all, none);
        // items do not see each other: changing item 1's conditions leaves item 0 alone
        let mixed = run_dit(&store, &m, &[ConditionSet::ALL, ConditionSet::NONE]);
        assert_eq!(&mixed[..15], &all[..15]);
        assert_eq!(&mixed[15..], &none[15..]);
    }

    #[test]
    fn dit_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let m = TtsModel::new(&mut store, &tiny(), 5, 5, 7, &mut rng);
        let mut tape = Tape::new();
        let segs = Segments::from_lengths(&[3]);
        let z = tape.constant(Tensor::zeros(&[3, 5]));
        let short = tape.constant(Tensor::zeros(&[2, 8]));
        let sv = tape.constant(Tensor::zeros(&[1, 4]));
        let inp = DitInput { z_t: z, times: &[0.5], segs: &segs, content: short, spk: sv, style: sv, conds: &[ConditionSet::ALL] };
        assert!(m.forward(&mut tape, &store, &inp).is_err());
        let content = tape.constant(Tensor::zeros(&[3, 8]));
        let inp = DitInput { z_t: z, times: &[1.5], segs: &segs, content, spk: sv, style: sv, conds: &[ConditionSet::ALL] };
        assert!(m.forward(&mut tape, &store, &inp).is_err());
        assert!(m.encode_content(&mut tape, &store, &[&[]]).is_err());
        assert!(m.encode_speaker(&mut tape, &store, &[&Tensor::zeros(&[0, 5])]).is_err());
    }

    #[test]
    fn content_encoder_is_contextual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let m = TtsModel::new(&mut store, &tiny(), 5, 5, 7, &mut rng);
        let mut tape = Tape::new();
        let (a, _) = m.encode_content(&mut tape, &store, &[&[1, 2, 3]]).unwrap();
        let (b, _) = m.encode_content(&mut tape, &store, &[&[3, 2, 1]]).unwrap();
        let (c, _) = m.encode_content(&mut tape, &store, &[&[1, 2, 3]]).unwrap();
        assert_eq!(tape.shape(a), &[3, 8]);
        assert_ne!(tape.value(a), tape.value(b));
        assert_eq!(tape.value(a), tape.value(c));
    }

    #[test]
    fn length_regulation() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_f64(&[2, 1], &[10.0, 20.0]).unwrap());
        let segs = Segments::from_lengths(&[2]);
        let (y, fs) = length_regulate(&mut tape, f, &segs, &[2, 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 10.0, 20.0, 20.0, 20.0]);
        assert_eq!(fs.lengths(), vec![5]);
        let (y, _) = length_regulate(&mut tape, f, &segs, &[1, 1]).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0]);
        let (y, fs) = length_regulate(&mut tape, f, &segs, &[0, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, 20.0]);
        assert_eq!(fs.total_rows(), 3);
        assert_eq!(round_durations(&[4f64.ln(), -3.0, 2.4f64.ln()]), vec![4, 1, 2]);
    }

    #[test]
    fn duration_predictor_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let m = TtsModel::new(&mut store, &tiny(), 5, 5, 7, &mut rng);
        let mut tape = Tape::new();
        let (tok, segs) = m.encode_content(&mut tape, &store, &[&[1, 2, 4], &[0]]).unwrap();
        let style = tape.constant(Tensor::zeros(&[2, 4]));
        let d = m.predict_durations(&mut tape, &store, tok, &segs, style, &[true, false]).unwrap();
        assert_eq!(tape.shape(d), &[4, 1]);
    }
}
