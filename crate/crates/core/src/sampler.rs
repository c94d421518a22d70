//! Euler integration from noise (t = 0) to data (t = 1) with chained
//! classifier-free guidance over text, speaker and style.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::style::StyleModel;
use crate::tensor::{Segments, Tape, Tensor};
use crate::training::Normalizer;
use crate::tts::{length_regulate, round_durations, ConditionSet, DitInput, TtsBundle};
use crate::world::StyleText;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceScales {
    pub s_text: f64,
    pub s_spk: f64,
    pub s_style: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        GuidanceScales { s_text: 2.0, s_spk: 2.0, s_style: 2.0 }
    }
}

impl GuidanceScales {
    pub fn new(s_text: f64, s_spk: f64, s_style: f64) -> Self {
        GuidanceScales { s_text, s_spk, s_style }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("s_text", self.s_text), ("s_spk", self.s_spk), ("s_style", self.s_style)] {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::invalid("guidance", format!("{name} = {s} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 32, seed: 0 }
    }
}

/// The four branches in evaluation order: none, text, text+speaker, all.
pub const BRANCHES: [ConditionSet; 4] = [ConditionSet::NONE, ConditionSet::TEXT, ConditionSet::TEXT_SPK, ConditionSet::ALL];

/// `v(none) + s_text (v(text) - v(none)) + s_spk (v(text,spk) - v(text))
/// + s_style (v(all) - v(text,spk))`, elementwise. Accumulates in f64 so
/// unit scales return `v(all)` bit for bit.
pub fn chained_cfg_combine(v_none: &[f32], v_text: &[f32], v_text_spk: &[f32], v_all: &[f32], s: &GuidanceScales) -> Vec<f32> {
    let (a, b, c) = (s.s_text, s.s_spk, s.s_style);
    v_none
        .iter()
        .zip(v_text)
        .zip(v_text_spk)
        .zip(v_all)
        .map(|(((&n, &t), &ts), &al)| {
            let (n, t, ts, al) = (n as f64, t as f64, ts as f64, al as f64);
            (n + a * (t - n) + b * (ts - t) + c * (al - ts)) as f32
        })
        .collect()
}

/// A velocity field over a batch of packed sequences.
pub trait VelocityField {
    /// `z` is `[sum T, D]` packed by the field's own segmentation.
    fn velocity(&mut self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>>;
}

/// Uniform-step Euler from `z` at t = 0 to t = 1.
pub fn euler_integrate<V: VelocityField + ?Sized>(field: &mut V, mut z: Tensor<f32>, steps: usize) -> Result<Tensor<f32>> {
    if steps == 0 {
        return Err(Error::invalid("euler_integrate", "steps must be at least 1"));
    }
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 * h;
        let v = field.velocity(&z, t)?;
        let hf = h as f32;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += hf * vi;
        }
        if !z.all_finite() {
            return Err(Error::Diverged { step: k, what: "sampler state" });
        }
    }
    Ok(z)
}

/// The velocity `(a - z) / (1 - t)` of a dataset holding the single point `a`.
pub struct SinglePointField {
    pub target: Tensor<f32>,
}

impl VelocityField for SinglePointField {
    fn velocity(&mut self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
        let inv = 1.0 / (1.0 - t);
        let data = self.target.data().iter().zip(z.data()).map(|(&a, &x)| ((a as f64 - x as f64) * inv) as f32).collect();
        Tensor::new(z.shape(), data)
    }
}

/// Conditioning for a batch of items, already encoded.
pub struct GuidedField<'a> {
    pub tts: &'a TtsBundle,
    /// Frame-aligned content features `[sum T, width]`.
    pub content: Tensor<f32>,
    pub segs: Segments,
    /// `[B, speaker_dim]`
    pub spk: Tensor<f32>,
    /// `[B, style_dim]`
    pub style: Tensor<f32>,
    pub scales: GuidanceScales,
    /// Branch evaluations performed so far, summed over items.
    pub evaluations: usize,
}

impl GuidedField<'_> {
    /// Velocity of every branch in one batched forward: returns the four
    /// `[sum T, D]` outputs in `BRANCHES` order.
    pub fn branch_velocities(&mut self, z: &Tensor<f32>, t: f64) -> Result<[Vec<f32>; 4]> {
        let b = self.segs.len();
        let n = self.segs.total_rows();
        let d = z.cols();
        let lengths = self.segs.lengths();
        let mut rep_lengths = Vec::with_capacity(4 * b);
        let mut conds = Vec::with_capacity(4 * b);
        let mut item_idx = Vec::with_capacity(4 * b);
        let mut row_idx = Vec::with_capacity(4 * n);
        for br in BRANCHES {
            for (i, (start, len)) in self.segs.iter().enumerate() {
                rep_lengths.push(lengths[i]);
                conds.push(br);
                item_idx.push(i);
                row_idx.extend(start..start + len);
            }
        }
        let rep_segs = Segments::from_lengths(&rep_lengths);
        let mut tape = Tape::<f32>::new();
        let zv = tape.constant(z.clone());
        let zv = tape.gather(zv, &row_idx)?;
        let cv = tape.constant(self.content.clone());
        let cv = tape.gather(cv, &row_idx)?;
        let sv = tape.constant(self.spk.clone());
        let sv = tape.gather(sv, &item_idx)?;
        let stv = tape.constant(self.style.clone());
        let stv = tape.gather(stv, &item_idx)?;
        let times = vec![t; 4 * b];
        let inp = DitInput { z_t: zv, times: &times, segs: &rep_segs, content: cv, spk: sv, style: stv, conds: &conds };
        let out = self.tts.model.forward(&mut tape, &self.tts.store, &inp)?;
        self.evaluations += 4 * b;
        let v = tape.value(out.velocity).data();
        Ok([v[..n * d].to_vec(), v[n * d..2 * n * d].to_vec(), v[2 * n * d..3 * n * d].to_vec(), v[3 * n * d..].to_vec()])
    }
}

impl VelocityField for GuidedField<'_> {
    fn velocity(&mut self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
        let [none, text, text_spk, all] = self.branch_velocities(z, t)?;
        Tensor::new(z.shape(), chained_cfg_combine(&none, &text, &text_spk, &all, &self.scales))
    }
}

/// Style prompt from exactly one modality.
#[derive(Clone, Debug)]
pub enum StylePrompt<'a> {
    Audio(&'a Tensor<f32>),
    Text(&'a StyleText),
}

/// One synthesis request.
#[derive(Clone, Debug)]
pub struct InferItem<'a> {
    pub content: &'a [usize],
    /// Speaker reference in world scale.
    pub speaker_ref: &'a Tensor<f32>,
    pub style: StylePrompt<'a>,
    /// Seed of this item's initial noise.
    pub seed: u64,
}

/// Everything inference needs: the velocity model, latent standardization
/// and the frozen style encoder.
pub struct Synthesizer<'a> {
    pub tts: &'a TtsBundle,
    pub norm: &'a Normalizer,
    pub style: &'a StyleModel,
}

/// Items per batched forward during inference.
const INFER_CHUNK: usize = 24;

impl Synthesizer<'_> {
    /// Style embeddings `[B, style_dim]`, each from its prompt's branch.
    pub fn style_embeddings(&self, items: &[InferItem]) -> Result<Vec<Vec<f32>>> {
        let mut out = vec![Vec::new(); items.len()];
        let audio: Vec<(usize, &Tensor<f32>)> =
            items.iter().enumerate().filter_map(|(i, it)| if let StylePrompt::Audio(f) = it.style { Some((i, f)) } else { None }).collect();
        let text: Vec<(usize, StyleText)> =
            items.iter().enumerate().filter_map(|(i, it)| if let StylePrompt::Text(t) = it.style { Some((i, t.clone())) } else { None }).collect();
        if !audio.is_empty() {
            let refs: Vec<&Tensor<f32>> = audio.iter().map(|a| a.1).collect();
            for ((i, _), e) in audio.iter().zip(self.style.embed_audio(&refs)?) {
                out[*i] = e;
            }
        }
        if !text.is_empty() {
            let ts: Vec<StyleText> = text.iter().map(|t| t.1.clone()).collect();
            for ((i, _), e) in text.iter().zip(self.style.embed_text(&ts)?) {
                out[*i] = e;
            }
        }
        Ok(out)
    }

    /// Predicted integer durations per item.
    pub fn durations(&self, items: &[InferItem], style: &[Vec<f32>]) -> Result<Vec<Vec<usize>>> {
        let m = &self.tts.model;
        let mut tape = Tape::<f32>::new();
        let toks: Vec<&[usize]> = items.iter().map(|i| i.content).collect();
        let (feats, tsegs) = m.encode_content(&mut tape, &self.tts.store, &toks)?;
        let sv = tape.constant(Tensor::from_vec(items.len(), m.config.style_dim, style.concat())?);
        let present = vec![true; items.len()];
        let logd = m.predict_durations(&mut tape, &self.tts.store, feats, &tsegs, sv, &present)?;
        let logd: Vec<f64> = tape.value(logd).data().iter().map(|&x| x as f64).collect();
        Ok(tsegs.iter().map(|(s, l)| round_durations(&logd[s..s + l])).collect())
    }

    /// Generate world-scale frames for every item.
    pub fn infer(&self, items: &[InferItem], scales: &GuidanceScales, steps: usize) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(INFER_CHUNK) {
            out.extend(self.infer_chunk(chunk, scales, steps)?.0);
        }
        Ok(out)
    }

    /// As `infer`, also returning the number of branch evaluations.
    pub fn infer_chunk(&self, items: &[InferItem], scales: &GuidanceScales, steps: usize) -> Result<(Vec<Tensor<f32>>, usize)> {
        scales.validate()?;
        if items.is_empty() {
            return Ok((Vec::new(), 0));
        }
        if let Some(bad) = items.iter().find(|i| i.content.is_empty()) {
            return Err(Error::invalid("infer", format!("empty content (seed {})", bad.seed)));
        }
        let m = &self.tts.model;
        let store = &self.tts.store;
        let style = self.style_embeddings(items)?;
        let durs = self.durations(items, &style)?;

        let mut tape = Tape::<f32>::new();
        let toks: Vec<&[usize]> = items.iter().map(|i| i.content).collect();
        let (feats, tsegs) = m.encode_content(&mut tape, store, &toks)?;
        let flat: Vec<usize> = durs.concat();
        let (content, segs) = length_regulate(&mut tape, feats, &tsegs, &flat)?;
        let refs: Vec<Tensor<f32>> = items.iter().map(|i| self.norm.apply(i.speaker_ref)).collect();
        let rrefs: Vec<&Tensor<f32>> = refs.iter().collect();
        let spk = m.encode_speaker(&mut tape, store, &rrefs)?;

        let d = m.channels;
        let mut z = Vec::with_capacity(segs.total_rows() * d);
        for (it, (_, len)) in items.iter().zip(segs.iter()) {
            let mut rng = ChaCha8Rng::seed_from_u64(it.seed);
            z.extend(normal_tensor::<f32, _>(&[len, d], 1.0, &mut rng).into_data());
        }
        let z = Tensor::from_vec(segs.total_rows(), d, z)?;
        let mut field = GuidedField {
            tts: self.tts,
            content: tape.value(content).clone(),
            segs: segs.clone(),
            spk: tape.value(spk).clone(),
            style: Tensor::from_vec(items.len(), m.config.style_dim, style.concat())?,
            scales: *scales,
            evaluations: 0,
        };
        let z = euler_integrate(&mut field, z, steps)?;
        let frames = segs
            .iter()
            .map(|(s, l)| {
                let rows = Tensor::from_vec(l, d, z.data()[s * d..(s + l) * d].to_vec())?;
                Ok(self.norm.invert(&rows))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((frames, field.evaluations))
    }
}
