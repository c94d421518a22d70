//! Oracle probes that read factors back out of latent frames. They score
//! generated output, so each one must clear an accuracy gate on
//! ground-truth renderings before it is trusted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_utterance, StyleFactors, Utterance, World, NUM_EMOTIONS, NUM_LEVELS, RATE_DURATION};
use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::tensor::kernels::gelu;
use crate::tensor::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor};

pub const GATE: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_train: usize,
    pub n_heldout: usize,
    pub utterance_steps: usize,
    pub utterance_lr: f64,
    pub content_hidden: usize,
    pub content_steps: usize,
    pub content_batch: usize,
    pub content_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_train: 2000,
            n_heldout: 1000,
            utterance_steps: 600,
            utterance_lr: 0.05,
            content_hidden: 64,
            content_steps: 2500,
            content_batch: 512,
            content_lr: 3e-3,
        }
    }
}

/// Per-channel z-scoring within one utterance: `(normalized, mean, std)`.
fn normalize_utterance(frames: &Tensor<f32>) -> (Vec<f32>, Vec<f64>, Vec<f64>) {
    let (t, d) = (frames.rows(), frames.cols());
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for r in 0..t {
        for (c, &x) in frames.row(r).iter().enumerate() {
            mean[c] += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    for r in 0..t {
        for (c, &x) in frames.row(r).iter().enumerate() {
            var[c] += (x as f64 - mean[c]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / t as f64).sqrt().max(1e-6)).collect();
    let mut out = Vec::with_capacity(t * d);
    for r in 0..t {
        for (c, &x) in frames.row(r).iter().enumerate() {
            out.push(((x as f64 - mean[c]) / std[c]) as f32);
        }
    }
    (out, mean, std)
}

/// Utterance-level statistics: per-channel mean, log per-channel std,
/// log mean |frame delta|, and utterance-normalized frame means folded by
/// frame index modulo `pattern_len`.
pub fn pooled_features(frames: &Tensor<f32>, pattern_len: usize) -> Vec<f32> {
    let (t, d) = (frames.rows(), frames.cols());
    let (norm, mean, std) = normalize_utterance(frames);
    let mut feats = Vec::with_capacity(2 * d + 1 + pattern_len * d);
    feats.extend(mean.iter().map(|&m| m as f32));
    feats.extend(std.iter().map(|&s| s.ln() as f32));
    let mut delta = 0.0f64;
    for r in 1..t {
        for (a, b) in frames.row(r).iter().zip(frames.row(r - 1)) {
            delta += (a - b).abs() as f64;
        }
    }
    let delta = delta / ((t.max(2) - 1) * d) as f64;
    feats.push(delta.max(1e-6).ln() as f32);
    let mut folded = vec![0.0f64; pattern_len * d];
    let mut counts = vec![0usize; pattern_len];
    for r in 0..t {
        let k = r % pattern_len;
        counts[k] += 1;
        for c in 0..d {
            folded[k * d + c] += norm[r * d + c] as f64;
        }
    }
    for k in 0..pattern_len {
        for c in 0..d {
            let n = counts[k].max(1) as f64;
            feats.push((folded[k * d + c] / n) as f32);
        }
    }
    feats
}

/// Input rows for the per-frame content classifier:
/// `[utterance-normalized frame | one-hot(emotion, phase)]`.
fn content_inputs(frames: &Tensor<f32>, emotion: usize, pattern_len: usize) -> Vec<f32> {
    let (t, d) = (frames.rows(), frames.cols());
    let (norm, _, _) = normalize_utterance(frames);
    let width = d + NUM_EMOTIONS * pattern_len;
    let mut out = vec![0.0f32; t * width];
    for r in 0..t {
        let row = &mut out[r * width..(r + 1) * width];
        row[..d].copy_from_slice(&norm[r * d..(r + 1) * d]);
        row[d + emotion * pattern_len + r % pattern_len] = 1.0;
    }
    out
}

/// Small feed-forward classifier (GELU between layers) with input
/// standardization; plain buffers so it serializes and runs without a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub in_mean: Vec<f32>,
    pub in_std: Vec<f32>,
    /// `(fan_in, fan_out, weights row-major fan_in x fan_out, bias)`
    pub layers: Vec<(usize, usize, Vec<f32>, Vec<f32>)>,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.1)
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        let mut h: Vec<f32> = x.iter().zip(&self.in_mean).zip(&self.in_std).map(|((x, m), s)| (x - m) / s).collect();
        for (i, (fi, fo, w, b)) in self.layers.iter().enumerate() {
            let mut out = b.clone();
            for (r, &hv) in h.iter().enumerate().take(*fi) {
                if hv != 0.0 {
                    for (o, wv) in out.iter_mut().zip(&w[r * fo..(r + 1) * fo]) {
                        *o += hv * wv;
                    }
                }
            }
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = gelu(*v));
            }
            h = out;
        }
        h
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }

    /// Fit with Adam on cross-entropy. `rows` is `n x width` row-major.
    pub fn fit(rows: &[f32], width: usize, labels: &[usize], classes: usize, hidden: Option<usize>, fit: &FitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = labels.len();
        let mut in_mean = vec![0.0f64; width];
        let mut in_sq = vec![0.0f64; width];
        for r in 0..n {
            for c in 0..width {
                let x = rows[r * width + c] as f64;
                in_mean[c] += x;
                in_sq[c] += x * x;
            }
        }
        let in_mean: Vec<f32> = in_mean.iter().map(|m| (m / n as f64) as f32).collect();
        let in_std: Vec<f32> = in_sq
            .iter()
            .zip(&in_mean)
            .map(|(s, &m)| ((s / n as f64 - (m as f64).powi(2)).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        let standardized: Vec<f32> = rows.iter().enumerate().map(|(i, &x)| (x - in_mean[i % width]) / in_std[i % width]).collect();

        let dims: Vec<usize> = match hidden {
            Some(h) => vec![width, h, classes],
            None => vec![width, classes],
        };
        let mut store = ParamStore::<f32>::new();
        let ids: Vec<(ParamId, ParamId)> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wt = store.add(format!("l{i}.w"), normal_tensor(&[w[0], w[1]], (1.0 / w[0] as f64).sqrt(), rng));
                let b = store.add(format!("l{i}.b"), Tensor::zeros(&[w[1]]));
                (wt, b)
            })
            .collect();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut tape = Tape::new();
        for _ in 0..fit.steps {
            let batch: Vec<usize> = if fit.batch >= n {
                (0..n).collect()
            } else {
                if cursor + fit.batch > n {
                    order.shuffle(rng);
                    cursor = 0;
                }
                cursor += fit.batch;
                order[cursor - fit.batch..cursor].to_vec()
            };
            let mut x = Vec::with_capacity(batch.len() * width);
            for &i in &batch {
                x.extend_from_slice(&standardized[i * width..(i + 1) * width]);
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            tape.reset();
            let mut h = tape.constant(Tensor::from_vec(batch.len(), width, x)?);
            for (li, &(w, b)) in ids.iter().enumerate() {
                let wv = tape.param(&store, w);
                let bv = tape.param(&store, b);
                h = tape.linear(h, wv, Some(bv))?;
                if li + 1 < ids.len() {
                    h = tape.gelu(h)?;
                }
            }
            let loss = tape.cross_entropy(h, &y)?;
            tape.backward(loss)?;
            tape.write_param_grads(&mut store);
            adam.step(&mut store, fit.lr)?;
        }
        let layers = ids
            .iter()
            .zip(dims.windows(2))
            .map(|(&(w, b), d)| (d[0], d[1], store.value(w).data().to_vec(), store.value(b).data().to_vec()))
            .collect();
        Ok(Classifier { in_mean, in_std, layers })
    }
}

/// Adam settings for `Classifier::fit`; `batch >= n` means full batch.
#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Nearest of the rendered frames-per-token values to `T / L`.
pub fn decode_rate(frames: usize, tokens: usize) -> usize {
    let ratio = frames as f64 / tokens.max(1) as f64;
    let dist = |lvl: usize| (RATE_DURATION[lvl] as f64 - ratio).abs();
    (1..NUM_LEVELS).fold(0, |best, lvl| if dist(lvl) < dist(best) { lvl } else { best })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentDecode {
    pub tokens: Vec<usize>,
    /// Mismatched tokens over target length; 1.0 when `T < L`.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFactors {
    pub factors: StyleFactors,
    pub speaker: usize,
    pub content: ContentDecode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeAccuracy {
    pub emotion: f64,
    pub energy: f64,
    pub speaker: f64,
    pub rate: f64,
    pub content_error: f64,
}

impl ProbeAccuracy {
    /// Names of probes below the gate.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, acc) in [("emotion", self.emotion), ("energy", self.energy), ("speaker", self.speaker), ("rate", self.rate)] {
            if acc < GATE {
                out.push(format!("{name} {acc:.4} < {GATE}"));
            }
        }
        if self.content_error > 1.0 - GATE {
            out.push(format!("content error {:.4} > {:.2}", self.content_error, 1.0 - GATE));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probes {
    pub pattern_len: usize,
    pub vocab: usize,
    pub emotion: Classifier,
    pub energy: Classifier,
    pub speaker: Classifier,
    pub content: Classifier,
    pub heldout: ProbeAccuracy,
}

impl Probes {
    /// Train every probe on fresh renderings and check held-out accuracy.
    /// Fails with the list of probes under the gate.
    pub fn train(world: &World, config: &ProbeConfig, seed: u64) -> Result<Self> {
        let probes = Self::train_ungated(world, config, seed)?;
        probes.check_gate()?;
        Ok(probes)
    }

    pub fn train_ungated(world: &World, config: &ProbeConfig, seed: u64) -> Result<Self> {
        if config.n_train < 2000 {
            return Err(Error::invalid("train_probes", format!("n_train = {} < 2000", config.n_train)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train: Vec<Utterance> = (0..config.n_train).map(|_| sample_utterance(world, &mut rng).map(|u| u.0)).collect::<Result<_>>()?;
        let heldout: Vec<Utterance> = (0..config.n_heldout).map(|_| sample_utterance(world, &mut rng).map(|u| u.0)).collect::<Result<_>>()?;
        let k = world.pattern_len();

        let pooled: Vec<Vec<f32>> = train.iter().map(|u| pooled_features(&u.frames, k)).collect();
        let width = pooled[0].len();
        let flat: Vec<f32> = pooled.concat();
        let fit = FitConfig { steps: config.utterance_steps, batch: usize::MAX, lr: config.utterance_lr };
        let labels = |f: &dyn Fn(&Utterance) -> usize| train.iter().map(f).collect::<Vec<_>>();
        let emotion = Classifier::fit(&flat, width, &labels(&|u| u.factors.emotion), NUM_EMOTIONS, None, &fit, &mut rng)?;
        let energy = Classifier::fit(&flat, width, &labels(&|u| u.factors.energy), NUM_LEVELS, None, &fit, &mut rng)?;
        let speaker = Classifier::fit(&flat, width, &labels(&|u| u.speaker), world.num_speakers(), None, &fit, &mut rng)?;

        let cwidth = world.channels() + NUM_EMOTIONS * k;
        let mut rows = Vec::new();
        let mut tokens = Vec::new();
        for u in &train {
            rows.extend(content_inputs(&u.frames, u.factors.emotion, k));
            for (tok, &d) in u.content.iter().zip(&u.durations) {
                tokens.extend(std::iter::repeat_n(*tok, d));
            }
        }
        let fit = FitConfig { steps: config.content_steps, batch: config.content_batch, lr: config.content_lr };
        let content = Classifier::fit(&rows, cwidth, &tokens, world.vocab(), Some(config.content_hidden), &fit, &mut rng)?;

        let mut probes = Probes { pattern_len: k, vocab: world.vocab(), emotion, energy, speaker, content, heldout: ProbeAccuracy::default() };
        probes.heldout = probes.accuracy(&heldout);
        log::info!("probe held-out accuracy {:?}", probes.heldout);
        Ok(probes)
    }

    pub fn check_gate(&self) -> Result<()> {
        let failures = self.heldout.failures();
        if failures.is_empty() {
            Ok(())
        } else {
            Err(Error::ProbeGate(failures.join("; ")))
        }
    }

    /// Accuracy of every decoder against ground truth.
    pub fn accuracy(&self, utts: &[Utterance]) -> ProbeAccuracy {
        let mut hits = [0usize; 4];
        let mut content_error = 0.0;
        for u in utts {
            let d = self.decode(&u.frames, &u.content);
            hits[0] += (d.factors.emotion == u.factors.emotion) as usize;
            hits[1] += (d.factors.energy == u.factors.energy) as usize;
            hits[2] += (d.speaker == u.speaker) as usize;
            hits[3] += (d.factors.rate == u.factors.rate) as usize;
            content_error += d.content.error;
        }
        let n = utts.len().max(1) as f64;
        ProbeAccuracy {
            emotion: hits[0] as f64 / n,
            energy: hits[1] as f64 / n,
            speaker: hits[2] as f64 / n,
            rate: hits[3] as f64 / n,
            content_error: content_error / n,
        }
    }

    pub fn predict_speaker(&self, frames: &Tensor<f32>) -> usize {
        self.speaker.predict(&pooled_features(frames, self.pattern_len))
    }

    /// Decode style, speaker and content from frames, given the intended
    /// token sequence (its length fixes the segmentation).
    pub fn decode(&self, frames: &Tensor<f32>, target: &[usize]) -> DecodedFactors {
        let pooled = pooled_features(frames, self.pattern_len);
        let emotion = self.emotion.predict(&pooled);
        let energy = self.energy.predict(&pooled);
        let speaker = self.speaker.predict(&pooled);
        let rate = decode_rate(frames.rows(), target.len());
        let content = self.decode_content(frames, emotion, target);
        DecodedFactors { factors: StyleFactors { emotion, energy, rate }, speaker, content }
    }

    fn decode_content(&self, frames: &Tensor<f32>, emotion: usize, target: &[usize]) -> ContentDecode {
        let (t, l) = (frames.rows(), target.len());
        if t < l || l == 0 {
            return ContentDecode { tokens: Vec::new(), error: 1.0 };
        }
        let width = self.content.in_mean.len();
        let inputs = content_inputs(frames, emotion, self.pattern_len);
        let frame_preds: Vec<usize> = (0..t).map(|r| self.content.predict(&inputs[r * width..(r + 1) * width])).collect();
        let mut tokens = Vec::with_capacity(l);
        for i in 0..l {
            let (a, b) = (i * t / l, (i + 1) * t / l);
            let mut votes = vec![0usize; self.vocab];
            for &p in &frame_preds[a..b] {
                votes[p] += 1;
            }
            // ties go to the lowest token id
            let mut best = 0;
            for (v, &c) in votes.iter().enumerate() {
                if c > votes[best] {
                    best = v;
                }
            }
            tokens.push(best);
        }
        let wrong = tokens.iter().zip(target).filter(|(a, b)| a != b).count();
        ContentDecode { tokens, error: wrong as f64 / l as f64 }
    }
}

/// Draw `n` fresh ground-truth utterances.
pub fn fresh_utterances<R: Rng + ?Sized>(world: &World, n: usize, rng: &mut R) -> Result<Vec<Utterance>> {
    (0..n).map(|_| sample_utterance(world, rng).map(|u| u.0)).collect()
}
