//! Flow-matching training of the TTS model: hierarchical condition
//! dropout, same-speaker reference swapping, representation alignment on
//! a middle DiT block and duration supervision.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_bundle;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Linear};
use crate::sampler::{GuidanceScales, InferItem, StylePrompt, Synthesizer};
use crate::style::StyleModel;
use crate::tensor::{clip_grad_norm, warmup_lr, AdamConfig, AdamState, Float, ParamStore, Tape, Tensor, Var};
use crate::tts::{length_regulate, ConditionSet, DitInput, TtsBundle, TtsConfig};
use crate::world::{fresh_utterances, sample_content, teacher_dim, teacher_features, Dataset, Probes, Utterance, World};

/// Grid step for latents and noise: both are rounded to multiples of
/// 2^-16 so `z_0 - z_1` and its inverse are exact in f32.
const LATENT_GRID: f32 = 65536.0;

fn on_grid(x: f32) -> f32 {
    (x * LATENT_GRID).round() / LATENT_GRID
}

/// Per-channel standardization with training-set statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(data: &Dataset) -> Self {
        let (mean, std) = data.channel_stats();
        Normalizer { mean, std }
    }

    pub fn apply(&self, frames: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        let data = frames.data().iter().enumerate().map(|(i, &x)| on_grid((x - self.mean[i % d]) / self.std[i % d])).collect();
        Tensor::new(frames.shape(), data).expect("same shape")
    }

    pub fn invert(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        let data = z.data().iter().enumerate().map(|(i, &x)| x * self.std[i % d] + self.mean[i % d]).collect();
        Tensor::new(z.shape(), data).expect("same shape")
    }
}

/// One flow-matching example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: Tensor<f32>,
    pub z1: Tensor<f32>,
    pub t: f64,
    pub zt: Tensor<f32>,
    pub u: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// `t ~ U(0,1)`, `z_1 ~ N(0, I)`, `z_t = (1-t) z_1 + t z_0`, `u = z_0 - z_1`.
pub fn cfm_make_sample<R: Rng + ?Sized>(z0: &Tensor<f32>, rng: &mut R) -> FlowSample {
    let t: f64 = rng.random();
    cfm_sample_at(z0, t, rng)
}

pub fn cfm_sample_at<R: Rng + ?Sized>(z0: &Tensor<f32>, t: f64, rng: &mut R) -> FlowSample {
    let z0 = Tensor::new(z0.shape(), z0.data().iter().map(|&x| on_grid(x)).collect()).expect("same shape");
    let noise: Tensor<f32> = normal_tensor(z0.shape(), 1.0, rng);
    let z1 = Tensor::new(z0.shape(), noise.data().iter().map(|&x| on_grid(x)).collect()).expect("same shape");
    let tf = t as f32;
    let zt = z0.data().iter().zip(z1.data()).map(|(&a, &b)| (1.0 - tf) * b + tf * a).collect();
    let u = z0.data().iter().zip(z1.data()).map(|(&a, &b)| a - b).collect();
    let sample = FlowSample {
        zt: Tensor::new(z0.shape(), zt).expect("same shape"),
        u: Tensor::new(z0.shape(), u).expect("same shape"),
        mask: vec![true; z0.rows()],
        z0,
        z1,
        t,
    };
    debug_assert!(sample.u.data().iter().zip(sample.z1.data()).zip(sample.z0.data()).all(|((u, b), a)| u + b == *a));
    sample
}

/// Masked mean squared error between predicted and target velocity.
pub fn flow_loss<F: Float>(tape: &mut Tape<F>, v_pred: Var, u: Var, mask: &[bool]) -> Result<Var> {
    tape.mse_masked(v_pred, u, Some(mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutPolicy {
    pub p_style: f64,
    pub p_spk: f64,
    pub p_text: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy { p_style: 0.3, p_spk: 0.5, p_text: 0.5 }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        for p in [self.p_style, self.p_spk, self.p_text] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("dropout_policy", format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Drop style; only if style was dropped, drop speaker; only if both
    /// were dropped, drop text.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ConditionSet {
        let mut c = ConditionSet::ALL;
        if rng.random::<f64>() < self.p_style {
            c.style = false;
            if rng.random::<f64>() < self.p_spk {
                c.spk = false;
                if rng.random::<f64>() < self.p_text {
                    c.text = false;
                }
            }
        }
        c
    }

    /// Probabilities of `[all, text+spk, text, none]`.
    pub fn analytic(&self) -> [f64; 4] {
        let (a, b, c) = (self.p_style, self.p_spk, self.p_text);
        [1.0 - a, a * (1.0 - b), a * b * (1.0 - c), a * b * c]
    }
}

/// Index of the four reachable configurations `[all, text+spk, text, none]`.
pub fn dropout_cell(c: ConditionSet) -> Option<usize> {
    match (c.text, c.spk, c.style) {
        (true, true, true) => Some(0),
        (true, true, false) => Some(1),
        (true, false, false) => Some(2),
        (false, false, false) => Some(3),
        _ => None,
    }
}

/// A different utterance of the same speaker, uniformly; the target
/// itself when the speaker has only one utterance.
pub fn pick_speaker_reference<R: Rng + ?Sized>(by_speaker: &[Vec<usize>], target: usize, speaker: usize, rng: &mut R) -> usize {
    let pool = &by_speaker[speaker];
    let others = pool.len() - pool.contains(&target) as usize;
    if others == 0 {
        log::warn!("speaker {speaker} has a single utterance; using the target as its own reference");
        return target;
    }
    let mut k = rng.random_range(0..others);
    for &i in pool {
        if i == target {
            continue;
        }
        if k == 0 {
            return i;
        }
        k -= 1;
    }
    unreachable!("k < number of other utterances")
}

/// `1 - mean_t cos(proj(upsample2(student))_t, teacher_t)`.
pub fn repa_loss<F: Float>(tape: &mut Tape<F>, store: &ParamStore<F>, proj: &Linear, student: Var, teacher: Var) -> Result<Var> {
    let (ns, nt) = (tape.value(student).rows(), tape.value(teacher).rows());
    if nt != 2 * ns {
        return Err(Error::invalid("repa_loss", format!("teacher has {nt} rows, expected 2 x {ns}")));
    }
    let idx: Vec<usize> = (0..nt).map(|r| r / 2).collect();
    let up = tape.gather(student, &idx)?;
    let p = proj.forward(tape, store, up)?;
    repa_cosine(tape, p, teacher)
}

/// `1 - mean cos` between already projected rows and teacher rows.
pub fn repa_cosine<F: Float>(tape: &mut Tape<F>, projected: Var, teacher: Var) -> Result<Var> {
    let cos = tape.cosine_rows(projected, teacher)?;
    let m = tape.mean(cos)?;
    let neg = tape.neg(m)?;
    tape.add_scalar(neg, F::one())
}

/// Mean squared error against `ln(true_dur)`.
pub fn duration_loss<F: Float>(tape: &mut Tape<F>, pred_log_dur: Var, true_dur: &[usize]) -> Result<Var> {
    if true_dur.contains(&0) {
        return Err(Error::invalid("duration_loss", "true durations must be at least 1"));
    }
    let target: Vec<f64> = true_dur.iter().map(|&d| (d as f64).ln()).collect();
    let t = tape.constant(Tensor::from_f64(&[true_dur.len(), 1], &target)?);
    tape.mse(pred_log_dur, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_repa: f64,
    pub lambda_dur: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_repa: 0.5, lambda_dur: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsTrainConfig {
    pub model: TtsConfig,
    pub n_utterances: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub dropout: DropoutPolicy,
    pub weights: LossWeights,
    /// Steps between held-out content-error evaluations (0 disables).
    pub eval_every: usize,
    /// Denser evaluation cadence used while `step <= early_eval_until`.
    pub early_eval_every: usize,
    pub early_eval_until: usize,
    pub eval_items: usize,
    pub eval_sampler_steps: usize,
    /// Steps between checkpoints when a run directory is given (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TtsTrainConfig {
    fn default() -> Self {
        TtsTrainConfig {
            model: TtsConfig::default(),
            n_utterances: 2000,
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            warmup_frac: 0.05,
            clip: 1.0,
            dropout: DropoutPolicy::default(),
            weights: LossWeights::default(),
            eval_every: 500,
            early_eval_every: 50,
            early_eval_until: 1000,
            eval_items: 32,
            eval_sampler_steps: 8,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub lr: f64,
    pub flow: f64,
    pub repa: f64,
    pub dur: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub content_error: f64,
}

/// Precomputed per-utterance training inputs.
struct Prepared {
    z0: Vec<Tensor<f32>>,
    teacher: Vec<Tensor<f32>>,
    style: Vec<Vec<f32>>,
    by_speaker: Vec<Vec<usize>>,
}

pub struct TtsTrainer<'a> {
    pub world: &'a World,
    pub style: &'a StyleModel,
    pub config: TtsTrainConfig,
    pub data: Dataset,
    pub norm: Normalizer,
    pub bundle: TtsBundle,
    prep: Prepared,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    pub step: usize,
    pub history: Vec<StepLosses>,
    pub evals: Vec<EvalPoint>,
    eval_set: Vec<(Utterance, Utterance, Vec<usize>)>,
}

/// The training set a trainer built with `seed` uses.
pub fn training_dataset(world: &World, config: &TtsTrainConfig, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::generate(world, config.n_utterances, rng.random())
}

impl<'a> TtsTrainer<'a> {
    pub fn new(world: &'a World, style: &'a StyleModel, config: &TtsTrainConfig, seed: u64) -> Result<Self> {
        config.dropout.validate()?;
        if config.weights.lambda_repa < 0.0 || config.weights.lambda_dur < 0.0 {
            return Err(Error::invalid("train_tts", "loss weights must be non-negative"));
        }
        if config.batch == 0 || config.n_utterances < config.batch {
            return Err(Error::invalid("train_tts", "batch must be in 1..=n_utterances"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Dataset::generate(world, config.n_utterances, rng.random())?;
        let norm = Normalizer::fit(&data);
        let bundle = TtsBundle::new(&config.model, world.vocab(), world.channels(), teacher_dim(world.vocab()), rng.random());
        log::info!("tts parameters: {}", bundle.store.num_scalars());
        let frames: Vec<&Tensor<f32>> = data.utterances.iter().map(|u| &u.frames).collect();
        let style_emb = style.embed_audio(&frames)?;
        let prep = Prepared {
            z0: data.utterances.iter().map(|u| norm.apply(&u.frames)).collect(),
            teacher: data.utterances.iter().map(|u| teacher_features(u, world.vocab())).collect(),
            style: style_emb,
            by_speaker: data.by_speaker(world.num_speakers()),
        };
        // held-out evaluation: same-speaker reference, own style, fresh content
        let mut eval_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let targets = fresh_utterances(world, config.eval_items, &mut eval_rng)?;
        let mut eval_set = Vec::with_capacity(targets.len());
        for u in targets {
            let mut desc = u.desc();
            desc.content = sample_content(world, &mut eval_rng);
            desc.noise_seed = eval_rng.random();
            let reference = Utterance::render(world, &desc)?;
            let content = sample_content(world, &mut eval_rng);
            eval_set.push((u, reference, content));
        }
        let adam = AdamState::new(&bundle.store, AdamConfig::default());
        Ok(TtsTrainer { world, style, config: config.clone(), data, norm, bundle, prep, adam, rng, step: 0, history: Vec::new(), evals: Vec::new(), eval_set })
    }

    /// Assemble the batch loss on a tape. Returns `(total, flow, repa, dur)`.
    fn batch_loss<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        items: &[usize],
        refs: &[usize],
        conds: &[ConditionSet],
        samples: &[FlowSample],
    ) -> Result<(Var, Var, Var, Var)> {
        build_batch_loss(tape, store, &self.bundle, &self.data, &self.prep.z0, &self.prep.teacher, &self.prep.style, items, refs, conds, samples, &self.config.weights)
    }

    /// One optimizer step on a fresh random batch.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let step = self.step;
        let n = self.data.len();
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(&mut self.rng);
        let items: Vec<usize> = pool[..self.config.batch].to_vec();
        let refs: Vec<usize> = items
            .iter()
            .map(|&i| pick_speaker_reference(&self.prep.by_speaker, i, self.data.utterances[i].speaker, &mut self.rng))
            .collect();
        let conds: Vec<ConditionSet> = items.iter().map(|_| self.config.dropout.sample(&mut self.rng)).collect();
        let samples: Vec<FlowSample> = items.iter().map(|&i| cfm_make_sample(&self.prep.z0[i], &mut self.rng)).collect();

        let mut tape = Tape::<f32>::new();
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step, what: "training loss" },
            e => e,
        };
        let (total, flow, repa, dur) = self.batch_loss(&mut tape, &self.bundle.store, &items, &refs, &conds, &samples).map_err(diverged)?;
        let losses = StepLosses {
            step,
            lr: warmup_lr(step, self.config.steps, self.config.warmup_frac, self.config.lr),
            flow: tape.value(flow).item() as f64,
            repa: tape.value(repa).item() as f64,
            dur: tape.value(dur).item() as f64,
            total: tape.value(total).item() as f64,
        };
        if !losses.total.is_finite() {
            return Err(Error::Diverged { step, what: "training loss" });
        }
        tape.backward(total)?;
        tape.write_param_grads(&mut self.bundle.store);
        if self.config.clip > 0.0 {
            clip_grad_norm(&mut self.bundle.store, self.config.clip);
        }
        self.adam.step(&mut self.bundle.store, losses.lr).map_err(|_| Error::Diverged { step, what: "gradient" })?;
        self.step += 1;
        self.history.push(losses);
        Ok(losses)
    }

    pub fn synthesizer(&self) -> Synthesizer<'_> {
        Synthesizer { tts: &self.bundle, norm: &self.norm, style: self.style }
    }

    /// Mean content error on the held-out set (audio style prompt from the
    /// target utterance, reference from the same speaker, fresh content).
    pub fn eval_content_error(&self, probes: &Probes) -> Result<f64> {
        let items: Vec<InferItem> = self
            .eval_set
            .iter()
            .enumerate()
            .map(|(i, (u, r, c))| InferItem { content: c, speaker_ref: &r.frames, style: StylePrompt::Audio(&u.frames), seed: 1000 + i as u64 })
            .collect();
        let frames = self.synthesizer().infer(&items, &GuidanceScales::default(), self.config.eval_sampler_steps)?;
        let total: f64 = frames.iter().zip(&self.eval_set).map(|(f, (_, _, c))| probes.decode(f, c).content.error).sum();
        Ok(total / items.len().max(1) as f64)
    }

    /// Run to `config.steps`, evaluating and checkpointing on schedule.
    /// With `run_dir`, writes `metrics.csv` and the `tts` checkpoint there.
    pub fn run(&mut self, probes: Option<&Probes>, run_dir: Option<&Path>) -> Result<()> {
        if let Some(p) = probes {
            p.check_gate()?;
        }
        let mut csv = match run_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                let mut f = std::io::BufWriter::new(std::fs::File::create(d.join("metrics.csv"))?);
                writeln!(f, "step,lr,l_flow,l_repa,l_dur,total,content_error")?;
                Some(f)
            }
            None => None,
        };
        while self.step < self.config.steps {
            let l = self.train_step()?;
            let done = self.step;
            let mut eval_col = String::new();
            if let Some(p) = probes {
                if self.eval_due(done) {
                    let ce = self.eval_content_error(p)?;
                    log::info!("tts step {done}: content error {ce:.4}");
                    self.evals.push(EvalPoint { step: done, content_error: ce });
                    eval_col = format!("{ce}");
                }
            }
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{},{},{},{},{},{},{}", l.step, l.lr, l.flow, l.repa, l.dur, l.total, eval_col)?;
            }
            if l.step % 200 == 0 {
                log::info!("tts step {}: flow {:.4} repa {:.4} dur {:.4}", l.step, l.flow, l.repa, l.dur);
            }
            if let Some(d) = run_dir {
                if self.config.checkpoint_every > 0 && done.is_multiple_of(self.config.checkpoint_every) {
                    save_bundle(&d.join(format!("tts-{done:06}")), &self.bundle, &self.norm)?;
                }
            }
        }
        if let Some(mut f) = csv {
            f.flush()?;
        }
        if let Some(d) = run_dir {
            save_bundle(&d.join("tts"), &self.bundle, &self.norm)?;
        }
        Ok(())
    }

    fn eval_due(&self, done: usize) -> bool {
        let c = &self.config;
        let every = |k: usize| k > 0 && done.is_multiple_of(k);
        (c.eval_every > 0 && done == c.steps) || every(c.eval_every) || (done <= c.early_eval_until && every(c.early_eval_every))
    }

    /// First evaluated step at which content error reached `threshold`.
    pub fn steps_to_content_error(&self, threshold: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.content_error <= threshold).map(|e| e.step)
    }
}

/// The full training objective for one batch, on any float type.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    bundle: &TtsBundle,
    data: &Dataset,
    z0: &[Tensor<f32>],
    teacher: &[Tensor<f32>],
    style: &[Vec<f32>],
    items: &[usize],
    refs: &[usize],
    conds: &[ConditionSet],
    samples: &[FlowSample],
    weights: &LossWeights,
) -> Result<(Var, Var, Var, Var)> {
    build_batch_loss_split(tape, store, store, bundle, data, z0, teacher, style, items, refs, conds, samples, weights)
}

/// As `build_batch_loss`, with the duration predictor's detached token
/// features computed from `frozen`. With `frozen` equal to `store` this is
/// the training objective; a separate frozen copy lets finite differences
/// respect the stop-gradient.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss_split<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    frozen: &ParamStore<F>,
    bundle: &TtsBundle,
    data: &Dataset,
    z0: &[Tensor<f32>],
    teacher: &[Tensor<f32>],
    style: &[Vec<f32>],
    items: &[usize],
    refs: &[usize],
    conds: &[ConditionSet],
    samples: &[FlowSample],
    weights: &LossWeights,
) -> Result<(Var, Var, Var, Var)> {
    let m = &bundle.model;
    let utts: Vec<&Utterance> = items.iter().map(|&i| &data.utterances[i]).collect();
    let toks: Vec<&[usize]> = utts.iter().map(|u| u.content.as_slice()).collect();
    let (feats, tsegs) = m.encode_content(tape, store, &toks)?;
    let true_durs: Vec<usize> = utts.iter().flat_map(|u| u.durations.iter().copied()).collect();
    let (content, segs) = length_regulate(tape, feats, &tsegs, &true_durs)?;
    let ref_frames: Vec<&Tensor<f32>> = refs.iter().map(|&r| &z0[r]).collect();
    let spk = m.encode_speaker(tape, store, &ref_frames)?;
    let sdim = m.config.style_dim;
    let style_rows: Vec<f64> = items.iter().flat_map(|&i| style[i].iter().map(|&x| x as f64)).collect();
    let style_v = tape.constant(Tensor::from_f64(&[items.len(), sdim], &style_rows)?);

    let cat = |parts: Vec<&Tensor<f32>>| -> Result<Tensor<F>> {
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        Tensor::from_vec(rows, cols, parts.iter().flat_map(|p| p.data().iter().map(|&x| F::of(x as f64))).collect())
    };
    let zt = tape.constant(cat(samples.iter().map(|s| &s.zt).collect())?);
    let u = tape.constant(cat(samples.iter().map(|s| &s.u).collect())?);
    let mask: Vec<bool> = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let times: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let out = m.forward(tape, store, &DitInput { z_t: zt, times: &times, segs: &segs, content, spk, style: style_v, conds })?;
    let flow = flow_loss(tape, out.velocity, u, &mask)?;

    let teach = tape.constant(cat(items.iter().map(|&i| &teacher[i]).collect())?);
    let repa = repa_loss(tape, store, &m.repa_proj, out.student, teach)?;

    let style_present: Vec<bool> = conds.iter().map(|c| c.style).collect();
    // A tape holds one node per parameter, so frozen features come from a
    // tape of their own.
    let dur_feats = if std::ptr::eq(store, frozen) {
        feats
    } else {
        let mut side = Tape::new();
        let (f, _) = m.encode_content(&mut side, frozen, &toks)?;
        tape.constant(side.value(f).clone())
    };
    let logd = m.predict_durations(tape, store, dur_feats, &tsegs, style_v, &style_present)?;
    let dur = duration_loss(tape, logd, &true_durs)?;

    let r = tape.scale(repa, F::of(weights.lambda_repa))?;
    let d = tape.scale(dur, F::of(weights.lambda_dur))?;
    let total = tape.add(flow, r)?;
    let total = tape.add(total, d)?;
    Ok((total, flow, repa, dur))
}

/// A finished training run.
pub struct TtsRun {
    pub bundle: TtsBundle,
    pub norm: Normalizer,
    pub history: Vec<StepLosses>,
    pub evals: Vec<EvalPoint>,
}

pub fn train_tts(world: &World, style: &StyleModel, probes: Option<&Probes>, config: &TtsTrainConfig, seed: u64, run_dir: Option<&Path>) -> Result<TtsRun> {
    let mut tr = TtsTrainer::new(world, style, config, seed)?;
    tr.run(probes, run_dir)?;
    Ok(TtsRun { bundle: tr.bundle, norm: tr.norm, history: tr.history, evals: tr.evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_chain_probabilities() {
        let p = DropoutPolicy::default().analytic();
        let want = [0.7, 0.15, 0.075, 0.075];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(dropout_cell(DropoutPolicy::default().sample(&mut rng)).is_some());
        }
        assert!(DropoutPolicy { p_style: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn reference_is_another_utterance_of_the_speaker() {
        let by = vec![vec![0, 3, 5], vec![1], vec![2, 4]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let r = pick_speaker_reference(&by, 3, 0, &mut rng);
            assert!(r == 0 || r == 5);
            assert_eq!(pick_speaker_reference(&by, 2, 2, &mut rng), 4);
        }
        assert_eq!(pick_speaker_reference(&by, 1, 1, &mut rng), 1);
    }

    #[test]
    fn flow_sample_identities_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0: Tensor<f32> = normal_tensor(&[7, 4], 1.3, &mut rng);
        for _ in 0..20 {
            let s = cfm_make_sample(&z0, &mut rng);
            assert!((0.0..1.0).contains(&s.t));
            for i in 0..z0.numel() {
                assert_eq!(s.u.data()[i] + s.z1.data()[i], s.z0.data()[i]);
                assert_eq!(s.z0.data()[i] - s.z1.data()[i], s.u.data()[i]);
                assert!((s.z0.data()[i] - z0.data()[i]).abs() <= 1.0 / 65536.0);
            }
        }
        let s = cfm_sample_at(&z0, 0.0, &mut rng);
        assert_eq!(s.zt, s.z1);
    }

    #[test]
    fn flow_loss_rejects_an_all_masked_batch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(Tensor::full(&[3, 2], 1.0));
        assert!(flow_loss(&mut tape, a, b, &[false; 3]).is_err());
        let l = flow_loss(&mut tape, a, b, &[true, false, true]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn repa_checks_frame_ratio_and_aligned_rows_give_zero() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = Linear::new(&mut store, "p", 3, 5, true, crate::nn::Init::Fan, &mut rng);
        let s = tape.constant(normal_tensor(&[4, 3], 1.0, &mut rng));
        let bad = tape.constant(Tensor::zeros(&[7, 5]));
        assert!(repa_loss(&mut tape, &store, &proj, s, bad).is_err());
        let t = tape.constant(normal_tensor(&[6, 5], 1.0, &mut rng));
        let l = repa_cosine(&mut tape, t, t).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        let n = tape.neg(t).unwrap();
        let l = repa_cosine(&mut tape, n, t).unwrap();
        assert!((tape.value(l).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duration_loss_uses_log_targets() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(&[2, 1], &[2f64.ln(), 0.0]).unwrap());
        let l = duration_loss(&mut tape, p, &[2, 1]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
        let l = duration_loss(&mut tape, p, &[1, 1]).unwrap();
        assert!((tape.value(l).item() - 0.5 * 2f64.ln().powi(2)).abs() < 1e-12);
        assert!(duration_loss(&mut tape, p, &[0, 1]).is_err());
    }

    #[test]
    fn normalizer_round_trips_up_to_grid() {
        let n = Normalizer { mean: vec![1.0, -2.0], std: vec![0.5, 3.0] };
        let x = Tensor::new(&[2, 2], vec![1.3f32, 4.0, -0.2, 0.7]).unwrap();
        let back = n.invert(&n.apply(&x));
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
