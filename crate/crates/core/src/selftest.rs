//! Fast invariant checks of the algorithms: guidance algebra, dropout
//! distribution, sampler exactness, loss closed forms and gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::Result;
use crate::nn::{jitter_all, normal_tensor, Init, Linear};
use crate::sampler::{chained_cfg_combine, euler_integrate, GuidanceScales, GuidedField, SinglePointField};
use crate::style::{infonce_loss, multitask_losses, RegressionStats, StyleEncoder, StyleEncoderConfig};
use crate::tensor::{finite_difference_check, param_gradient_check, ParamStore, Segments, Tape, Tensor};
use crate::training::{build_batch_loss_split, cfm_make_sample, flow_loss, repa_loss, DropoutPolicy, FlowSample, LossWeights, dropout_cell};
use crate::tts::{ConditionSet, TtsBundle, TtsConfig};
use crate::world::{make_world, sample_utterance_with, teacher_dim, teacher_features, Dataset, StyleFactors, WorldConfig};

/// Relative-error budget of every gradient check.
pub const GRAD_TOL: f64 = 1e-5;
const FD_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check { name, passed, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} ({})", self.name, if self.passed { "pass" } else { "FAIL" }, self.detail)
    }
}

fn tiny_tts() -> TtsConfig {
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
        max_frames: 32,
        max_tokens: 8,
    }
}

fn tiny_style() -> StyleEncoderConfig {
    StyleEncoderConfig { width: 8, heads: 2, mlp_hidden: 12, audio_blocks: 1, text_blocks: 1, embed_dim: 6, head_hidden: 8, max_frames: 32 }
}

fn tiny_world_config() -> WorldConfig {
    WorldConfig { min_tokens: 2, max_tokens: 3, ..WorldConfig::default() }
}

/// Scales (1,1,1) reproduce v(all) within 1e-6 and (0,0,0) give v(none)
/// exactly, for random models, latents and times.
pub fn cfg_telescoping(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_tts();
    let mut worst: f64 = 0.0;
    let mut exact_none = true;
    for _ in 0..trials {
        let mut bundle = TtsBundle::new(&cfg, 6, 4, 13, rng.random());
        jitter_all(&mut bundle.store, 0.5, &mut rng);
        let lengths = [rng.random_range(1..6usize), rng.random_range(1..6usize)];
        let segs = Segments::from_lengths(&lengths);
        let rows = segs.total_rows();
        let mut field = GuidedField {
            tts: &bundle,
            content: normal_tensor(&[rows, cfg.width], 1.0, &mut rng),
            segs,
            spk: normal_tensor(&[2, cfg.speaker_dim], 1.0, &mut rng),
            style: normal_tensor(&[2, cfg.style_dim], 1.0, &mut rng),
            scales: GuidanceScales::default(),
            evaluations: 0,
        };
        let z: Tensor<f32> = normal_tensor(&[rows, 4], 1.0, &mut rng);
        let t: f64 = rng.random();
        let [none, text, text_spk, all] = field.branch_velocities(&z, t)?;
        let one = chained_cfg_combine(&none, &text, &text_spk, &all, &GuidanceScales::new(1.0, 1.0, 1.0));
        let zero = chained_cfg_combine(&none, &text, &text_spk, &all, &GuidanceScales::new(0.0, 0.0, 0.0));
        for (a, b) in one.iter().zip(&all) {
            worst = worst.max((a - b).abs() as f64);
        }
        exact_none &= zero == none;
    }
    Ok(Check::new("cfg telescoping", worst <= 1e-6 && exact_none, format!("{trials} trials, max |v(1,1,1) - v(all)| = {worst:e}, (0,0,0) == v(none): {exact_none}")))
}

/// Empirical frequencies of the four dropout configurations against the
/// analytic chain probabilities, per cell and by chi-square.
pub fn dropout_distribution(draws: usize, seed: u64) -> Result<Check> {
    let policy = DropoutPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 4];
    let mut unreachable = 0;
    for _ in 0..draws {
        match dropout_cell(policy.sample(&mut rng)) {
            Some(k) => counts[k] += 1,
            None => unreachable += 1,
        }
    }
    let p = policy.analytic();
    let n = draws as f64;
    let max_dev = counts.iter().zip(&p).map(|(&c, &q)| (c as f64 / n - q).abs()).fold(0.0, f64::max);
    let chi2: f64 = counts.iter().zip(&p).map(|(&c, &q)| (c as f64 - n * q).powi(2) / (n * q)).sum();
    let p_value = 1.0 - ChiSquared::new(3.0).expect("3 dof").cdf(chi2);
    let freqs: Vec<String> = counts.iter().map(|&c| format!("{:.4}", c as f64 / n)).collect();
    Ok(Check::new(
        "dropout distribution",
        max_dev <= 0.01 && p_value > 0.01 && unreachable == 0,
        format!("freqs [{}] vs {p:?}, max dev {max_dev:.4}, chi2 {chi2:.3}, p {p_value:.3}", freqs.join(", ")),
    ))
}

/// Euler on the single-point field lands on the point for several step counts.
pub fn euler_exactness(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Tensor<f32> = normal_tensor(&[12, 16], 1.5, &mut rng);
    let z0: Tensor<f32> = normal_tensor(&[12, 16], 1.0, &mut rng);
    let mut worst: f64 = 0.0;
    for steps in [1, 8, 32] {
        let z = euler_integrate(&mut SinglePointField { target: target.clone() }, z0.clone(), steps)?;
        for (a, b) in z.data().iter().zip(target.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    Ok(Check::new("euler exactness", worst <= 1e-5, format!("steps 1/8/32, max |z - a| = {worst:e}")))
}

/// InfoNCE on an orthonormal perfect-pair batch of 4 at tau = 1, and on a
/// batch of identical rows.
pub fn infonce_closed_forms() -> Result<Check> {
    let eval = |a: Tensor<f64>, b: Tensor<f64>, tau: f64| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(a), tape.constant(b));
        let t = tape.constant(Tensor::scalar(tau));
        let l = infonce_loss(&mut tape, a, b, t)?;
        Ok(tape.value(l).item())
    };
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let eye = Tensor::from_vec(4, 4, eye)?;
    let ortho = eval(eye.clone(), eye, 1.0)?;
    let n = 6;
    let row = [0.6, 0.8, 0.0];
    let same = Tensor::from_vec(n, 3, row.iter().copied().cycle().take(3 * n).collect())?;
    let uniform = eval(same.clone(), same, 0.07)?;
    let want = -(1f64.exp() / (1f64.exp() + 3.0)).ln();
    let ok = (ortho - 0.7437).abs() <= 1e-4 && (uniform - (n as f64).ln()).abs() <= 1e-6;
    Ok(Check::new("infonce closed forms", ok, format!("orthonormal {ortho:.6} (closed form {want:.6}), identical rows {uniform:.9} vs ln {n} = {:.9}", (n as f64).ln())))
}

fn grad_line(name: &str, err: f64) -> String {
    format!("{name} {err:.2e}")
}

/// Finite-difference checks in f64 of the flow, InfoNCE, multi-task and
/// alignment losses and of the full training objective.
pub fn gradient_checks(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    let mut record = |name: &str, err: f64| {
        worst = worst.max(err);
        lines.push(grad_line(name, err));
    };

    // flow loss with a partial mask, w.r.t. the prediction
    let u: Tensor<f64> = normal_tensor(&[5, 3], 1.0, &mut rng);
    let x: Tensor<f64> = normal_tensor(&[5, 3], 1.0, &mut rng);
    let mask = [true, false, true, true, false];
    let err = finite_difference_check(
        |tp, v| {
            let uc = tp.constant(u.clone());
            flow_loss(tp, v, uc, &mask)
        },
        &x,
        FD_EPS,
    )?;
    record("flow", err);

    // InfoNCE w.r.t. un-normalized audio rows (normalized on the tape)
    let a: Tensor<f64> = normal_tensor(&[4, 5], 1.0, &mut rng);
    let t: Tensor<f64> = normal_tensor(&[4, 5], 1.0, &mut rng);
    let err = finite_difference_check(
        |tp, v| {
            let ha = tp.l2_normalize_rows(v)?;
            let tc = tp.constant(t.clone());
            let ht = tp.l2_normalize_rows(tc)?;
            let tau = tp.constant(Tensor::scalar(0.3));
            infonce_loss(tp, ha, ht, tau)
        },
        &a,
        FD_EPS,
    )?;
    record("infonce", err);

    // multi-task losses w.r.t. the style encoder parameters
    let world = make_world(seed, &tiny_world_config())?;
    let mut store = ParamStore::<f64>::new();
    let enc = StyleEncoder::new(&mut store, &tiny_style(), world.channels(), &mut rng);
    jitter_all(&mut store, 0.1, &mut rng);
    let utts: Vec<_> = (0..4).map(|i| sample_utterance_with(&world, StyleFactors::from_combo(i * 11), &mut rng)).collect::<Result<_>>()?;
    let factors: Vec<StyleFactors> = utts.iter().map(|u| u.factors).collect();
    let stats = RegressionStats::fit(&factors);
    let report = param_gradient_check(
        &store,
        |tp, st| {
            let frames: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.frames).collect();
            let out = enc.forward_audio(tp, st, &frames)?;
            let (ce, mse) = multitask_losses(tp, st, &enc, out.h_pre, &factors, &stats)?;
            tp.add(ce, mse)
        },
        FD_EPS,
        3,
    )?;
    record("multitask", report.max_rel_error);

    // REPA w.r.t. projector and student features
    let mut pstore = ParamStore::<f64>::new();
    let proj = Linear::new(&mut pstore, "proj", 6, 23, true, Init::Fan, &mut rng);
    let student: Tensor<f64> = normal_tensor(&[5, 6], 1.0, &mut rng);
    let teacher: Tensor<f64> = normal_tensor(&[10, 23], 1.0, &mut rng);
    let err = finite_difference_check(
        |tp, v| {
            let tc = tp.constant(teacher.clone());
            repa_loss(tp, &pstore, &proj, v, tc)
        },
        &student,
        FD_EPS,
    )?;
    record("repa (features)", err);
    let report = param_gradient_check(
        &pstore,
        |tp, st| {
            let s = tp.constant(student.clone());
            let tc = tp.constant(teacher.clone());
            repa_loss(tp, st, &proj, s, tc)
        },
        FD_EPS,
        8,
    )?;
    record("repa (projector)", report.max_rel_error);

    // the full objective on a tiny batch, all four dropout configurations
    let cfg = tiny_tts();
    let data = Dataset::generate(&world, 6, rng.random())?;
    let bundle = TtsBundle::new(&cfg, world.vocab(), world.channels(), teacher_dim(world.vocab()), rng.random());
    let mut store64 = bundle.store.cast::<f64>();
    jitter_all(&mut store64, 0.1, &mut rng);
    let z0: Vec<Tensor<f32>> = data.utterances.iter().map(|u| u.frames.clone()).collect();
    let teacher: Vec<Tensor<f32>> = data.utterances.iter().map(|u| teacher_features(u, world.vocab())).collect();
    let style: Vec<Vec<f32>> = (0..data.len()).map(|_| normal_tensor::<f32, _>(&[cfg.style_dim], 1.0, &mut rng).into_data()).collect();
    let items = [0, 1, 2, 3];
    let refs = [4, 5, 1, 0];
    let conds = [ConditionSet::ALL, ConditionSet::TEXT_SPK, ConditionSet::TEXT, ConditionSet::NONE];
    let samples: Vec<FlowSample> = items.iter().map(|&i| cfm_make_sample(&z0[i], &mut rng)).collect();
    let frozen = store64.clone();
    let report = param_gradient_check(
        &store64,
        |tp, st| Ok(build_batch_loss_split(tp, st, &frozen, &bundle, &data, &z0, &teacher, &style, &items, &refs, &conds, &samples, &LossWeights::default())?.0),
        FD_EPS,
        3,
    )?;
    record("full objective", report.max_rel_error);
    log::debug!("full objective: worst coordinate {}", report.worst_param);

    Ok(Check::new("gradient checks", worst <= GRAD_TOL, lines.join(", ")))
}

/// Every fast check in order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        cfg_telescoping(100, seed)?,
        dropout_distribution(100_000, seed)?,
        euler_exactness(seed)?,
        gradient_checks(seed)?,
        infonce_closed_forms()?,
    ])
}
