//! Cross-speaker style-transfer evaluation, guidance sweeps and the
//! consistency and leakage checks built on them.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{GuidanceScales, InferItem, StylePrompt, Synthesizer};
use crate::tensor::Tensor;
use crate::world::{sample_content, DecodedFactors, Probes, StyleFactors, StyleText, Utterance, UtteranceDesc, World, NUM_EMOTIONS, NUM_LEVELS};

pub const CSV_HEADER: &str = "pair_id,modality,s_text,s_spk,s_style,emotion_acc,energy_acc,rate_acc,speaker_acc,content_error";

/// Timbre from one speaker, style from an utterance of another, new content.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub timbre: Utterance,
    pub style: Utterance,
    pub content: Vec<usize>,
    pub seed: u64,
}

impl EvalPair {
    pub fn target_factors(&self) -> StyleFactors {
        self.style.factors
    }

    pub fn target_speaker(&self) -> usize {
        self.timbre.speaker
    }

    /// What a perfect system would output for this pair.
    pub fn ground_truth(&self, world: &World) -> Result<Utterance> {
        let desc = UtteranceDesc { content: self.content.clone(), factors: self.style.factors, speaker: self.timbre.speaker, noise_seed: self.seed };
        Utterance::render(world, &desc)
    }
}

/// The `k`-th factor combination of a sequence whose every prefix has each
/// marginal balanced to within one count, and whose 45-blocks cover every
/// combination once.
pub fn balanced_factors(k: usize) -> StyleFactors {
    let block = k / (NUM_EMOTIONS * NUM_LEVELS);
    StyleFactors { emotion: k % NUM_EMOTIONS, energy: k % NUM_LEVELS, rate: (k + block) % NUM_LEVELS }
}

/// `n` pairs with balanced style marginals and distinct speakers per pair.
/// All utterances are freshly rendered from `seed`.
pub fn build_eval_pairs(world: &World, n: usize, seed: u64) -> Result<Vec<EvalPair>> {
    let speakers = world.num_speakers();
    if speakers < 2 {
        return Err(Error::invalid("build_eval_pairs", "need at least two speakers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(n);
    for k in order {
        let a = rng.random_range(0..speakers);
        let b = (a + rng.random_range(1..speakers)) % speakers;
        let timbre = UtteranceDesc { content: sample_content(world, &mut rng), factors: StyleFactors::sample(&mut rng), speaker: a, noise_seed: rng.random() };
        let style = UtteranceDesc { content: sample_content(world, &mut rng), factors: balanced_factors(k), speaker: b, noise_seed: rng.random() };
        pairs.push(EvalPair {
            timbre: Utterance::render(world, &timbre)?,
            style: Utterance::render(world, &style)?,
            content: sample_content(world, &mut rng),
            seed: rng.random(),
        });
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            _ => Err(Error::Config(format!("unknown modality `{s}` (audio|text)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub emotion_acc: f64,
    pub energy_acc: f64,
    pub rate_acc: f64,
    pub speaker_acc: f64,
    pub content_error: f64,
}

/// One CSV row. `pair_id` is `None` for a mean over pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub pair_id: Option<usize>,
    pub modality: Modality,
    pub scales: GuidanceScales,
    pub metrics: Metrics,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let id = self.pair_id.map_or_else(|| "mean".to_string(), |i| i.to_string());
        let (s, m) = (&self.scales, &self.metrics);
        format!(
            "{id},{},{},{},{},{},{},{},{},{}",
            self.modality, s.s_text, s.s_spk, s.s_style, m.emotion_acc, m.energy_acc, m.rate_acc, m.speaker_acc, m.content_error
        )
    }
}

pub fn write_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

pub fn csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Per-pair outcome of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub modality: Modality,
    pub scales: GuidanceScales,
    pub decoded: Vec<DecodedFactors>,
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

/// Score decoded outputs against their pairs.
pub fn score(pairs: &[EvalPair], decoded: Vec<DecodedFactors>, modality: Modality, scales: GuidanceScales) -> Evaluation {
    let rows: Vec<MetricsRow> = pairs
        .iter()
        .zip(&decoded)
        .enumerate()
        .map(|(i, (p, d))| {
            let f = p.target_factors();
            let hit = |b: bool| if b { 1.0 } else { 0.0 };
            MetricsRow {
                pair_id: Some(i),
                modality,
                scales,
                metrics: Metrics {
                    emotion_acc: hit(d.factors.emotion == f.emotion),
                    energy_acc: hit(d.factors.energy == f.energy),
                    rate_acc: hit(d.factors.rate == f.rate),
                    speaker_acc: hit(d.speaker == p.target_speaker()),
                    content_error: d.content.error,
                },
            }
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let sum = |g: fn(&Metrics) -> f64| rows.iter().map(|r| g(&r.metrics)).sum::<f64>() / n;
    let mean = MetricsRow {
        pair_id: None,
        modality,
        scales,
        metrics: Metrics {
            emotion_acc: sum(|m| m.emotion_acc),
            energy_acc: sum(|m| m.energy_acc),
            rate_acc: sum(|m| m.rate_acc),
            speaker_acc: sum(|m| m.speaker_acc),
            content_error: sum(|m| m.content_error),
        },
    };
    Evaluation { modality, scales, decoded, rows, mean }
}

/// Synthesize every pair (timbre from `timbre`, style prompt from `style`
/// in the chosen modality, the pair's content) and decode with the probes.
pub fn eval_generation(syn: &Synthesizer, probes: &Probes, pairs: &[EvalPair], modality: Modality, scales: &GuidanceScales, steps: usize) -> Result<Evaluation> {
    probes.check_gate()?;
    let frames = generate(syn, pairs, modality, scales, steps)?;
    let decoded = frames.iter().zip(pairs).map(|(f, p)| probes.decode(f, &p.content)).collect();
    Ok(score(pairs, decoded, modality, *scales))
}

pub fn generate(syn: &Synthesizer, pairs: &[EvalPair], modality: Modality, scales: &GuidanceScales, steps: usize) -> Result<Vec<Tensor<f32>>> {
    let texts: Vec<StyleText> = pairs.iter().map(|p| p.style.style_text()).collect();
    let items: Vec<InferItem> = pairs
        .iter()
        .zip(&texts)
        .map(|(p, t)| InferItem {
            content: &p.content,
            speaker_ref: &p.timbre.frames,
            style: match modality {
                Modality::Audio => StylePrompt::Audio(&p.style.frames),
                Modality::Text => StylePrompt::Text(t),
            },
            seed: p.seed,
        })
        .collect();
    syn.infer(&items, scales, steps)
}

/// Probe the ground-truth renderings of the pairs; a ceiling for every metric.
pub fn eval_ground_truth(world: &World, probes: &Probes, pairs: &[EvalPair]) -> Result<Evaluation> {
    probes.check_gate()?;
    let decoded = pairs.iter().map(|p| Ok(probes.decode(&p.ground_truth(world)?.frames, &p.content))).collect::<Result<Vec<_>>>()?;
    Ok(score(pairs, decoded, Modality::Audio, GuidanceScales::new(0.0, 0.0, 0.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Spk,
    Style,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spk" | "speaker" => Ok(SweepAxis::Spk),
            "style" => Ok(SweepAxis::Style),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (spk|style)"))),
        }
    }
}

impl SweepAxis {
    /// The metric the axis is meant to control.
    pub fn target_metric(&self, m: &Metrics) -> f64 {
        match self {
            SweepAxis::Spk => m.speaker_acc,
            SweepAxis::Style => m.emotion_acc,
        }
    }
}

/// One mean row per grid point, varying one scale with the others fixed.
#[allow(clippy::too_many_arguments)]
pub fn guidance_sweep(
    syn: &Synthesizer,
    probes: &Probes,
    pairs: &[EvalPair],
    modality: Modality,
    axis: SweepAxis,
    grid: &[f64],
    fixed: &GuidanceScales,
    steps: usize,
) -> Result<Vec<MetricsRow>> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("guidance_sweep", "grid must be non-empty and strictly ascending"));
    }
    grid.iter()
        .map(|&s| {
            let mut scales = *fixed;
            match axis {
                SweepAxis::Spk => scales.s_spk = s,
                SweepAxis::Style => scales.s_style = s,
            }
            log::info!("sweep {axis:?} = {s}");
            Ok(eval_generation(syn, probes, pairs, modality, &scales, steps)?.mean)
        })
        .collect()
}

/// Fraction of pairs whose audio- and text-prompted generations decode to
/// the same style factors.
pub fn modality_consistency(audio: &Evaluation, text: &Evaluation) -> Result<f64> {
    if audio.decoded.len() != text.decoded.len() {
        return Err(Error::invalid("modality_consistency", "evaluations cover different pair sets"));
    }
    let n = audio.decoded.len();
    if n == 0 {
        return Ok(0.0);
    }
    let same = audio.decoded.iter().zip(&text.decoded).filter(|(a, b)| a.factors == b.factors).count();
    Ok(same as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimbreLeakage {
    pub speaker_acc_audio: f64,
    pub speaker_acc_text: f64,
    pub difference: f64,
    /// Fraction of audio-prompted outputs classified as the style
    /// provider's speaker. High values would mean the style prompt carries timbre.
    pub style_speaker_rate: f64,
}

pub fn timbre_leakage_check(pairs: &[EvalPair], audio: &Evaluation, text: &Evaluation) -> TimbreLeakage {
    let a = audio.mean.metrics.speaker_acc;
    let t = text.mean.metrics.speaker_acc;
    let n = pairs.len().max(1) as f64;
    let style_hits = pairs.iter().zip(&audio.decoded).filter(|(p, d)| d.speaker == p.style.speaker).count();
    TimbreLeakage { speaker_acc_audio: a, speaker_acc_text: t, difference: (a - t).abs(), style_speaker_rate: style_hits as f64 / n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_world, WorldConfig, NUM_STYLE_COMBOS};

    #[test]
    fn balanced_sequence_covers_combos_and_balances_prefixes() {
        let combos: std::collections::HashSet<_> = (0..NUM_STYLE_COMBOS).map(|k| balanced_factors(k).combo()).collect();
        assert_eq!(combos.len(), NUM_STYLE_COMBOS);
        let mut e = [0i64; NUM_EMOTIONS];
        let mut g = [0i64; NUM_LEVELS];
        let mut r = [0i64; NUM_LEVELS];
        for k in 0..500 {
            let f = balanced_factors(k);
            e[f.emotion] += 1;
            g[f.energy] += 1;
            r[f.rate] += 1;
            for c in [&e[..], &g[..], &r[..]] {
                assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "prefix {k}");
            }
        }
    }

    #[test]
    fn pairs_have_distinct_speakers_and_are_reproducible() {
        let world = make_world(3, &WorldConfig::default()).unwrap();
        let pairs = build_eval_pairs(&world, 30, 5).unwrap();
        assert!(pairs.iter().all(|p| p.timbre.speaker != p.style.speaker));
        assert_eq!(pairs, build_eval_pairs(&world, 30, 5).unwrap());
        let mut counts = [0; NUM_EMOTIONS];
        for p in &pairs {
            counts[p.target_factors().emotion] += 1;
        }
        assert_eq!(counts, [6; NUM_EMOTIONS]);
    }

    #[test]
    fn csv_rows_follow_the_header() {
        let row = MetricsRow { pair_id: None, modality: Modality::Text, scales: GuidanceScales::default(), metrics: Metrics { emotion_acc: 0.5, ..Metrics::default() } };
        let s = csv_string(&[row]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "mean,text,2,2,2,0.5,0,0,0,0");
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn parse_axis_and_modality() {
        assert_eq!("style".parse::<SweepAxis>().unwrap(), SweepAxis::Style);
        assert_eq!("text".parse::<Modality>().unwrap(), Modality::Text);
        assert!("both".parse::<Modality>().is_err());
    }
}
