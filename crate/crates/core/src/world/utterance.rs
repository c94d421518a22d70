use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{StyleFactors, World, NUM_EMOTIONS, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Style descriptor words: emotions, then energy levels, then rate levels.
/// Nothing here describes the speaker.
pub const STYLE_VOCAB: [&str; 11] = [
    "happy",
    "sad",
    "angry",
    "neutral",
    "fearful",
    "low-energy",
    "normal-energy",
    "high-energy",
    "slow",
    "normal-rate",
    "fast",
];

const ENERGY_BASE: usize = NUM_EMOTIONS;
const RATE_BASE: usize = NUM_EMOTIONS + NUM_LEVELS;

/// Descriptor token ids ordered `[emotion, energy, rate]`; training-time
/// dropout may remove the energy and rate words.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleText {
    pub tokens: Vec<usize>,
}

impl StyleText {
    pub fn from_factors(f: StyleFactors) -> Self {
        StyleText { tokens: vec![f.emotion, ENERGY_BASE + f.energy, RATE_BASE + f.rate] }
    }

    /// Drop the energy and rate words independently with probability `p`.
    pub fn with_dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Self {
        let tokens = self
            .tokens
            .iter()
            .copied()
            .filter(|&t| t < ENERGY_BASE || rng.random::<f64>() >= p)
            .collect();
        StyleText { tokens }
    }

    pub fn parse(words: &str) -> Result<Self> {
        let tokens = words
            .split([',', ' '])
            .filter(|w| !w.is_empty())
            .map(|w| {
                STYLE_VOCAB
                    .iter()
                    .position(|v| v.eq_ignore_ascii_case(w))
                    .ok_or_else(|| Error::invalid("style_text", format!("unknown descriptor `{w}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(Error::invalid("style_text", "empty descriptor"));
        }
        Ok(StyleText { tokens })
    }

    pub fn words(&self) -> Vec<&'static str> {
        self.tokens.iter().map(|&t| STYLE_VOCAB[t]).collect()
    }
}

/// Everything needed to regenerate an utterance's frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceDesc {
    pub content: Vec<usize>,
    pub factors: StyleFactors,
    pub speaker: usize,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub content: Vec<usize>,
    pub durations: Vec<usize>,
    /// `T x D`
    pub frames: Tensor<f32>,
    pub factors: StyleFactors,
    pub speaker: usize,
    pub noise_seed: u64,
}

impl Utterance {
    pub fn render(world: &World, desc: &UtteranceDesc) -> Result<Self> {
        let frames = world.render_frames(&desc.content, desc.factors, desc.speaker, desc.noise_seed)?;
        Ok(Utterance {
            content: desc.content.clone(),
            durations: vec![desc.factors.duration(); desc.content.len()],
            frames,
            factors: desc.factors,
            speaker: desc.speaker,
            noise_seed: desc.noise_seed,
        })
    }

    pub fn desc(&self) -> UtteranceDesc {
        UtteranceDesc { content: self.content.clone(), factors: self.factors, speaker: self.speaker, noise_seed: self.noise_seed }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn style_text(&self) -> StyleText {
        StyleText::from_factors(self.factors)
    }
}

pub fn sample_content<R: Rng + ?Sized>(world: &World, rng: &mut R) -> Vec<usize> {
    let len = rng.random_range(world.config.min_tokens..=world.config.max_tokens);
    (0..len).map(|_| rng.random_range(0..world.vocab())).collect()
}

/// Uniform factors, length, tokens and speaker; the paired descriptor is a
/// deterministic function of the factors.
pub fn sample_utterance<R: Rng + ?Sized>(world: &World, rng: &mut R) -> Result<(Utterance, StyleText)> {
    let factors = StyleFactors::sample(rng);
    let content = sample_content(world, rng);
    let speaker = rng.random_range(0..world.num_speakers());
    let noise_seed = rng.random::<u64>();
    let utt = Utterance::render(world, &UtteranceDesc { content, factors, speaker, noise_seed })?;
    let text = utt.style_text();
    Ok((utt, text))
}

/// Like `sample_utterance` with the style factors fixed.
pub fn sample_utterance_with<R: Rng + ?Sized>(world: &World, factors: StyleFactors, rng: &mut R) -> Result<Utterance> {
    let content = sample_content(world, rng);
    let speaker = rng.random_range(0..world.num_speakers());
    let noise_seed = rng.random::<u64>();
    Utterance::render(world, &UtteranceDesc { content, factors, speaker, noise_seed })
}

/// Re-render with the given speaker's gain/offset; everything else kept.
pub fn timbre_perturb_to(world: &World, utt: &Utterance, speaker: usize) -> Result<Utterance> {
    let mut desc = utt.desc();
    desc.speaker = speaker;
    Utterance::render(world, &desc)
}

/// Re-render with a uniformly chosen different speaker.
pub fn timbre_perturb<R: Rng + ?Sized>(world: &World, utt: &Utterance, rng: &mut R) -> Result<Utterance> {
    let s = world.num_speakers();
    if s < 2 {
        return Err(Error::invalid("timbre_perturb", "needs at least two speakers"));
    }
    let mut other = rng.random_range(0..s - 1);
    if other >= utt.speaker {
        other += 1;
    }
    timbre_perturb_to(world, utt, other)
}
