//! Seeded synthetic "speech world": latent frames generated from known
//! content, timbre and style factors, so every factor can be decoded back.

mod dataset;
mod probes;
mod teacher;
mod utterance;

pub use dataset::{Dataset, Manifest, MANIFEST_VERSION};
pub use probes::{decode_rate, fresh_utterances, pooled_features, Classifier, ContentDecode, FitConfig, DecodedFactors, ProbeAccuracy, ProbeConfig, Probes, GATE as PROBE_GATE};
pub use teacher::{teacher_dim, teacher_features};
pub use utterance::{sample_content, sample_utterance, sample_utterance_with, timbre_perturb, timbre_perturb_to, StyleText, Utterance, UtteranceDesc, STYLE_VOCAB};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_EMOTIONS: usize = 5;
pub const NUM_LEVELS: usize = 3;
pub const NUM_STYLE_COMBOS: usize = NUM_EMOTIONS * NUM_LEVELS * NUM_LEVELS;
pub const EMOTION_NAMES: [&str; NUM_EMOTIONS] = ["happy", "sad", "angry", "neutral", "fearful"];

/// Amplitude multiplier by energy level.
pub const ENERGY_AMPLITUDE: [f64; NUM_LEVELS] = [0.5, 1.0, 2.0];
/// Frames per token by rate level.
pub const RATE_DURATION: [usize; NUM_LEVELS] = [6, 4, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleFactors {
    pub emotion: usize,
    pub energy: usize,
    pub rate: usize,
}

impl StyleFactors {
    pub fn new(emotion: usize, energy: usize, rate: usize) -> Result<Self> {
        let f = StyleFactors { emotion, energy, rate };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.emotion >= NUM_EMOTIONS || self.energy >= NUM_LEVELS || self.rate >= NUM_LEVELS {
            return Err(Error::invalid("style_factors", format!("{self:?} out of range")));
        }
        Ok(())
    }

    pub fn amplitude(&self) -> f64 {
        ENERGY_AMPLITUDE[self.energy]
    }

    pub fn duration(&self) -> usize {
        RATE_DURATION[self.rate]
    }

    /// Index in `0..45`.
    pub fn combo(&self) -> usize {
        (self.emotion * NUM_LEVELS + self.energy) * NUM_LEVELS + self.rate
    }

    pub fn from_combo(i: usize) -> Self {
        StyleFactors { emotion: i / (NUM_LEVELS * NUM_LEVELS), energy: (i / NUM_LEVELS) % NUM_LEVELS, rate: i % NUM_LEVELS }
    }

    pub fn all() -> impl Iterator<Item = StyleFactors> {
        (0..NUM_STYLE_COMBOS).map(Self::from_combo)
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StyleFactors {
            emotion: rng.random_range(0..NUM_EMOTIONS),
            energy: rng.random_range(0..NUM_LEVELS),
            rate: rng.random_range(0..NUM_LEVELS),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub vocab: usize,
    pub channels: usize,
    pub pattern_len: usize,
    pub speakers: usize,
    pub noise: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub gain_low: f64,
    pub gain_high: f64,
    pub offset_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            vocab: 16,
            channels: 16,
            pattern_len: 8,
            speakers: 20,
            noise: 0.05,
            min_tokens: 4,
            max_tokens: 12,
            gain_low: 0.8,
            gain_high: 1.25,
            offset_scale: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    /// `vocab x channels`, unit-norm rows.
    pub codebook: Vec<Vec<f64>>,
    /// `emotions x pattern_len x channels`, orthonormal rows per emotion.
    pub patterns: Vec<Vec<Vec<f64>>>,
    pub speakers: Vec<Speaker>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Q factor (as rows) of a thin QR of `rows`, via modified Gram-Schmidt
/// with one re-orthogonalization pass.
fn orthonormal_rows(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..rows.len() {
        for _pass in 0..2 {
            for j in 0..i {
                let p = dot(&rows[i], &rows[j]);
                let (head, tail) = rows.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= p * y;
                }
            }
        }
        let n = dot(&rows[i], &rows[i]).sqrt();
        rows[i].iter_mut().for_each(|x| *x /= n);
    }
    rows
}

pub fn make_world(seed: u64, config: &WorldConfig) -> Result<World> {
    let c = config;
    if c.channels < 5 {
        return Err(Error::invalid("make_world", format!("channels = {} < 5", c.channels)));
    }
    if c.vocab == 0 || c.speakers == 0 || c.pattern_len == 0 || c.min_tokens == 0 || c.max_tokens < c.min_tokens {
        return Err(Error::invalid("make_world", "extents must be positive"));
    }
    if c.pattern_len > c.channels {
        return Err(Error::invalid("make_world", "pattern_len must not exceed channels for orthonormal rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codebook = (0..c.vocab)
        .map(|_| {
            let mut v = gaussian_vec(&mut rng, c.channels);
            let n = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect();
    let patterns = (0..NUM_EMOTIONS)
        .map(|_| orthonormal_rows((0..c.pattern_len).map(|_| gaussian_vec(&mut rng, c.channels)).collect()))
        .collect();
    let speakers = (0..c.speakers)
        .map(|_| {
            let gain = (0..c.channels).map(|_| rng.random_range(c.gain_low..c.gain_high)).collect();
            let offset = gaussian_vec(&mut rng, c.channels).into_iter().map(|x| x * c.offset_scale).collect();
            Speaker { gain, offset }
        })
        .collect();
    Ok(World { seed, config: config.clone(), codebook, patterns, speakers })
}

impl World {
    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn num_speakers(&self) -> usize {
        self.config.speakers
    }

    pub fn pattern_len(&self) -> usize {
        self.config.pattern_len
    }

    /// `T x D` frames for the given descriptor.
    pub fn render_frames(&self, content: &[usize], factors: StyleFactors, speaker: usize, noise_seed: u64) -> Result<Tensor<f32>> {
        self.render_frames_with_noise(content, factors, speaker, noise_seed, self.config.noise)
    }

    /// As `render_frames` with an explicit observation-noise level.
    pub fn render_frames_with_noise(
        &self,
        content: &[usize],
        factors: StyleFactors,
        speaker: usize,
        noise_seed: u64,
        sigma: f64,
    ) -> Result<Tensor<f32>> {
        factors.validate()?;
        if let Some(&tok) = content.iter().find(|&&t| t >= self.vocab()) {
            return Err(Error::invalid("render_frames", format!("token {tok} >= vocab {}", self.vocab())));
        }
        if speaker >= self.num_speakers() {
            return Err(Error::invalid("render_frames", format!("speaker {speaker} out of range")));
        }
        let d = self.channels();
        let k = self.pattern_len();
        let dur = factors.duration();
        let alpha = factors.amplitude();
        let spk = &self.speakers[speaker];
        let pattern = &self.patterns[factors.emotion];
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let t_total = content.len() * dur;
        let mut data = Vec::with_capacity(t_total * d);
        for phi in 0..t_total {
            let code = &self.codebook[content[phi / dur]];
            let pat = &pattern[phi % k];
            for ch in 0..d {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let x = spk.gain[ch] * (alpha * (code[ch] + pat[ch])) + spk.offset[ch] + sigma * eps;
                data.push(x as f32);
            }
        }
        Tensor::from_vec(t_total, d, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        make_world(7, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_same_world_bytes() {
        let a = serde_json::to_vec(&world()).unwrap();
        let b = serde_json::to_vec(&world()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&make_world(8, &WorldConfig::default()).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn codebook_rows_unit_norm() {
        for row in &world().codebook {
            assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn emotion_patterns_orthonormal() {
        for p in &world().patterns {
            for i in 0..p.len() {
                for j in 0..p.len() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot(&p[i], &p[j]) - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn narrow_world_is_rejected() {
        let cfg = WorldConfig { channels: 4, pattern_len: 4, ..Default::default() };
        assert!(make_world(0, &cfg).is_err());
    }

    #[test]
    fn noiseless_single_token_follows_formula() {
        let w = world();
        let f = StyleFactors::new(2, 1, 1).unwrap();
        let x = w.render_frames_with_noise(&[5], f, 3, 0, 0.0).unwrap();
        assert_eq!(x.rows(), 4);
        let spk = &w.speakers[3];
        for phi in 0..4 {
            for ch in 0..16 {
                let want = spk.gain[ch] * (w.codebook[5][ch] + w.patterns[2][phi][ch]) + spk.offset[ch];
                assert!((x.row(phi)[ch] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn doubling_energy_doubles_scaled_term() {
        let w = world();
        let lo = w.render_frames_with_noise(&[1, 2, 3], StyleFactors::new(0, 1, 1).unwrap(), 4, 9, 0.0).unwrap();
        let hi = w.render_frames_with_noise(&[1, 2, 3], StyleFactors::new(0, 2, 1).unwrap(), 4, 9, 0.0).unwrap();
        let beta = &w.speakers[4].offset;
        for r in 0..lo.rows() {
            for (ch, &off) in beta.iter().enumerate() {
                let a = lo.row(r)[ch] as f64 - off;
                let b = hi.row(r)[ch] as f64 - off;
                if b.abs() > 1e-3 {
                    assert!((a / b - 0.5).abs() < 1e-4, "{a} / {b}");
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let w = world();
        let f = StyleFactors::new(4, 0, 2).unwrap();
        let a = w.render_frames(&[0, 9, 9, 3], f, 11, 1234).unwrap();
        let b = w.render_frames(&[0, 9, 9, 3], f, 11, 1234).unwrap();
        assert_eq!(a, b);
        let c = w.render_frames(&[0, 9, 9, 3], f, 11, 1235).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn combo_index_round_trips() {
        for i in 0..NUM_STYLE_COMBOS {
            assert_eq!(StyleFactors::from_combo(i).combo(), i);
        }
    }
}
