use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_world, sample_utterance, Utterance, UtteranceDesc, World, WorldConfig};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Dataset export: descriptors only; frames are always regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub world_seed: u64,
    pub world_config: WorldConfig,
    pub utterances: Vec<UtteranceDesc>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn generate(world: &World, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utterances = (0..n).map(|_| sample_utterance(world, &mut rng).map(|(u, _)| u)).collect::<Result<_>>()?;
        Ok(Dataset { utterances })
    }

    pub fn from_descs(world: &World, descs: &[UtteranceDesc]) -> Result<Self> {
        let utterances = descs.iter().map(|d| Utterance::render(world, d)).collect::<Result<_>>()?;
        Ok(Dataset { utterances })
    }

    pub fn manifest(&self, world: &World) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            world_seed: world.seed,
            world_config: world.config.clone(),
            utterances: self.utterances.iter().map(Utterance::desc).collect(),
        }
    }

    /// Rebuild both the world and every frame matrix from a manifest.
    pub fn from_manifest(m: &Manifest) -> Result<(World, Dataset)> {
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::invalid("manifest", format!("format version {} unsupported", m.format_version)));
        }
        let world = make_world(m.world_seed, &m.world_config)?;
        let ds = Dataset::from_descs(&world, &m.utterances)?;
        Ok((world, ds))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Utterance indices grouped by speaker id.
    pub fn by_speaker(&self, num_speakers: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_speakers];
        for (i, u) in self.utterances.iter().enumerate() {
            out[u.speaker].push(i);
        }
        out
    }

    /// Per-channel mean and standard deviation over every frame.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let d = self.utterances.first().map_or(0, |u| u.frames.cols());
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for u in &self.utterances {
            for r in 0..u.num_frames() {
                for (c, &x) in u.frames.row(r).iter().enumerate() {
                    sum[c] += x as f64;
                    sq[c] += (x as f64) * (x as f64);
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(1e-12)).sqrt() as f32).collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }
}
