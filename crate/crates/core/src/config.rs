//! Run configuration: one JSON document with every knob, dotted-path
//! overrides, unknown keys rejected.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::sampler::GuidanceScales;
use crate::style::{StyleEncoderConfig, StyleTrainConfig};
use crate::training::TtsTrainConfig;
use crate::tts::TtsConfig;
use crate::world::{ProbeConfig, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub scales: GuidanceScales,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { steps: 32, scales: GuidanceScales::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pairs: usize,
    pub grid: Vec<f64>,
    /// Seeds of the ablation runs.
    pub ablation_seeds: Vec<u64>,
    pub pair_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { pairs: 90, grid: vec![1.0, 2.0, 4.0, 6.0, 8.0], ablation_seeds: vec![1, 2, 3], pair_seed: 4242 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the synthetic world (speakers, token patterns).
    pub world_seed: u64,
    /// Seed of everything trained in the run.
    pub seed: u64,
    pub world: WorldConfig,
    pub probes: ProbeConfig,
    pub style: StyleTrainConfig,
    pub tts: TtsTrainConfig,
    pub sampler: SamplerSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world_seed: 11,
            seed: 1,
            world: WorldConfig::default(),
            probes: ProbeConfig::default(),
            style: StyleTrainConfig::default(),
            tts: TtsTrainConfig::default(),
            sampler: SamplerSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small models and budgets for quick end-to-end checks. Metrics of a
    /// smoke run are not expected to be good.
    pub fn smoke() -> Self {
        let mut c = RunConfig::default();
        c.style.encoder = StyleEncoderConfig { width: 16, heads: 2, mlp_hidden: 32, audio_blocks: 1, text_blocks: 1, embed_dim: 8, head_hidden: 16, max_frames: 128 };
        c.style.steps = 30;
        c.style.batch = 16;
        c.style.eval_trials = 2;
        c.tts.model = TtsConfig {
            width: 16,
            heads: 2,
            mlp_hidden: 32,
            text_blocks: 1,
            speaker_blocks: 1,
            dit_blocks: 2,
            student_block: 0,
            speaker_dim: 8,
            style_dim: 8,
            time_dim: 16,
            dur_hidden: 16,
            max_frames: 128,
            max_tokens: 32,
        };
        c.tts.n_utterances = 200;
        c.tts.steps = 40;
        c.tts.batch = 8;
        c.tts.eval_every = 20;
        c.tts.early_eval_every = 0;
        c.tts.eval_items = 4;
        c.tts.eval_sampler_steps = 2;
        c.sampler.steps = 4;
        c.eval.pairs = 6;
        c.eval.grid = vec![1.0, 4.0];
        c.eval.ablation_seeds = vec![1];
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key.path=value`. The value is read as JSON when it parses,
    /// as a string otherwise. The path must name an existing field.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown configuration key `{path}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    /// Apply a list of `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.tts.dropout.validate()?;
        self.sampler.scales.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if self.eval.grid.is_empty() || self.eval.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.grid must be non-empty and strictly ascending".into()));
        }
        if self.style.encoder.embed_dim != self.tts.model.style_dim {
            return Err(Error::Config(format!(
                "style.encoder.embed_dim ({}) must equal tts.model.style_dim ({})",
                self.style.encoder.embed_dim, self.tts.model.style_dim
            )));
        }
        if self.world.speakers < 2 {
            return Err(Error::Config("world.speakers must be at least 2".into()));
        }
        Ok(())
    }
}
