//! End-to-end runs: world, oracle probes, style encoder, TTS model, and
//! the ablation study over them.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_style;
use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{build_eval_pairs, eval_generation, EvalPair, Metrics, Modality};
use crate::sampler::Synthesizer;
use crate::style::{train_style_encoder, StyleLossWeights, StyleModel};
use crate::training::{EvalPoint, Normalizer, TtsTrainer};
use crate::tts::TtsBundle;
use crate::world::{make_world, Probes, World};

/// Probes are oracles of the world, trained independently of run seeds.
pub const PROBE_SEED: u64 = 0x0bad_5eed;

pub fn build_world(cfg: &RunConfig) -> Result<World> {
    make_world(cfg.world_seed, &cfg.world)
}

pub fn train_probes(world: &World, cfg: &RunConfig) -> Result<Probes> {
    Probes::train(world, &cfg.probes, PROBE_SEED)
}

pub fn style_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2).wrapping_add(1)
}

pub fn tts_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2).wrapping_add(2)
}

pub fn train_style(world: &World, cfg: &RunConfig) -> Result<StyleModel> {
    let (model, metrics) = train_style_encoder(world, &cfg.style, style_seed(cfg.seed))?;
    log::info!("style encoder retrieval top-1 {:.4}", metrics.retrieval_top1);
    Ok(model)
}

pub struct TrainedTts {
    pub bundle: TtsBundle,
    pub norm: Normalizer,
    pub evals: Vec<EvalPoint>,
}

impl TrainedTts {
    pub fn synthesizer<'a>(&'a self, style: &'a StyleModel) -> Synthesizer<'a> {
        Synthesizer { tts: &self.bundle, norm: &self.norm, style }
    }

    pub fn steps_to_content_error(&self, threshold: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.content_error <= threshold).map(|e| e.step)
    }
}

pub fn train_tts(world: &World, style: &StyleModel, probes: Option<&Probes>, cfg: &RunConfig, run_dir: Option<&Path>) -> Result<TrainedTts> {
    let mut tr = TtsTrainer::new(world, style, &cfg.tts, tts_seed(cfg.seed))?;
    tr.run(probes, run_dir)?;
    Ok(TrainedTts { bundle: tr.bundle, norm: tr.norm, evals: tr.evals })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoSup,
    NoRepa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoSup, Variant::NoRepa];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSup => "w/o Sup.",
            Variant::NoRepa => "w/o REPA",
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoSup => c.style.weights = StyleLossWeights { lambda_c: 0.0, lambda_m: 0.0 },
            Variant::NoRepa => c.tts.weights.lambda_repa = 0.0,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Metrics,
    /// First evaluated training step with held-out content error <= 0.3.
    pub steps_to_content_03: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub median: Metrics,
    /// Runs that never reached the threshold count as `usize::MAX`.
    pub median_steps_to_content_03: usize,
}

/// Median of an odd or even sample (mean of the middle two).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_usize(xs: &[usize]) -> usize {
    let mut v = xs.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    Variant::ALL
        .iter()
        .filter(|v| rows.iter().any(|r| r.variant == **v))
        .map(|&v| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let m = |g: fn(&Metrics) -> f64| median(&sel.iter().map(|r| g(&r.metrics)).collect::<Vec<_>>());
            AblationSummary {
                variant: v,
                median: Metrics {
                    emotion_acc: m(|x| x.emotion_acc),
                    energy_acc: m(|x| x.energy_acc),
                    rate_acc: m(|x| x.rate_acc),
                    speaker_acc: m(|x| x.speaker_acc),
                    content_error: m(|x| x.content_error),
                },
                median_steps_to_content_03: median_usize(&sel.iter().map(|r| r.steps_to_content_03.unwrap_or(usize::MAX)).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "variant,seed,emotion_acc,energy_acc,rate_acc,speaker_acc,content_error,steps_to_content_0.3";

pub fn write_ablation_csv<W: Write>(mut out: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(out, "{ABLATION_HEADER}")?;
    let steps = |s: Option<usize>| s.map_or_else(|| "never".to_string(), |s| s.to_string());
    for r in rows {
        let m = &r.metrics;
        writeln!(out, "{},{},{},{},{},{},{},{}", r.variant.name(), r.seed, m.emotion_acc, m.energy_acc, m.rate_acc, m.speaker_acc, m.content_error, steps(r.steps_to_content_03))?;
    }
    for s in summarize(rows) {
        let m = &s.median;
        let st = if s.median_steps_to_content_03 == usize::MAX { None } else { Some(s.median_steps_to_content_03) };
        writeln!(out, "{},median,{},{},{},{},{},{}", s.variant.name(), m.emotion_acc, m.energy_acc, m.rate_acc, m.speaker_acc, m.content_error, steps(st))?;
    }
    Ok(())
}

/// Trained artifacts an ablation reuses instead of retraining. Keys are
/// seeds; runs are deterministic, so a cached entry equals a fresh one.
#[derive(Default)]
pub struct AblationCache {
    /// `(supervised, seed)`
    styles: HashMap<(bool, u64), StyleModel>,
    rows: HashMap<(Variant, u64), AblationRow>,
}

impl AblationCache {
    /// Style encoder trained for `variant` under `seed`.
    pub fn insert_style(&mut self, variant: Variant, seed: u64, model: StyleModel) {
        self.styles.insert((variant != Variant::NoSup, seed), model);
    }

    pub fn insert_row(&mut self, row: AblationRow) {
        self.rows.insert((row.variant, row.seed), row);
    }
}

/// Train each variant for each seed and evaluate it with text prompts.
/// The full and no-REPA variants of a seed share one style encoder.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    world: &World,
    probes: &Probes,
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    pairs: &[EvalPair],
    run_dir: Option<&Path>,
    cache: &mut AblationCache,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        for &v in variants {
            if let Some(r) = cache.rows.get(&(v, seed)) {
                log::info!("ablation: {} seed {seed} reused", v.name());
                rows.push(r.clone());
                continue;
            }
            let vc = v.apply(&base);
            let key = (v != Variant::NoSup, seed);
            if let Entry::Vacant(e) = cache.styles.entry(key) {
                e.insert(train_style(world, &vc)?);
            }
            let style = &cache.styles[&key];
            log::info!("ablation: {} seed {seed}", v.name());
            let dir = run_dir.map(|d| d.join(format!("{}-seed{seed}", v.name().replace(['/', ' ', '.'], ""))));
            if let Some(d) = &dir {
                save_style(&d.join("style"), style)?;
            }
            let tts = train_tts(world, style, Some(probes), &vc, dir.as_deref())?;
            let ev = eval_generation(&tts.synthesizer(style), probes, pairs, Modality::Text, &vc.sampler.scales, vc.sampler.steps)?;
            let row = AblationRow { variant: v, seed, metrics: ev.mean.metrics, steps_to_content_03: tts.steps_to_content_error(0.3) };
            cache.rows.insert((v, seed), row.clone());
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Pairs of the configured evaluation set.
pub fn eval_pairs(world: &World, cfg: &RunConfig) -> Result<Vec<EvalPair>> {
    build_eval_pairs(world, cfg.eval.pairs, cfg.eval.pair_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median_usize(&[usize::MAX, 5, 9]), 9);
    }

    #[test]
    fn variants_toggle_one_knob() {
        let c = RunConfig::default();
        assert_eq!(Variant::Full.apply(&c), c);
        let ns = Variant::NoSup.apply(&c);
        assert_eq!(ns.style.weights, StyleLossWeights { lambda_c: 0.0, lambda_m: 0.0 });
        assert_eq!(ns.tts, c.tts);
        let nr = Variant::NoRepa.apply(&c);
        assert_eq!(nr.tts.weights.lambda_repa, 0.0);
        assert_eq!(nr.style, c.style);
    }
}
