//! The `synthvox` command line. Every command works inside one run
//! directory (`$SYNTHVOX_RUNS/<run>`, default `runs/default`) holding the
//! resolved configuration, logs, CSV metrics and checkpoints.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use synthvox_core::checkpoint::{manifest_path, open_bundle, open_style, save_style};
use synthvox_core::config::RunConfig;
use synthvox_core::eval::{
    csv_string, eval_generation, eval_ground_truth, generate, guidance_sweep, modality_consistency, timbre_leakage_check, Metrics, Modality, SweepAxis, TimbreLeakage,
};
use synthvox_core::pipeline::{ablation_run, AblationCache, build_world, eval_pairs, style_seed, summarize, train_probes, train_tts, tts_seed, write_ablation_csv, Variant};
use synthvox_core::sampler::Synthesizer;
use synthvox_core::selftest;
use synthvox_core::style::{embedding_leakage, train_style_encoder, StyleModel};
use synthvox_core::training::{training_dataset, Normalizer};
use synthvox_core::tts::TtsBundle;
use synthvox_core::world::{Probes, World, WorldConfig};
use synthvox_core::{Error, Result};

/// Environment variable naming the root of all run directories.
pub const RUNS_ENV: &str = "SYNTHVOX_RUNS";
const DEFAULT_RUNS_ROOT: &str = "runs";
const SELFTEST_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "synthvox", version, about = "Train, sample and evaluate the controllable synthetic speech model")]
#[command(after_help = "Any configuration field can be overridden with --dotted.key=value, e.g. --tts.steps=500 --sampler.scales.s_style=4.")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory name under the runs root.
    #[arg(long, global = true, default_value = "default", value_name = "NAME")]
    run: String,
    /// Start a new run from the small smoke-test preset instead of the defaults.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the world, export the training-set manifest and train the oracle probes.
    GenWorld,
    /// Train the style encoder.
    TrainStyle,
    /// Train the TTS model (needs the style encoder and probes).
    TrainTts,
    /// Synthesize the first evaluation pairs and write their frames.
    Synth {
        #[arg(long, default_value = "text")]
        modality: Modality,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Cross-speaker evaluation with audio and text prompts.
    Eval,
    /// Vary one guidance scale over the configured grid.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, default_value = "text")]
        modality: Modality,
    },
    /// Train and evaluate the full model and both ablations over the configured seeds.
    Ablate,
    /// Run the invariant suite.
    Selftest,
}

/// Flags clap parses itself; every other `--key=value` is a config override.
const CLI_FLAGS: [&str; 9] = ["config", "run", "smoke", "modality", "count", "axis", "help", "version", "h"];

/// Separate `--dotted.key=value` overrides from the arguments clap sees.
pub fn split_overrides<I: IntoIterator<Item = OsString>>(args: I) -> (Vec<OsString>, Vec<String>) {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let s = a.to_string_lossy();
        if let Some(body) = s.strip_prefix("--") {
            if let Some((key, _)) = body.split_once('=') {
                if !CLI_FLAGS.contains(&key) {
                    overrides.push(body.to_string());
                    continue;
                }
            }
        }
        keep.push(a);
    }
    (keep, overrides)
}

/// Exit status for an error: 2 usage/config, 3 missing prerequisite, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Missing(_) => 3,
        _ => 1,
    }
}

/// Parse `argv` (program name first), run the command, return the exit code.
pub fn run_command<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let (args, overrides) = split_overrides(argv);
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("run `synthvox --help` for usage");
            }
            exit_code(&e)
        }
    }
}

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_ROOT))
}

fn run_dir(name: &str) -> Result<PathBuf> {
    if name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\']) {
        return Err(Error::Config(format!("invalid run name `{name}`")));
    }
    Ok(runs_root().join(name))
}

/// Config file, else the run's stored config, else a preset; then overrides.
fn resolve_config(common: &Common, dir: &Path, overrides: &[String]) -> Result<RunConfig> {
    let stored = dir.join("config.json");
    let mut cfg = if let Some(p) = &common.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        RunConfig::from_json(&text)?
    } else if stored.exists() {
        RunConfig::from_json(&fs::read_to_string(&stored)?)?
    } else if common.smoke {
        RunConfig::smoke()
    } else {
        RunConfig::default()
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Log lines go to stderr and to the run's `log.txt`.
struct Tee(fs::File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.0.flush()
    }
}

fn init_logging(log_file: Option<&Path>) -> Result<()> {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Some(p) = log_file {
        let f = fs::OpenOptions::new().create(true).append(true).open(p)?;
        b.target(env_logger::Target::Pipe(Box::new(Tee(f))));
    }
    // a second initialization in the same process keeps the first logger
    let _ = b.try_init();
    Ok(())
}

fn dispatch(cli: Cli, overrides: &[String]) -> Result<()> {
    if let Command::Selftest = cli.command {
        if !overrides.is_empty() {
            return Err(Error::Config("selftest takes no configuration overrides".into()));
        }
        init_logging(None)?;
        return cmd_selftest();
    }
    let dir = run_dir(&cli.common.run)?;
    let cfg = resolve_config(&cli.common, &dir, overrides)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    init_logging(Some(&dir.join("log.txt")))?;
    log::info!("run directory {}", dir.display());
    let ctx = Ctx { cfg, dir };
    match cli.command {
        Command::GenWorld => ctx.gen_world(),
        Command::TrainStyle => ctx.train_style(),
        Command::TrainTts => ctx.train_tts(),
        Command::Synth { modality, count } => ctx.synth(modality, count),
        Command::Eval => ctx.eval(),
        Command::Sweep { axis, modality } => ctx.sweep(axis, modality),
        Command::Ablate => ctx.ablate(),
        Command::Selftest => unreachable!("handled above"),
    }
}

fn cmd_selftest() -> Result<()> {
    let checks = selftest::run_all(SELFTEST_SEED)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Invalid { op: "selftest", msg: format!("{failed} of {} checks failed", checks.len()) });
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

/// Probes with the world they were trained on.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeFile {
    world_seed: u64,
    world: WorldConfig,
    probes: Probes,
}

#[derive(Serialize)]
struct EvalSummary {
    ground_truth: Metrics,
    audio: Metrics,
    text: Metrics,
    modality_consistency: f64,
    timbre_leakage: TimbreLeakage,
}

#[derive(Serialize)]
struct SynthItem {
    pair_id: usize,
    modality: String,
    timbre_speaker: usize,
    style_speaker: usize,
    content: Vec<usize>,
    emotion: usize,
    energy: usize,
    rate: usize,
    frames: Vec<Vec<f32>>,
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn world(&self) -> Result<World> {
        build_world(&self.cfg)
    }

    fn probes(&self) -> Result<Probes> {
        let p = self.dir.join("probes.json");
        if !p.exists() {
            return Err(Error::Missing(format!("{} not found; run `synthvox gen-world` first", p.display())));
        }
        let f: ProbeFile = serde_json::from_str(&fs::read_to_string(&p)?)?;
        if f.world_seed != self.cfg.world_seed || f.world != self.cfg.world {
            return Err(Error::Config("probes.json was trained on a different world; rerun gen-world".into()));
        }
        Ok(f.probes)
    }

    fn style(&self) -> Result<StyleModel> {
        let prefix = self.dir.join("style");
        if !manifest_path(&prefix).exists() {
            return Err(Error::Missing(format!("style checkpoint {} not found; run `synthvox train-style` first", manifest_path(&prefix).display())));
        }
        open_style(&prefix)
    }

    fn tts(&self) -> Result<(TtsBundle, Normalizer)> {
        let prefix = self.dir.join("tts");
        if !manifest_path(&prefix).exists() {
            return Err(Error::Missing(format!("TTS checkpoint {} not found; run `synthvox train-tts` first", manifest_path(&prefix).display())));
        }
        open_bundle(&prefix)
    }

    fn gen_world(&self) -> Result<()> {
        let world = self.world()?;
        let data = training_dataset(&world, &self.cfg.tts, tts_seed(self.cfg.seed))?;
        fs::write(self.dir.join("dataset.json"), serde_json::to_string(&data.manifest(&world))?)?;
        let probes = train_probes(&world, &self.cfg)?;
        let h = &probes.heldout;
        println!(
            "probe held-out accuracy: emotion {:.4} energy {:.4} rate {:.4} speaker {:.4} content error {:.4}",
            h.emotion, h.energy, h.rate, h.speaker, h.content_error
        );
        let file = ProbeFile { world_seed: self.cfg.world_seed, world: self.cfg.world.clone(), probes };
        fs::write(self.dir.join("probes.json"), serde_json::to_string(&file)?)?;
        println!("wrote {} utterance descriptors and probes to {}", data.len(), self.dir.display());
        Ok(())
    }

    fn train_style(&self) -> Result<()> {
        let world = self.world()?;
        let (model, metrics) = train_style_encoder(&world, &self.cfg.style, style_seed(self.cfg.seed))?;
        let mut csv = String::from("step,total,l_con,l_ce,l_mse,tau\n");
        for h in &metrics.history {
            csv.push_str(&format!("{},{},{},{},{},{}\n", h.step, h.total, h.con, h.ce, h.mse, h.tau));
        }
        fs::write(self.dir.join("style_metrics.csv"), csv)?;
        save_style(&self.dir.join("style"), &model)?;
        let leak = embedding_leakage(&model, &world, 2000, 500, style_seed(self.cfg.seed))?;
        println!(
            "style encoder: retrieval top-1 {:.4}, speaker probe {:.4}, emotion probe {:.4}",
            metrics.retrieval_top1, leak.speaker_acc, leak.emotion_acc
        );
        Ok(())
    }

    fn train_tts(&self) -> Result<()> {
        let style = self.style()?;
        let probes = self.probes()?;
        let world = self.world()?;
        let tts = train_tts(&world, &style, Some(&probes), &self.cfg, Some(&self.dir))?;
        if let Some(last) = tts.evals.last() {
            println!("final held-out content error {:.4} at step {}", last.content_error, last.step);
        }
        match tts.steps_to_content_error(0.3) {
            Some(s) => println!("content error <= 0.3 first reached at step {s}"),
            None => println!("content error never reached 0.3"),
        }
        Ok(())
    }

    fn synth(&self, modality: Modality, count: usize) -> Result<()> {
        let style = self.style()?;
        let (bundle, norm) = self.tts()?;
        let world = self.world()?;
        let syn = Synthesizer { tts: &bundle, norm: &norm, style: &style };
        let pairs = eval_pairs(&world, &self.cfg)?;
        let pairs = &pairs[..count.min(pairs.len())];
        let frames = generate(&syn, pairs, modality, &self.cfg.sampler.scales, self.cfg.sampler.steps)?;
        let items: Vec<SynthItem> = pairs
            .iter()
            .zip(frames)
            .enumerate()
            .map(|(i, (p, f))| {
                let t = p.target_factors();
                SynthItem {
                    pair_id: i,
                    modality: modality.to_string(),
                    timbre_speaker: p.target_speaker(),
                    style_speaker: p.style.speaker,
                    content: p.content.clone(),
                    emotion: t.emotion,
                    energy: t.energy,
                    rate: t.rate,
                    frames: (0..f.rows()).map(|r| f.row(r).to_vec()).collect(),
                }
            })
            .collect();
        let out = self.dir.join(format!("synth_{modality}.json"));
        fs::write(&out, serde_json::to_string(&items)?)?;
        println!("wrote {} generations to {}", items.len(), out.display());
        Ok(())
    }

    fn eval(&self) -> Result<()> {
        let probes = self.probes()?;
        let style = self.style()?;
        let (bundle, norm) = self.tts()?;
        let world = self.world()?;
        let syn = Synthesizer { tts: &bundle, norm: &norm, style: &style };
        let pairs = eval_pairs(&world, &self.cfg)?;
        let gt = eval_ground_truth(&world, &probes, &pairs)?;
        let (scales, steps) = (&self.cfg.sampler.scales, self.cfg.sampler.steps);
        let audio = eval_generation(&syn, &probes, &pairs, Modality::Audio, scales, steps)?;
        let text = eval_generation(&syn, &probes, &pairs, Modality::Text, scales, steps)?;
        let mut rows = audio.rows.clone();
        rows.push(audio.mean.clone());
        rows.extend(text.rows.iter().cloned());
        rows.push(text.mean.clone());
        fs::write(self.dir.join("eval.csv"), csv_string(&rows))?;
        let summary = EvalSummary {
            ground_truth: gt.mean.metrics,
            audio: audio.mean.metrics,
            text: text.mean.metrics,
            modality_consistency: modality_consistency(&audio, &text)?,
            timbre_leakage: timbre_leakage_check(&pairs, &audio, &text),
        };
        fs::write(self.dir.join("eval_summary.json"), serde_json::to_string_pretty(&summary)?)?;
        for (name, m) in [("ground truth", &summary.ground_truth), ("audio prompt", &summary.audio), ("text prompt", &summary.text)] {
            println!("{}", metrics_line(name, m));
        }
        println!(
            "modality consistency {:.4}; speaker accuracy difference {:.4}",
            summary.modality_consistency, summary.timbre_leakage.difference
        );
        Ok(())
    }

    fn sweep(&self, axis: SweepAxis, modality: Modality) -> Result<()> {
        let probes = self.probes()?;
        let style = self.style()?;
        let (bundle, norm) = self.tts()?;
        let world = self.world()?;
        let syn = Synthesizer { tts: &bundle, norm: &norm, style: &style };
        let pairs = eval_pairs(&world, &self.cfg)?;
        let rows = guidance_sweep(&syn, &probes, &pairs, modality, axis, &self.cfg.eval.grid, &self.cfg.sampler.scales, self.cfg.sampler.steps)?;
        let name = match axis {
            SweepAxis::Spk => "spk",
            SweepAxis::Style => "style",
        };
        let out = self.dir.join(format!("sweep_{name}.csv"));
        fs::write(&out, csv_string(&rows))?;
        for (s, r) in self.cfg.eval.grid.iter().zip(&rows) {
            println!("{}", metrics_line(&format!("{name} scale {s}"), &r.metrics));
        }
        println!("wrote {}", out.display());
        Ok(())
    }

    fn ablate(&self) -> Result<()> {
        let probes = self.probes()?;
        let world = self.world()?;
        let pairs = eval_pairs(&world, &self.cfg)?;
        let rows = ablation_run(&world, &probes, &self.cfg, &Variant::ALL, &self.cfg.eval.ablation_seeds, &pairs, Some(&self.dir.join("ablation")), &mut AblationCache::default())?;
        let mut f = fs::File::create(self.dir.join("ablation.csv"))?;
        write_ablation_csv(&mut f, &rows)?;
        for s in summarize(&rows) {
            println!("{}", metrics_line(&format!("{} (median)", s.variant.name()), &s.median));
        }
        Ok(())
    }
}

fn metrics_line(name: &str, m: &Metrics) -> String {
    format!(
        "{name}: emotion {:.4} energy {:.4} rate {:.4} speaker {:.4} content error {:.4}",
        m.emotion_acc, m.energy_acc, m.rate_acc, m.speaker_acc, m.content_error
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (keep, ov) = split_overrides(os(&["synthvox", "sweep", "--axis=style", "--tts.steps=5", "--run", "a", "--seed=3", "--config=c.json"]));
        assert_eq!(keep, os(&["synthvox", "sweep", "--axis=style", "--run", "a", "--config=c.json"]));
        assert_eq!(ov, vec!["tts.steps=5".to_string(), "seed=3".to_string()]);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Missing("x".into())), 3);
        assert_eq!(exit_code(&Error::ProbeGate("x".into())), 1);
    }

    #[test]
    fn run_names_cannot_escape_the_root() {
        assert!(run_dir("../x").is_err());
        assert!(run_dir("..").is_err());
        assert!(run_dir("a").is_ok());
    }
}
