//! Acceptance suite. It trains the pilot configuration for several seeds,
//! which takes well over an hour on one core, so it is ignored by default:
//!
//! ```text
//! cargo test -p synthvox-core --test acceptance -- --ignored --nocapture
//! ```
//!
//! Prints one PASS/FAIL line per criterion as it finishes, a summary at the
//! end, and fails if any criterion failed. CSVs land in
//! `$CARGO_TARGET_TMPDIR/acceptance`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use synthvox_core::config::RunConfig;
use synthvox_core::eval::{csv_string, eval_generation, eval_ground_truth, guidance_sweep, timbre_leakage_check, Evaluation, Metrics, Modality, SweepAxis, CSV_HEADER};
use synthvox_core::pipeline::{ablation_run, build_world, eval_pairs, summarize, train_probes, train_style, train_tts, write_ablation_csv, AblationCache, AblationRow, Variant};
use synthvox_core::selftest::{self, Check};
use synthvox_core::style::{embedding_leakage, StyleModel};
use synthvox_core::world::{Probes, World};
use synthvox_core::Result;

const SEED: u64 = 7;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    secs: f64,
}

impl Outcome {
    fn line(&self) -> String {
        format!("[{}] {:>2}. {} ({:.1}s): {}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.secs, self.detail)
    }
}

struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    /// Run one criterion; an error counts as a failure with its message.
    fn run(&mut self, id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) {
        let t = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let o = Outcome { id, name, passed, detail, secs: t.elapsed().as_secs_f64() };
        println!("{}", o.line());
        self.outcomes.push(o);
    }

    fn skip(&mut self, id: usize, name: &'static str, why: &str) {
        let o = Outcome { id, name, passed: false, detail: format!("not run: {why}"), secs: 0.0 };
        println!("{}", o.line());
        self.outcomes.push(o);
    }
}

fn from_check(c: Check) -> (bool, String) {
    (c.passed, c.detail)
}

fn fmt_metrics(m: &Metrics) -> String {
    format!("emotion {:.3} energy {:.3} rate {:.3} speaker {:.3} content error {:.3}", m.emotion_acc, m.energy_acc, m.rate_acc, m.speaker_acc, m.content_error)
}

fn out_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Everything the end-to-end criteria share.
struct MainRun {
    style: StyleModel,
    audio: Evaluation,
    text: Evaluation,
    full_row: AblationRow,
}

fn main_run(world: &World, probes: &Probes, cfg: &RunConfig, dir: &Path) -> Result<MainRun> {
    let style = train_style(world, cfg)?;
    let tts = train_tts(world, &style, Some(probes), cfg, Some(&dir.join("main")))?;
    let pairs = eval_pairs(world, cfg)?;
    let syn = tts.synthesizer(&style);
    let audio = eval_generation(&syn, probes, &pairs, Modality::Audio, &cfg.sampler.scales, cfg.sampler.steps)?;
    let text = eval_generation(&syn, probes, &pairs, Modality::Text, &cfg.sampler.scales, cfg.sampler.steps)?;
    let mut rows = audio.rows.clone();
    rows.push(audio.mean.clone());
    rows.extend(text.rows.iter().cloned());
    rows.push(text.mean.clone());
    std::fs::write(dir.join("main_eval.csv"), csv_string(&rows))?;
    let full_row = AblationRow { variant: Variant::Full, seed: cfg.seed, metrics: text.mean.metrics, steps_to_content_03: tts.steps_to_content_error(0.3) };
    Ok(MainRun { style, audio, text, full_row })
}

/// A reduced run at full model size: style, TTS training and evaluation.
/// Returns the bytes of every CSV it produces.
fn determinism_run(world: &World, probes: &Probes, dir: &Path) -> Result<Vec<Vec<u8>>> {
    let mut cfg = RunConfig::default();
    cfg.style.steps = 60;
    cfg.tts.steps = 120;
    cfg.tts.early_eval_until = 0;
    cfg.tts.eval_every = 60;
    cfg.eval.pairs = 16;
    cfg.sampler.steps = 8;
    let style = train_style(world, &cfg)?;
    let tts = train_tts(world, &style, Some(probes), &cfg, Some(dir))?;
    let pairs = eval_pairs(world, &cfg)?;
    let syn = tts.synthesizer(&style);
    let mut evals = Vec::new();
    for m in [Modality::Audio, Modality::Text] {
        let ev = eval_generation(&syn, probes, &pairs, m, &cfg.sampler.scales, cfg.sampler.steps)?;
        evals.extend(ev.rows);
        evals.push(ev.mean);
    }
    Ok(vec![std::fs::read(dir.join("metrics.csv"))?, csv_string(&evals).into_bytes()])
}

#[test]
#[ignore = "trains the pilot configuration for three seeds; run with --ignored"]
fn acceptance() {
    let dir = out_dir();
    let cfg = RunConfig::default();
    let mut s = Suite { outcomes: Vec::new() };
    println!("acceptance artifacts in {}", dir.display());

    s.run(1, "chained CFG telescoping", || {
        let t = Instant::now();
        let (ok, d) = from_check(selftest::cfg_telescoping(100, SEED)?);
        let secs = t.elapsed().as_secs_f64();
        Ok((ok && secs < 60.0, format!("{d}, {secs:.1}s of 60s")))
    });
    s.run(2, "hierarchical dropout distribution", || Ok(from_check(selftest::dropout_distribution(100_000, SEED)?)));
    s.run(3, "Euler exactness", || Ok(from_check(selftest::euler_exactness(SEED)?)));
    s.run(4, "gradient fidelity", || {
        let t = Instant::now();
        let (ok, d) = from_check(selftest::gradient_checks(SEED)?);
        let secs = t.elapsed().as_secs_f64();
        Ok((ok && secs < 300.0, format!("{d}, {secs:.1}s of 300s")))
    });
    s.run(5, "InfoNCE closed forms", || Ok(from_check(selftest::infonce_closed_forms()?)));

    let world = build_world(&cfg).expect("world builds");
    let mut probes = None;
    s.run(6, "oracle probe gate", || {
        let p = train_probes(&world, &cfg)?;
        let gt = eval_ground_truth(&world, &p, &eval_pairs(&world, &cfg)?)?;
        let h = p.heldout.clone();
        probes = Some(p);
        Ok((
            true,
            format!(
                "held-out emotion {:.4} energy {:.4} rate {:.4} speaker {:.4} content error {:.4}; ground-truth eval pairs: {}",
                h.emotion,
                h.energy,
                h.rate,
                h.speaker,
                h.content_error,
                fmt_metrics(&gt.mean.metrics)
            ),
        ))
    });
    let Some(probes) = probes else {
        for (id, name) in [(7, "end-to-end controllability"), (8, "ablation directions"), (9, "guidance-sweep trends"), (10, "disentanglement"), (11, "determinism")] {
            s.skip(id, name, "probe gate failed");
        }
        report(&s);
        return;
    };

    let mut main = None;
    s.run(7, "end-to-end controllability", || {
        let t = Instant::now();
        let m = main_run(&world, &probes, &cfg, &dir)?;
        let secs = t.elapsed().as_secs_f64();
        let ok = |x: &Metrics| x.emotion_acc >= 0.8 && x.energy_acc >= 0.8 && x.rate_acc >= 0.8 && x.speaker_acc >= 0.8 && x.content_error <= 0.1;
        let passed = ok(&m.audio.mean.metrics) && ok(&m.text.mean.metrics) && cfg.tts.steps <= 30_000 && secs <= 7200.0;
        let detail = format!(
            "audio: {}; text: {}; {} TTS steps, {:.0}s of 7200s",
            fmt_metrics(&m.audio.mean.metrics),
            fmt_metrics(&m.text.mean.metrics),
            cfg.tts.steps,
            secs
        );
        main = Some(m);
        Ok((passed, detail))
    });
    let Some(main) = main else {
        for (id, name) in [(8, "ablation directions"), (9, "guidance-sweep trends"), (10, "disentanglement")] {
            s.skip(id, name, "main run failed");
        }
        s.run(11, "determinism", || determinism(&world, &probes, &dir));
        report(&s);
        return;
    };

    s.run(10, "disentanglement", || {
        let pairs = eval_pairs(&world, &cfg)?;
        let leak = timbre_leakage_check(&pairs, &main.audio, &main.text);
        let emb = embedding_leakage(&main.style, &world, 2000, 500, SEED)?;
        let passed = leak.difference <= 0.05 && emb.speaker_acc <= 0.3 && emb.emotion_acc >= 0.9;
        Ok((
            passed,
            format!(
                "speaker acc audio-style {:.3} vs text-style {:.3} (|diff| {:.3} <= 0.05; style-provider speaker rate {:.3}); embedding speaker probe {:.3} <= 0.3, emotion probe {:.3} >= 0.9",
                leak.speaker_acc_audio, leak.speaker_acc_text, leak.difference, leak.style_speaker_rate, emb.speaker_acc, emb.emotion_acc
            ),
        ))
    });

    s.run(9, "guidance-sweep trends", || {
        let pairs = eval_pairs(&world, &cfg)?;
        // a fresh synthesizer from the saved main checkpoint
        let (bundle, norm) = synthvox_core::checkpoint::open_bundle(&dir.join("main").join("tts"))?;
        let syn = synthvox_core::sampler::Synthesizer { tts: &bundle, norm: &norm, style: &main.style };
        let mut passed = true;
        let mut parts = Vec::new();
        for axis in [SweepAxis::Spk, SweepAxis::Style] {
            let rows = guidance_sweep(&syn, &probes, &pairs, Modality::Text, axis, &cfg.eval.grid, &cfg.sampler.scales, cfg.sampler.steps)?;
            let name = format!("{axis:?}").to_lowercase();
            std::fs::write(dir.join(format!("sweep_{name}.csv")), csv_string(&rows))?;
            let curve: Vec<f64> = rows.iter().map(|r| axis.target_metric(&r.metrics)).collect();
            let (lo, hi) = (curve[0], curve[curve.len() - 1]);
            passed &= rows.len() == cfg.eval.grid.len() && hi >= lo;
            parts.push(format!("{name}: {} over grid {:?}", curve.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "), cfg.eval.grid));
        }
        Ok((passed, parts.join("; ")))
    });

    s.run(8, "ablation directions", || {
        let pairs = eval_pairs(&world, &cfg)?;
        let mut cache = AblationCache::default();
        cache.insert_style(Variant::Full, cfg.seed, main.style.clone());
        cache.insert_row(main.full_row.clone());
        let rows = ablation_run(&world, &probes, &cfg, &Variant::ALL, &cfg.eval.ablation_seeds, &pairs, Some(&dir.join("ablation")), &mut cache)?;
        let mut csv = Vec::new();
        write_ablation_csv(&mut csv, &rows)?;
        std::fs::write(dir.join("ablation.csv"), &csv)?;
        println!("{}", String::from_utf8_lossy(&csv));
        let med = summarize(&rows);
        let get = |v: Variant| med.iter().find(|m| m.variant == v).expect("variant summarized");
        let (full, nosup, norepa) = (get(Variant::Full), get(Variant::NoSup), get(Variant::NoRepa));
        let sup_ok = nosup.median.emotion_acc <= full.median.emotion_acc - 0.03;
        let repa_ok = norepa.median.content_error >= full.median.content_error;
        let speed_ok = full.median_steps_to_content_03 < norepa.median_steps_to_content_03;
        let steps = |s: usize| if s == usize::MAX { "never".to_string() } else { s.to_string() };
        Ok((
            cfg.eval.ablation_seeds.len() >= 3 && sup_ok && repa_ok && speed_ok,
            format!(
                "seeds {:?}; emotion full {:.3} vs w/o Sup. {:.3} (needs <= full - 0.03: {}); content error full {:.4} vs w/o REPA {:.4} (needs >=: {}); steps to content error 0.3 full {} vs w/o REPA {} (needs fewer: {})",
                cfg.eval.ablation_seeds,
                full.median.emotion_acc,
                nosup.median.emotion_acc,
                sup_ok,
                full.median.content_error,
                norepa.median.content_error,
                repa_ok,
                steps(full.median_steps_to_content_03),
                steps(norepa.median_steps_to_content_03),
                speed_ok
            ),
        ))
    });

    s.run(11, "determinism", || determinism(&world, &probes, &dir));
    report(&s);
}

fn determinism(world: &World, probes: &Probes, dir: &Path) -> Result<(bool, String)> {
    let a = determinism_run(world, probes, &dir.join("repeat-a"))?;
    let b = determinism_run(world, probes, &dir.join("repeat-b"))?;
    let same = a == b;
    let header_ok = String::from_utf8_lossy(&a[1]).lines().next() == Some(CSV_HEADER);
    Ok((same && header_ok, format!("training metrics.csv ({} bytes) and evaluation CSV ({} bytes) identical across two runs: {same}", a[0].len(), a[1].len())))
}

fn report(s: &Suite) {
    let mut sorted: Vec<&Outcome> = s.outcomes.iter().collect();
    sorted.sort_by_key(|o| o.id);
    println!("\n==== acceptance summary ====");
    for o in &sorted {
        println!("{}", o.line());
    }
    let failed: Vec<usize> = sorted.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("{} of {} criteria passed", sorted.len() - failed.len(), sorted.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
