use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tripledit_core::audio::{self, Waveform};
use tripledit_core::diffusion::{
    epoch_means, read_loss_curve, train_until, write_loss_curve, Arch, Checkpoint, InpaintVariant, Model,
    TrainConfig, TrainState,
};
use tripledit_core::metrics::{evaluate, EmbedderRegistry};
use tripledit_core::mel::GriffinLimOptions;
use tripledit_core::pipeline::{edit as run_edit, EditMode, EditRequest, LatentPipeline, MaskSpec};
use tripledit_core::record::GridRecord;
use tripledit_core::seed;
use tripledit_core::text::TextEncoder;
use tripledit_core::triplet::{build_dataset as build, write_synthetic_corpus, Corpus, DatasetManifest, TaskMix};
use tripledit_core::Latent;

use crate::config::RunConfig;
use crate::{EditArgs, Sampler, Variant};

const CHECKPOINT_MAGIC: &str = "tripledit-checkpoint v1";

/// `model.ckpt` -> `model.loss.tsv`.
pub fn loss_curve_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.tsv")
}

pub fn synth_corpus(cfg: &RunConfig, out: &Path, count: usize) -> Result<()> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let sr = cfg.pipeline.mel.sample_rate;
    let manifest = write_synthetic_corpus(out, count, seed::derive_seed(cfg.seed, "cli/corpus"), sr)?;
    println!("wrote {count} clips, manifest {}", manifest.display());
    Ok(())
}

pub fn build_dataset(
    cfg: &RunConfig,
    corpus: Option<PathBuf>,
    out: &Path,
    total: Option<usize>,
    per_task: Option<usize>,
    mix: Option<String>,
) -> Result<()> {
    let corpus = corpus
        .or_else(|| cfg.corpus.clone())
        .context("no corpus given (use --corpus or the `corpus` key)")?;
    let corpus = Corpus::load(&corpus).with_context(|| format!("loading corpus {}", corpus.display()))?;
    let mix = match mix {
        Some(m) => TaskMix::parse(&m)?,
        None if per_task.is_some() => TaskMix::uniform(),
        None => cfg.task_mix()?,
    };
    let total = match (total, per_task) {
        (Some(t), _) => t,
        (None, Some(k)) => {
            let active = mix.counts(1_000_000).values().filter(|&&c| c > 0).count();
            k * active
        }
        (None, None) => cfg.dataset_total,
    };
    let clips = corpus.load_clips(cfg.triplet.sample_rate)?;
    let summary = build(&clips, &mix, total, seed::derive_seed(cfg.seed, "cli/dataset"), &cfg.triplet, out)?;
    println!("manifest: {}", summary.manifest.display());
    for (task, n) in &summary.per_task {
        println!("  {:<17} {n}", task.to_string());
    }
    println!("total: {} examples, {:.1} s of audio", summary.total, summary.total_duration_s);
    println!("digest: {}", summary.digest);
    Ok(())
}

fn train_config(cfg: &RunConfig, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: cfg.batch_size,
        seed: seed::derive_seed(cfg.seed, "cli/train"),
        p_drop: cfg.guidance.p_drop,
        optimizer: cfg.optimizer,
    }
}

pub fn train(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    out: &Path,
    steps: Option<usize>,
    until: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let steps = steps.unwrap_or(cfg.train_steps);
    let until = until.unwrap_or(steps).min(steps);
    let (mut state, mut curve) = match &resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let prior = loss_curve_path(path);
            let curve = if prior.exists() { read_loss_curve(&prior)? } else { Vec::new() };
            (ck.state, curve)
        }
        None => {
            let sched = cfg.schedule.build()?;
            let model = Model::new(cfg.arch()?, sched, seed::derive_seed(cfg.seed, "cli/init"))?;
            (TrainState::new(model), Vec::new())
        }
    };

    if !state.model.is_trainable() {
        Checkpoint::new(state, cfg.seed).save(out)?;
        println!("{} denoiser has nothing to train; wrote {}", cfg.arch, out.display());
        return Ok(());
    }

    let dataset = dataset
        .or_else(|| cfg.dataset.clone())
        .context("no dataset given (use --dataset or the `dataset` key)")?;
    let manifest = DatasetManifest::load(&dataset)?;
    let text_cfg = text_config_for(cfg, state.model.arch());
    let encoder = TextEncoder::new(text_cfg);
    let pipe = LatentPipeline::new(cfg.pipeline)?;
    let data = pipe.load_training_set(&manifest, &encoder)?;
    let tc = train_config(cfg, steps);
    let start = state.step;
    train_until(&data, &mut state, encoder.null(), &tc, until)?;
    curve.extend(state.loss_curve.iter().copied());

    Checkpoint::new(state.clone(), cfg.seed).save(out)?;
    write_loss_curve(&loss_curve_path(out), &curve)?;
    let spe = tc.steps_per_epoch(data.len());
    println!(
        "trained steps {}..{} on {} examples ({} steps per epoch)",
        start,
        state.step,
        data.len(),
        spe
    );
    for (i, m) in epoch_means(&curve, spe).iter().enumerate() {
        println!("  epoch {i:>3}  mean loss {m:.5}");
    }
    if let Some((_, l)) = curve.last() {
        println!("final loss: {l:.5}");
    }
    println!("checkpoint: {}", out.display());
    Ok(())
}

/// The text width is part of the trained model, so it overrides the config.
fn text_config_for(cfg: &RunConfig, arch: &Arch) -> tripledit_core::text::TextEncoderConfig {
    let mut t = cfg.text;
    if let Arch::Tiny(tiny) = arch {
        t.dim = tiny.text_dim;
    }
    t
}

fn conform_input(cfg: &RunConfig, path: &Path, conform: bool) -> Result<Waveform> {
    let sr = cfg.pipeline.mel.sample_rate;
    let clip_s = cfg.triplet.clip_s;
    let w = audio::read_wav_native(path).with_context(|| format!("reading {}", path.display()))?;
    if conform {
        let w = if w.sample_rate() == sr { w } else { audio::resample(&w, sr)? };
        return Ok(audio::pad_or_truncate(&w, clip_s)?);
    }
    if w.sample_rate() != sr {
        bail!(
            "{} is sampled at {} Hz but the model expects {sr} Hz; pass --conform to resample",
            path.display(),
            w.sample_rate()
        );
    }
    let want = audio::seconds_to_index(clip_s, sr);
    if w.len() != want {
        bail!(
            "{} is {:.3} s long but clips are {clip_s} s; pass --conform to pad or trim",
            path.display(),
            w.duration_s()
        );
    }
    Ok(w)
}

pub fn edit(cfg: &RunConfig, a: EditArgs) -> Result<()> {
    let ckpt_path = a
        .checkpoint
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .context("no checkpoint given (use --checkpoint or the `checkpoint` key)")?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let model = ck.state.model;
    let encoder = TextEncoder::new(text_config_for(cfg, model.arch()));
    let pipe = LatentPipeline::new(cfg.pipeline)?;
    let input = conform_input(cfg, &a.input, a.conform)?;

    let variant = match a.variant {
        Variant::Rough => InpaintVariant::Rough,
        Variant::Precise => InpaintVariant::Precise,
        Variant::WoText => InpaintVariant::WoText,
    };
    let mode = match a.sampler {
        Sampler::Ddpm => EditMode::Ddpm,
        Sampler::Sdedit => EditMode::Sdedit {
            n: a.sdedit_steps.unwrap_or(model.schedule().steps() / 2),
        },
        Sampler::Inpaint => {
            let path = a.mask.as_ref().context("--sampler inpaint needs --mask")?;
            EditMode::Inpaint {
                variant,
                mask: MaskSpec::load(path)?,
            }
        }
    };
    let guidance = a.guidance.unwrap_or(cfg.guidance.scale);
    if !(guidance >= 1.0) {
        bail!("--guidance must be at least 1, got {guidance}");
    }
    let req = EditRequest {
        input: &input,
        instruction: &a.instruction,
        mode,
        guidance,
        seed: seed::derive_seed(cfg.seed, "cli/edit"),
        griffin_lim: GriffinLimOptions {
            iterations: cfg.griffin_lim_iterations,
            seed: seed::derive_seed(cfg.seed, "cli/griffin-lim"),
            ..GriffinLimOptions::default()
        },
    };
    let out = run_edit(&pipe, &model, model.schedule(), &encoder, &req)?;
    audio::write_wav(&a.out, &out.waveform)?;

    if let Some(dir) = &a.dump_dir {
        std::fs::create_dir_all(dir)?;
        let meta = |stage: &str| vec![("stage".to_string(), stage.to_string())];
        out.mel_in.to_record().write(&dir.join("mel_in.tgrd"))?;
        out.mel_out.to_record().write(&dir.join("mel_out.tgrd"))?;
        out.z_in.to_record(meta("z_in")).write(&dir.join("z_in.tgrd"))?;
        out.z_out.to_record(meta("z_out")).write(&dir.join("z_out.tgrd"))?;
        if let Some(m) = &out.mask {
            m.to_latent().to_record(meta("mask")).write(&dir.join("mask.tgrd"))?;
        }
    }
    println!(
        "wrote {} ({:.2} s, latent {:?})",
        a.out.display(),
        out.waveform.duration_s(),
        out.z_out.shape()
    );
    Ok(())
}

fn wav_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig, outputs: &Path, references: &Path, out: Option<PathBuf>) -> Result<()> {
    let sr = cfg.pipeline.mel.sample_rate;
    let outs = wav_files(outputs)?;
    let refs = wav_files(references)?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (name, o) in &outs {
        match refs.get(name) {
            Some(r) => pairs.push((name.clone(), audio::read_wav(o, sr)?, audio::read_wav(r, sr)?)),
            None => skipped.push(name.clone()),
        }
    }
    skipped.extend(refs.keys().filter(|k| !outs.contains_key(*k)).cloned());
    for name in &skipped {
        eprintln!("warning: {name} has no counterpart; skipped");
    }
    if pairs.is_empty() {
        bail!("no output/reference pairs with matching file names");
    }
    let front = tripledit_core::mel::MelFrontend::new(cfg.pipeline.mel)?;
    let registry = EmbedderRegistry::with_builtins(cfg.pipeline.mel.n_mels);
    let mut report = evaluate(&pairs, &front, &registry, &cfg.eval)?;
    report.skipped = skipped;
    let json = report.to_json();
    println!("{json}");
    if let Some(path) = out {
        tripledit_core::io::atomic_write(&path, json.as_bytes())?;
    }
    Ok(())
}

fn stats(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    (lo, hi, if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn inspect(_cfg: &RunConfig, path: &Path) -> Result<()> {
    if path.is_dir() || path.file_name().is_some_and(|n| n == DatasetManifest::FILE_NAME) {
        let m = DatasetManifest::load(path)?;
        let mut per_task: BTreeMap<String, usize> = BTreeMap::new();
        for r in &m.records {
            *per_task.entry(r.task.to_string()).or_default() += 1;
        }
        println!("dataset: {} examples", m.records.len());
        for (t, n) in per_task {
            println!("  {t:<17} {n}");
        }
        println!("duration: {:.1} s", m.records.iter().map(|r| r.duration_s).sum::<f64>());
        return Ok(());
    }
    let mut head = [0u8; 64];
    let n = std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read(&mut head)?;
    let head = &head[..n];
    if head.starts_with(b"RIFF") {
        let w = audio::read_wav_native(path)?;
        println!(
            "wav: {} Hz, {} samples, {:.3} s, peak {:.4}, rms {:.4}",
            w.sample_rate(),
            w.len(),
            w.duration_s(),
            w.peak(),
            w.rms()
        );
    } else if head.starts_with(b"TGRD") {
        let rec = GridRecord::read(path)?;
        let (lo, hi, mean) = stats(rec.data.iter().map(|&v| v as f64));
        println!("grid record: {:?} dims {:?}", rec.kind, rec.dims);
        for (k, v) in &rec.meta {
            println!("  {k} = {v}");
        }
        println!("  min {lo:.4} max {hi:.4} mean {mean:.4}");
        if let Ok(z) = Latent::from_record(&rec) {
            println!("  rms {:.4}", z.norm() / (z.len().max(1) as f64).sqrt());
        }
    } else if head.starts_with(CHECKPOINT_MAGIC.as_bytes()) {
        let ck = Checkpoint::load(path)?;
        let m = &ck.state.model;
        println!("checkpoint: {} denoiser, {} parameters", m.arch().name(), m.params().len());
        println!("  arch {}", serde_json::to_string(m.arch())?);
        println!("  schedule steps {}", m.schedule().steps());
        println!("  trained steps {}, seed {}", ck.state.step, ck.seed);
    } else if head.starts_with(b"step\tloss") {
        let curve = read_loss_curve(path)?;
        let (lo, hi, mean) = stats(curve.iter().map(|(_, l)| *l));
        println!("loss curve: {} steps, min {lo:.5} max {hi:.5} mean {mean:.5}", curve.len());
        if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
            println!("  first {:.5} (step {}), last {:.5} (step {})", first.1, first.0, last.1, last.0);
        }
    } else {
        bail!("{}: not a WAV, grid record, checkpoint, loss curve or dataset", path.display());
    }
    Ok(())
}
