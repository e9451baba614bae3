//! Synthesis of (instruction, input audio, output audio) triplets for the
//! five editing tasks.
//!
//! Every generator is a pure function of its source clips, a seed and a
//! [`TripletConfig`]. Each random choice draws from its own named stream
//! derived from the seed, so adding a draw to one stream never shifts another.

mod corpus;
mod dataset;

use rand::seq::IndexedRandom;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, TimeRegion, Waveform};
use crate::seed;
use crate::text::{CaptionPolicy, InstructionTemplate, Task, TemplateSet, TextError};

pub use corpus::{synth_clip, synth_clips, synth_kind_count, write_synthetic_corpus, Clip, Corpus, CorpusItem};
pub use dataset::{build_dataset, generate_examples, DatasetManifest, DatasetRecord, DatasetSummary, TaskMix};

#[derive(Debug, Error)]
pub enum TripletError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("no {0} templates available")]
    NoTemplates(Task),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("invalid triplet configuration: {0}")]
    Config(String),
    #[error("invariant violated for {task} triplet: {msg}")]
    Invariant { task: Task, msg: String },
    #[error("{0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TripletError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub sample_rate: u32,
    pub clip_s: f64,
    /// Linear gain applied to the inserted event.
    pub gain: f32,
    /// Longest event placed at a position; background events span the clip.
    pub event_max_s: f64,
    /// Bound on the offset difference between the two replacement insertions.
    pub replace_jitter_s: f64,
    pub inpaint_min_frac: f64,
    pub inpaint_max_frac: f64,
    pub inpaint_max_regions: usize,
    pub superres_cutoffs_hz: Vec<f64>,
    /// Peak that mixes are scaled to when they would otherwise clip.
    pub headroom_peak: f32,
    pub captions: CaptionPolicy,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            sample_rate: audio::DEFAULT_SAMPLE_RATE,
            clip_s: 10.0,
            gain: 1.0,
            event_max_s: 4.0,
            replace_jitter_s: 0.5,
            inpaint_min_frac: 0.05,
            inpaint_max_frac: 0.30,
            inpaint_max_regions: 2,
            superres_cutoffs_hz: vec![2000.0, 4000.0],
            headroom_peak: 0.99,
            captions: CaptionPolicy::default(),
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TripletError::Config(m.to_string()));
        if self.sample_rate == 0 || !(self.clip_s > 0.0) {
            return bad("sample rate and clip length must be positive");
        }
        if !(self.event_max_s > 0.0) || self.event_max_s > self.clip_s {
            return bad("event_max_s must lie in (0, clip_s]");
        }
        if !(self.gain.is_finite()) || !(self.replace_jitter_s >= 0.0) {
            return bad("gain must be finite and jitter non-negative");
        }
        if !(0.0 < self.inpaint_min_frac
            && self.inpaint_min_frac <= self.inpaint_max_frac
            && self.inpaint_max_frac * self.inpaint_max_regions as f64 <= 1.0)
            || self.inpaint_max_regions == 0
        {
            return bad("inpaint fractions must satisfy 0 < min <= max and max * regions <= 1");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.superres_cutoffs_hz.is_empty()
            || self.superres_cutoffs_hz.iter().any(|&c| !(c > 0.0 && c < nyquist))
        {
            return bad("super-resolution cutoffs must lie strictly inside (0, nyquist)");
        }
        if !(self.headroom_peak > 0.0 && self.headroom_peak < 1.0) {
            return bad("headroom_peak must lie in (0, 1)");
        }
        Ok(())
    }

    /// Clip length in samples.
    pub fn clip_len(&self) -> usize {
        audio::seconds_to_index(self.clip_s, self.sample_rate)
    }
}

/// Where an edit lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EditRegion {
    /// Union of time spans.
    Time { regions: Vec<TimeRegion> },
    /// Everything above `cutoff_hz` was removed from the input.
    Band { cutoff_hz: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_ids: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletExample {
    pub task: Task,
    pub instruction: String,
    pub input: Waveform,
    pub output: Waveform,
    pub edit_region: EditRegion,
    pub provenance: Provenance,
}

/// Placement implied by the wording of an add template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Beginning,
    Middle,
    End,
    Background,
    Anywhere,
}

impl Position {
    pub fn from_template(template: &str) -> Self {
        let words: Vec<String> = template
            .split(|c: char| !c.is_alphanumeric())
            .map(str::to_lowercase)
            .collect();
        let has = |w: &str| words.iter().any(|x| x == w);
        if has("background") {
            Position::Background
        } else if has("beginning") || has("start") {
            Position::Beginning
        } else if has("middle") {
            Position::Middle
        } else if has("end") {
            Position::End
        } else {
            Position::Anywhere
        }
    }
}

/// A clip forced to the configured length.
fn fitted(clip: &Clip, cfg: &TripletConfig) -> Result<Waveform> {
    if clip.audio.sample_rate() != cfg.sample_rate {
        return Err(AudioError::SampleRateMismatch(clip.audio.sample_rate(), cfg.sample_rate).into());
    }
    Ok(audio::pad_or_truncate(&clip.audio, cfg.clip_s)?)
}

/// The event as placed: trimmed to `event_max_s`, or padded to the whole clip
/// for background placement.
fn placed_event(clip: &Clip, position: Position, cfg: &TripletConfig) -> Result<Waveform> {
    if clip.audio.sample_rate() != cfg.sample_rate {
        return Err(AudioError::SampleRateMismatch(clip.audio.sample_rate(), cfg.sample_rate).into());
    }
    match position {
        Position::Background => Ok(audio::pad_or_truncate(&clip.audio, cfg.clip_s)?),
        _ => {
            let max = audio::seconds_to_index(cfg.event_max_s, cfg.sample_rate);
            if clip.audio.is_empty() {
                return Ok(Waveform::silence(cfg.event_max_s, cfg.sample_rate)?);
            }
            Ok(clip.audio.prefix(max))
        }
    }
}

fn offset_samples<R: Rng + ?Sized>(position: Position, clip_len: usize, event_len: usize, rng: &mut R) -> usize {
    let room = clip_len.saturating_sub(event_len);
    match position {
        Position::Beginning | Position::Background => 0,
        Position::End => room,
        Position::Middle => room / 2,
        Position::Anywhere => rng.random_range(0..=room),
    }
}

fn to_seconds(samples: usize, sample_rate: u32) -> f64 {
    samples as f64 / sample_rate as f64
}

/// Scale factor that keeps `sum` of the given layers below the headroom peak.
fn headroom_gain(layers: &[(&[f32], usize, f32)], len: usize, peak: f32) -> f32 {
    let mut acc = vec![0.0f32; len];
    for &(samples, offset, gain) in layers {
        for (o, &s) in acc[offset.min(len)..].iter_mut().zip(samples) {
            *o += gain * s;
        }
    }
    let max = acc.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if max > peak {
        peak / max
    } else {
        1.0
    }
}

fn pick_template<'a>(set: &'a TemplateSet, task: Task, stream: &str, seed: u64) -> Result<&'a InstructionTemplate> {
    let options = set.for_task(task);
    let mut rng = seed::rng_for(seed, stream);
    options.choose(&mut rng).copied().ok_or(TripletError::NoTemplates(task))
}

fn fill(t: &InstructionTemplate, caption: &str) -> Result<String> {
    let caps: Vec<&str> = (0..t.slots()).map(|_| caption).collect();
    Ok(t.fill(&caps)?)
}

/// The shared construction behind add and drop: `(A, A + B, template, region)`.
struct Overlay {
    clean: Waveform,
    mixed: Waveform,
    template: InstructionTemplate,
    region: TimeRegion,
}

fn overlay(a: &Clip, b: &Clip, seed: u64, cfg: &TripletConfig, set: &TemplateSet) -> Result<Overlay> {
    cfg.validate()?;
    let template = pick_template(set, Task::Add, "triplet/add-template", seed)?.clone();
    let position = Position::from_template(template.text());
    let base = fitted(a, cfg)?;
    let event = placed_event(b, position, cfg)?;
    let mut rng = seed::rng_for(seed, "triplet/position");
    let offset = offset_samples(position, base.len(), event.len(), &mut rng);
    let g = headroom_gain(
        &[(base.samples(), 0, 1.0), (event.samples(), offset, cfg.gain)],
        base.len(),
        cfg.headroom_peak,
    );
    let clean = base.scaled(g);
    let event = event.scaled(g);
    let (mixed, region) = audio::mix_overlay(&clean, &event, to_seconds(offset, cfg.sample_rate), cfg.gain)?;
    Ok(Overlay {
        clean,
        mixed,
        template,
        region,
    })
}

/// Input is `A`, output is `A` with `B` mixed in at a position consistent
/// with the chosen template.
pub fn gen_add(a: &Clip, b: &Clip, seed: u64, cfg: &TripletConfig) -> Result<TripletExample> {
    gen_add_with(a, b, seed, cfg, &TemplateSet::builtin())
}

pub fn gen_add_with(a: &Clip, b: &Clip, seed: u64, cfg: &TripletConfig, set: &TemplateSet) -> Result<TripletExample> {
    let ov = overlay(a, b, seed, cfg, set)?;
    Ok(TripletExample {
        task: Task::Add,
        instruction: fill(&ov.template, &cfg.captions.shorten(&b.text))?,
        input: ov.clean,
        output: ov.mixed,
        edit_region: EditRegion::Time {
            regions: vec![ov.region],
        },
        provenance: Provenance {
            source_ids: vec![a.id.clone(), b.id.clone()],
            seed,
        },
    })
}

/// Mirror of [`gen_add`]: same mix, with input and output swapped.
pub fn gen_drop(a: &Clip, b: &Clip, seed: u64, cfg: &TripletConfig) -> Result<TripletExample> {
    gen_drop_with(a, b, seed, cfg, &TemplateSet::builtin())
}

pub fn gen_drop_with(a: &Clip, b: &Clip, seed: u64, cfg: &TripletConfig, set: &TemplateSet) -> Result<TripletExample> {
    let ov = overlay(a, b, seed, cfg, set)?;
    let template = pick_template(set, Task::Drop, "triplet/drop-template", seed)?;
    Ok(TripletExample {
        task: Task::Drop,
        instruction: fill(template, &cfg.captions.shorten(&b.text))?,
        input: ov.mixed,
        output: ov.clean,
        edit_region: EditRegion::Time {
            regions: vec![ov.region],
        },
        provenance: Provenance {
            source_ids: vec![a.id.clone(), b.id.clone()],
            seed,
        },
    })
}

/// Input has `B` inserted into `A`, output has `C` inserted at nearly the
/// same offset.
pub fn gen_replace(a: &Clip, b: &Clip, c: &Clip, seed: u64, cfg: &TripletConfig) -> Result<TripletExample> {
    gen_replace_with(a, b, c, seed, cfg, &TemplateSet::builtin())
}

pub fn gen_replace_with(
    a: &Clip,
    b: &Clip,
    c: &Clip,
    seed: u64,
    cfg: &TripletConfig,
    set: &TemplateSet,
) -> Result<TripletExample> {
    cfg.validate()?;
    if a.id == b.id || a.id == c.id {
        return Err(TripletError::Corpus(format!(
            "replacement needs a host distinct from both events (got {}, {}, {})",
            a.id, b.id, c.id
        )));
    }
    let template = pick_template(set, Task::Replace, "triplet/replace-template", seed)?;
    let base = fitted(a, cfg)?;
    let eb = placed_event(b, Position::Anywhere, cfg)?;
    let ec = placed_event(c, Position::Anywhere, cfg)?;
    let n = base.len();
    let mut rng = seed::rng_for(seed, "triplet/position");
    let t0 = offset_samples(Position::Anywhere, n, eb.len(), &mut rng);
    let jitter = audio::seconds_to_index(cfg.replace_jitter_s, cfg.sample_rate) as i64;
    let shift = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
    let room_c = n.saturating_sub(ec.len()) as i64;
    let t1 = (t0 as i64 + shift).clamp(0, room_c) as usize;

    let g = headroom_gain(
        &[(base.samples(), 0, 1.0), (eb.samples(), t0, cfg.gain)],
        n,
        cfg.headroom_peak,
    )
    .min(headroom_gain(
        &[(base.samples(), 0, 1.0), (ec.samples(), t1, cfg.gain)],
        n,
        cfg.headroom_peak,
    ));
    let base = base.scaled(g);
    let (input, rb) = audio::insert_at(&base, &eb.scaled(g), to_seconds(t0, cfg.sample_rate), cfg.gain)?;
    let (output, rc) = audio::insert_at(&base, &ec.scaled(g), to_seconds(t1, cfg.sample_rate), cfg.gain)?;
    let cap_b = cfg.captions.shorten(&b.text);
    let cap_c = cfg.captions.shorten(&c.text);
    Ok(TripletExample {
        task: Task::Replace,
        instruction: template.fill(&[&cap_b, &cap_c])?,
        input,
        output,
        edit_region: EditRegion::Time {
            regions: vec![rb, rc],
        },
        provenance: Provenance {
            source_ids: vec![a.id.clone(), b.id.clone(), c.id.clone()],
            seed,
        },
    })
}

/// Non-overlapping mask spans, each a fraction of the clip in the configured range.
pub fn draw_mask_regions<R: Rng + ?Sized>(rng: &mut R, len: usize, cfg: &TripletConfig) -> Result<Vec<std::ops::Range<usize>>> {
    let count = rng.random_range(1..=cfg.inpaint_max_regions);
    let min = ((cfg.inpaint_min_frac * len as f64).ceil() as usize).max(1);
    let max = ((cfg.inpaint_max_frac * len as f64).floor() as usize).max(min);
    let mut spans: Vec<std::ops::Range<usize>> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..64 {
            let l = rng.random_range(min..=max).min(len);
            let start = rng.random_range(0..=len - l);
            let span = start..start + l;
            if spans.iter().all(|s| span.end <= s.start || s.end <= span.start) {
                spans.push(span);
                break;
            }
        }
    }
    if spans.is_empty() {
        return Err(TripletError::Config("could not place an inpainting mask".into()));
    }
    spans.sort_by_key(|s| s.start);
    Ok(spans)
}

/// Input is `A` with one or two spans zeroed; output is `A`.
pub fn gen_inpaint(a: &Clip, seed: u64, cfg: &TripletConfig) -> Result<TripletExample> {
    gen_inpaint_with(a, seed, cfg, &TemplateSet::builtin())
}

pub fn gen_inpaint_with(a: &Clip, seed: u64, cfg: &TripletConfig, set: &TemplateSet) -> Result<TripletExample> {
    cfg.validate()?;
    let template = pick_template(set, Task::Inpaint, "triplet/inpaint-template", seed)?;
    let output = fitted(a, cfg)?;
    let mut rng = seed::rng_for(seed, "triplet/mask");
    let spans = draw_mask_regions(&mut rng, output.len(), cfg)?;
    let mut input = output.clone();
    let mut regions = Vec::with_capacity(spans.len());
    for span in spans {
        let r = TimeRegion::from_samples(span, cfg.sample_rate)?;
        input = audio::mask_region(&input, &r)?;
        regions.push(r);
    }
    Ok(TripletExample {
        task: Task::Inpaint,
        instruction: fill(template, &cfg.captions.shorten(&a.text))?,
        input,
        output,
        edit_region: EditRegion::Time { regions },
        provenance: Provenance {
            source_ids: vec![a.id.clone()],
            seed,
        },
    })
}

/// Input is `A` low-passed at a drawn cutoff; output is `A`.
pub fn gen_superres(a: &Clip, seed: u64, cfg: &TripletConfig) -> Result<TripletExample> {
    gen_superres_with(a, seed, cfg, &TemplateSet::builtin())
}

pub fn gen_superres_with(a: &Clip, seed: u64, cfg: &TripletConfig, set: &TemplateSet) -> Result<TripletExample> {
    cfg.validate()?;
    let template = pick_template(set, Task::SuperResolution, "triplet/superres-template", seed)?;
    let output = fitted(a, cfg)?;
    let mut rng = seed::rng_for(seed, "triplet/cutoff");
    let cutoff = *cfg.superres_cutoffs_hz.choose(&mut rng).expect("validated non-empty");
    let input = audio::degrade_bandwidth(&output, cutoff)?.peak_limited(1.0);
    Ok(TripletExample {
        task: Task::SuperResolution,
        instruction: fill(template, &cfg.captions.shorten(&a.text))?,
        input,
        output,
        edit_region: EditRegion::Band { cutoff_hz: cutoff },
        provenance: Provenance {
            source_ids: vec![a.id.clone()],
            seed,
        },
    })
}

/// Energy at or below and strictly above `cutoff_hz`.
pub fn band_energies(w: &Waveform, cutoff_hz: f64) -> (f64, f64) {
    let n = w.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut buf: Vec<Complex<f64>> = w.samples().iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bin_hz = w.sample_rate() as f64 / n as f64;
    buf.iter().enumerate().fold((0.0, 0.0), |(lo, hi), (k, c)| {
        if k.min(n - k) as f64 * bin_hz > cutoff_hz {
            (lo, hi + c.norm_sqr())
        } else {
            (lo + c.norm_sqr(), hi)
        }
    })
}

/// Minimum above-cutoff attenuation of a super-resolution input, in dB.
pub const SUPERRES_MIN_ATTENUATION_DB: f64 = 40.0;

/// Attenuation of the input's above-cutoff energy relative to the output's.
/// When the output has essentially nothing above the cutoff, the input's
/// stopband is measured against its own passband instead.
pub fn stopband_attenuation_db(input: &Waveform, output: &Waveform, cutoff_hz: f64) -> f64 {
    let (in_lo, in_hi) = band_energies(input, cutoff_hz);
    let (out_lo, out_hi) = band_energies(output, cutoff_hz);
    let reference = if out_hi > 1e-9 * (out_lo + out_hi) { out_hi } else { in_lo.max(1e-300) };
    if in_hi <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (reference / in_hi).log10()
}

/// Check the structural laws every triplet must satisfy.
pub fn check_invariants(ex: &TripletExample) -> Result<()> {
    let fail = |msg: String| Err(TripletError::Invariant { task: ex.task, msg });
    if ex.input.sample_rate() != ex.output.sample_rate() || ex.input.len() != ex.output.len() {
        return fail(format!(
            "input is {} samples @ {} Hz but output is {} samples @ {} Hz",
            ex.input.len(),
            ex.input.sample_rate(),
            ex.output.len(),
            ex.output.sample_rate()
        ));
    }
    if ex.instruction.trim().is_empty() {
        return fail("empty instruction".into());
    }
    let sr = ex.input.sample_rate();
    match (&ex.edit_region, ex.task) {
        (EditRegion::Time { regions }, task) if task.is_time_domain() => {
            let mut inside = vec![false; ex.input.len()];
            for r in regions {
                let range = r.sample_range(sr);
                if range.end > inside.len() {
                    return fail(format!("region {r:?} exceeds the clip"));
                }
                inside[range].fill(true);
            }
            let (inp, out) = (ex.input.samples(), ex.output.samples());
            if let Some(i) = (0..inp.len()).find(|&i| !inside[i] && inp[i].to_bits() != out[i].to_bits()) {
                return fail(format!("sample {i} differs outside the edit region"));
            }
            if task == Task::Inpaint {
                if let Some(i) = (0..inp.len()).find(|&i| inside[i] && inp[i] != 0.0) {
                    return fail(format!("masked sample {i} is not zero"));
                }
            }
            Ok(())
        }
        (EditRegion::Band { cutoff_hz }, Task::SuperResolution) => {
            let att = stopband_attenuation_db(&ex.input, &ex.output, *cutoff_hz);
            if att <= SUPERRES_MIN_ATTENUATION_DB {
                return fail(format!("only {att:.1} dB attenuation above {cutoff_hz} Hz"));
            }
            Ok(())
        }
        (region, task) => fail(format!("edit region {region:?} does not fit task {task}")),
    }
}
