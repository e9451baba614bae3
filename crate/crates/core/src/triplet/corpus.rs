use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Result, TripletError};
use crate::audio::{self, Waveform};
use crate::seed;

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub path: PathBuf,
    pub text: String,
    pub duration_s: f64,
}

/// A source clip in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub text: String,
    pub audio: Waveform,
}

/// Captioned audio listed in an `id<TAB>path<TAB>text` manifest. Relative
/// paths resolve against the manifest's directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| {
            TripletError::Corpus(format!("cannot read manifest {}: {e}", manifest.display()))
        })?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let items = Self::parse(&text, base)?;
        let items = items
            .into_par_iter()
            .map(|mut item| {
                let reader = hound::WavReader::open(&item.path).map_err(|e| {
                    TripletError::Corpus(format!("{}: unreadable audio {}: {e}", item.id, item.path.display()))
                })?;
                let spec = reader.spec();
                item.duration_s = reader.duration() as f64 / spec.sample_rate.max(1) as f64;
                Ok(item)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_items(items)
    }

    /// Parse manifest text without touching the audio files.
    pub fn parse(text: &str, base: &Path) -> Result<Vec<CorpusItem>> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (Some(id), Some(path), Some(caption)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(TripletError::Corpus(format!(
                    "line {}: expected id<TAB>path<TAB>text",
                    i + 1
                )));
            };
            if id.trim().is_empty() || caption.trim().is_empty() {
                return Err(TripletError::Corpus(format!("line {}: empty id or text", i + 1)));
            }
            let path = Path::new(path.trim());
            items.push(CorpusItem {
                id: id.trim().to_string(),
                path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
                text: caption.trim().to_string(),
                duration_s: 0.0,
            });
        }
        Ok(items)
    }

    pub fn from_items(items: Vec<CorpusItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(TripletError::Corpus("corpus is empty".into()));
        }
        let mut ids = HashSet::new();
        for item in &items {
            if !ids.insert(item.id.as_str()) {
                return Err(TripletError::Corpus(format!("duplicate id {:?}", item.id)));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Load every clip, resampled to `sample_rate`.
    pub fn load_clips(&self, sample_rate: u32) -> Result<Vec<Clip>> {
        self.items
            .par_iter()
            .map(|item| {
                let audio = audio::read_wav(&item.path, sample_rate).map_err(|e| {
                    TripletError::Corpus(format!("{}: unreadable audio {}: {e}", item.id, item.path.display()))
                })?;
                Ok(Clip {
                    id: item.id.clone(),
                    text: item.text.clone(),
                    audio,
                })
            })
            .collect()
    }
}

const KINDS: [&str; 10] = [
    "a low engine hum",
    "a high beeping alarm",
    "a rising whistle",
    "a falling siren",
    "bursts of static noise",
    "wind rushing",
    "rhythmic knocking",
    "a bell ringing",
    "a bird chirping",
    "a dog barking",
];

/// Number of distinct synthetic sound kinds.
pub fn synth_kind_count() -> usize {
    KINDS.len()
}

/// A deterministic synthetic clip of kind `kind % 10`.
pub fn synth_clip(kind: usize, seed: u64, duration_s: f64, sample_rate: u32) -> Clip {
    let kind = kind % KINDS.len();
    let mut rng = seed::rng_for(seed, "corpus/synth");
    let sr = sample_rate as f64;
    let n = audio::seconds_to_index(duration_s, sample_rate).max(1);
    let t = |i: usize| i as f64 / sr;
    let detune: f64 = rng.random_range(0.9..1.1);
    let mut x: Vec<f64> = match kind {
        0 => (0..n)
            .map(|i| {
                let f = 90.0 * detune;
                (1..=6).map(|h| (2.0 * PI * f * h as f64 * t(i)).sin() / h as f64).sum::<f64>()
                    * (1.0 + 0.2 * (2.0 * PI * 3.0 * t(i)).sin())
            })
            .collect(),
        1 => (0..n)
            .map(|i| {
                let on = (t(i) * 4.0).fract() < 0.5;
                if on { (2.0 * PI * 2400.0 * detune * t(i)).sin() } else { 0.0 }
            })
            .collect(),
        2 | 3 => {
            let (f0, f1) = if kind == 2 { (500.0, 3000.0) } else { (1800.0, 600.0) };
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    let period = 2.5;
                    let u = (t(i) / period).fract();
                    phase += 2.0 * PI * detune * (f0 + (f1 - f0) * u) / sr;
                    phase.sin() + 0.3 * (2.0 * phase).sin()
                })
                .collect()
        }
        4 => (0..n)
            .map(|i| {
                let gate = ((t(i) * 3.0).fract() < 0.35) as u8 as f64;
                gate * rng.sample::<f64, _>(StandardNormal)
            })
            .collect(),
        5 => {
            let mut lp = 0.0;
            (0..n)
                .map(|i| {
                    let a = 0.05 + 0.04 * (2.0 * PI * 0.3 * t(i)).sin();
                    lp += a * (rng.sample::<f64, _>(StandardNormal) - lp);
                    lp * 4.0
                })
                .collect()
        }
        6 => (0..n)
            .map(|i| {
                let u = (t(i) * 2.0 * detune).fract() / (2.0 * detune);
                (-u * 40.0).exp() * ((2.0 * PI * 380.0 * u).sin() + 0.4 * rng.sample::<f64, _>(StandardNormal))
            })
            .collect(),
        7 => (0..n)
            .map(|i| {
                let u = (t(i) / 1.5).fract() * 1.5;
                let env = (-u * 2.5).exp();
                env * [(880.0, 1.0), (2250.0, 0.6), (3900.0, 0.4), (5400.0, 0.25)]
                    .iter()
                    .map(|(f, a)| a * (2.0 * PI * f * detune * u).sin())
                    .sum::<f64>()
            })
            .collect(),
        8 => (0..n)
            .map(|i| {
                let u = (t(i) * 3.0).fract() / 3.0;
                if u < 0.12 {
                    let f = 3500.0 * detune + 12000.0 * u;
                    (PI * u / 0.12).sin() * (2.0 * PI * f * u).sin()
                } else {
                    0.0
                }
            })
            .collect(),
        _ => (0..n)
            .map(|i| {
                let u = (t(i) * 1.6).fract() / 1.6;
                if u < 0.18 {
                    let env = (PI * u / 0.18).sin();
                    let f = 480.0 * detune * (1.0 - u);
                    env * ((1..=8).map(|h| (2.0 * PI * f * h as f64 * u).sin() / h as f64).sum::<f64>()
                        + 0.3 * rng.sample::<f64, _>(StandardNormal))
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let level: f64 = rng.random_range(0.25..0.5);
    for v in &mut x {
        *v *= level / peak;
    }
    Clip {
        id: format!("synth{seed:04}"),
        text: KINDS[kind].to_string(),
        audio: Waveform::new(x.into_iter().map(|v| v as f32).collect(), sample_rate)
            .expect("synthetic samples are finite"),
    }
}

/// `n` synthetic clips cycling through every kind, 3 to 10 s long.
pub fn synth_clips(n: usize, seed: u64, sample_rate: u32) -> Vec<Clip> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive_indexed(seed, "corpus/item", i as u64);
            let mut rng = seed::rng_from(s);
            let duration = rng.random_range(3.0..10.0f64);
            let mut clip = synth_clip(i, s, (duration * 10.0).round() / 10.0, sample_rate);
            clip.id = format!("synth{i:04}");
            clip
        })
        .collect()
}

/// Write `n` synthetic clips as WAV files plus `corpus.tsv` under `dir`.
pub fn write_synthetic_corpus(dir: &Path, n: usize, seed: u64, sample_rate: u32) -> Result<PathBuf> {
    let clips = synth_clips(n, seed, sample_rate);
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir)?;
    let mut manifest = String::new();
    for clip in &clips {
        let rel = format!("audio/{}.wav", clip.id);
        audio::write_wav(&dir.join(&rel), &clip.audio)?;
        let _ = writeln!(manifest, "{}\t{}\t{}", clip.id, rel, clip.text);
    }
    let path = dir.join("corpus.tsv");
    crate::io::atomic_write(&path, manifest.as_bytes())?;
    Ok(path)
}
