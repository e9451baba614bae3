//! Log-mel spectrogram front end and a Griffin-Lim inverter.
//!
//! Defaults: 16 kHz audio, 1024-sample Hann window, hop 256, 80 Slaney mel
//! bands over 0-8000 Hz, natural log of `power + 1e-5`.
//!
//! Frame count: a clip of `n` samples yields `floor(n / hop)` frames rounded
//! down to a multiple of `frame_multiple` (default 8, the codec's largest
//! downsample factor). A 10 s clip gives `625 -> 624` frames, which the
//! latent shapes `80/8 x 624/8` and `80/4 x 624/4` rely on.

mod griffin_lim;
mod stft;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::record::{GridRecord, RecordError, RecordKind};

pub use griffin_lim::{mel_to_waveform, mel_to_waveform_with, GriffinLimOptions};
pub use stft::Stft;

/// Power floor added before taking the log.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MelError {
    #[error("invalid mel configuration: {0}")]
    InvalidConfig(String),
    #[error("waveform is {got} Hz but the mel configuration expects {expected} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("clip of {samples} samples is too short for a single frame")]
    TooShort { samples: usize },
    #[error("mel grid contains a non-finite value at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("grid has shape {got:?}, expected {expected:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Record(#[from] RecordError),
}

pub type Result<T> = std::result::Result<T, MelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Frame counts are rounded down to a multiple of this.
    pub frame_multiple: usize,
    /// Fixed frame count, overriding the duration-derived one.
    pub target_frames: Option<usize>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            hop: 256,
            window: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8_000.0,
            frame_multiple: 8,
            target_frames: None,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MelError::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 || self.hop == 0 || self.window < 2 || self.n_mels == 0 {
            return fail("sample_rate, hop, window and n_mels must be positive");
        }
        if self.hop > self.window {
            return fail("hop must not exceed window");
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return fail("need 0 <= fmin < fmax");
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return fail("fmax must not exceed the Nyquist frequency");
        }
        if self.frame_multiple == 0 {
            return fail("frame_multiple must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Frames produced for a clip of `n` samples.
    pub fn frames_for(&self, n: usize) -> usize {
        match self.target_frames {
            Some(f) => f,
            None => (n / self.hop) / self.frame_multiple * self.frame_multiple,
        }
    }

    pub fn frames_for_seconds(&self, seconds: f64) -> usize {
        self.frames_for(crate::audio::seconds_to_index(seconds, self.sample_rate))
    }

    /// Seconds spanned by one frame step.
    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    fn to_meta(self) -> Vec<(String, String)> {
        let mut meta = vec![
            ("sample_rate".into(), self.sample_rate.to_string()),
            ("hop".into(), self.hop.to_string()),
            ("window".into(), self.window.to_string()),
            ("n_mels".into(), self.n_mels.to_string()),
            ("fmin".into(), self.fmin.to_string()),
            ("fmax".into(), self.fmax.to_string()),
            ("frame_multiple".into(), self.frame_multiple.to_string()),
        ];
        if let Some(f) = self.target_frames {
            meta.push(("target_frames".into(), f.to_string()));
        }
        meta
    }

    fn from_record(rec: &GridRecord) -> std::result::Result<Self, RecordError> {
        let d = Self::default();
        Ok(Self {
            sample_rate: rec.meta_parse("sample_rate")?.unwrap_or(d.sample_rate),
            hop: rec.meta_parse("hop")?.unwrap_or(d.hop),
            window: rec.meta_parse("window")?.unwrap_or(d.window),
            n_mels: rec.meta_parse("n_mels")?.unwrap_or(d.n_mels),
            fmin: rec.meta_parse("fmin")?.unwrap_or(d.fmin),
            fmax: rec.meta_parse("fmax")?.unwrap_or(d.fmax),
            frame_multiple: rec.meta_parse("frame_multiple")?.unwrap_or(d.frame_multiple),
            target_frames: rec.meta_parse("target_frames")?,
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        MIN_LOG_HZ / F_SP + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let logstep = 6.4f64.ln() / 27.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Triangular Slaney-normalized mel filters over FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    /// Nonzero bin span per filter.
    spans: Vec<(usize, usize)>,
    peaks_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.window as f64;
        let mut weights = Array2::zeros((cfg.n_mels, n_bins));
        let mut spans = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (hi - lo);
            let mut first = n_bins;
            let mut last = 0;
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0);
                if w > 0.0 {
                    weights[[m, k]] = w * norm;
                    first = first.min(k);
                    last = k + 1;
                }
            }
            spans.push(if first < last { (first, last) } else { (0, 0) });
        }
        Ok(Self {
            weights,
            spans,
            peaks_hz: points[1..=cfg.n_mels].to_vec(),
        })
    }

    /// Dense `(n_mels, n_bins)` weight matrix.
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn peak_frequencies(&self) -> &[f64] {
        &self.peaks_hz
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    /// `out[m] = sum_k W[m, k] * power[k]`.
    pub(crate) fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, &(a, b)) in self.spans.iter().enumerate() {
            let row = self.weights.row(m);
            out[m] = (a..b).map(|k| row[k] * power[k]).sum();
        }
    }

    /// `out[k] = sum_m W[m, k] * mel[m]`.
    pub(crate) fn apply_transpose(&self, mel: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (m, &(a, b)) in self.spans.iter().enumerate() {
            let row = self.weights.row(m);
            for k in a..b {
                out[k] += row[k] * mel[m];
            }
        }
    }
}

/// Mel filterbank matrix for `cfg`, shape `(n_mels, window / 2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Array2<f64>> {
    Ok(MelFilterbank::new(cfg)?.weights)
}

/// Log-power mel grid, shape `(n_mels, frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    grid: Array2<f64>,
    config: MelConfig,
}

impl MelSpectrogram {
    pub fn new(grid: Array2<f64>, config: MelConfig) -> Result<Self> {
        if grid.nrows() != config.n_mels {
            return Err(MelError::Shape {
                expected: (config.n_mels, grid.ncols()),
                got: grid.dim(),
            });
        }
        if let Some(((r, c), _)) = grid.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(MelError::NonFinite(r, c));
        }
        Ok(Self { grid, config })
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn into_grid(self) -> Array2<f64> {
        self.grid
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn n_mels(&self) -> usize {
        self.grid.nrows()
    }

    pub fn frames(&self) -> usize {
        self.grid.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn to_record(&self) -> GridRecord {
        GridRecord {
            kind: RecordKind::Mel,
            dims: vec![self.n_mels(), self.frames()],
            meta: self.config.to_meta(),
            data: self.grid.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_record(rec: &GridRecord) -> Result<Self> {
        rec.expect_kind(RecordKind::Mel)?;
        let [rows, cols] = rec.dims[..] else {
            return Err(RecordError::Malformed(format!("mel record has {} dims", rec.dims.len())).into());
        };
        let config = MelConfig::from_record(rec)?;
        let grid = Array2::from_shape_vec((rows, cols), rec.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| RecordError::Malformed(e.to_string()))?;
        Self::new(grid, config)
    }
}

/// Reusable analysis state: filterbank and FFT plans for one configuration.
#[derive(Debug, Clone)]
pub struct MelFrontend {
    config: MelConfig,
    filterbank: MelFilterbank,
    stft: Stft,
}

impl MelFrontend {
    pub fn new(config: MelConfig) -> Result<Self> {
        let filterbank = MelFilterbank::new(&config)?;
        Ok(Self {
            stft: Stft::new(config.window, config.hop),
            filterbank,
            config,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Power spectrogram `|STFT|^2`, shape `(n_bins, frames)`.
    pub fn power_spectrogram(&self, signal: &[f64], frames: usize) -> Array2<f64> {
        self.stft.forward(signal, frames).mapv(|c| c.norm_sqr())
    }

    pub fn mel_from_signal(&self, signal: &[f64]) -> Result<MelSpectrogram> {
        let frames = self.config.frames_for(signal.len());
        if frames == 0 {
            return Err(MelError::TooShort {
                samples: signal.len(),
            });
        }
        let frames_avail = self.stft.max_frames(signal.len());
        let power = self.power_spectrogram(signal, frames.min(frames_avail));
        let mut grid = Array2::from_elem((self.config.n_mels, frames), LOG_FLOOR.ln());
        let mut column = vec![0.0; power.nrows()];
        let mut mel = vec![0.0; self.config.n_mels];
        for j in 0..power.ncols() {
            for (k, c) in column.iter_mut().enumerate() {
                *c = power[[k, j]];
            }
            self.filterbank.apply(&column, &mut mel);
            for (m, &p) in mel.iter().enumerate() {
                grid[[m, j]] = (p + LOG_FLOOR).ln();
            }
        }
        MelSpectrogram::new(grid, self.config)
    }

    pub fn waveform_to_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate() != self.config.sample_rate {
            return Err(MelError::SampleRateMismatch {
                expected: self.config.sample_rate,
                got: w.sample_rate(),
            });
        }
        let signal: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
        self.mel_from_signal(&signal)
    }
}

/// Log-mel spectrogram of `w` under `cfg`.
pub fn waveform_to_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(*cfg)?.waveform_to_mel(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, seconds: f64) -> Waveform {
        let n = (seconds * 16_000.0) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
                .collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn ten_seconds_is_80_by_624() {
        let cfg = MelConfig::default();
        let mel = waveform_to_mel(&sine(440.0, 10.0), &cfg).unwrap();
        assert_eq!(mel.shape(), (80, 624));
        assert_eq!(cfg.frames_for_seconds(10.0), 624);
        assert_eq!(cfg.frames_for_seconds(5.0), 312);
    }

    #[test]
    fn silence_hits_the_floor_exactly() {
        let cfg = MelConfig::default();
        let w = Waveform::silence(2.0, 16_000).unwrap();
        let mel = waveform_to_mel(&w, &cfg).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(mel.grid().iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_lands_in_the_nearest_filter() {
        let cfg = MelConfig::default();
        let mel = waveform_to_mel(&sine(1000.0, 2.0), &cfg).unwrap();
        // Oracle: filter centres straight from the Slaney formula.
        let lo = 0.0;
        let hi = 15.0 + (8000.0f64 / 1000.0).ln() / (6.4f64.ln() / 27.0);
        let centre = |m: usize| {
            let mel = lo + (hi - lo) * (m + 1) as f64 / 81.0;
            if mel < 15.0 {
                mel * 200.0 / 3.0
            } else {
                1000.0 * ((6.4f64.ln() / 27.0) * (mel - 15.0)).exp()
            }
        };
        let nearest = (0..80)
            .min_by(|&a, &b| (centre(a) - 1000.0).abs().total_cmp(&(centre(b) - 1000.0).abs()))
            .unwrap();
        for col in mel.grid().columns() {
            let argmax = (0..80).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg).unwrap();
        let w = fb.weights();
        assert_eq!(w.dim(), (80, 513));
        assert!(w.rows().into_iter().all(|r| r.sum() > 0.0));
        assert!(fb.peak_frequencies().windows(2).all(|p| p[1] > p[0]));
        // Oracle for the first peak: one mel step above 0 on the Slaney scale.
        let top = 15.0 + (8.0f64).ln() / (6.4f64.ln() / 27.0);
        let first = top / 81.0 * 200.0 / 3.0;
        assert!((fb.peak_frequencies()[0] - first).abs() < 1e-9);
        assert!(first < 100.0);
        for k in 1..512 {
            assert!(w.column(k).sum() > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = MelConfig::default();
        cfg.fmax = 9_000.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MelConfig::default();
        cfg.hop = 2048;
        assert!(cfg.validate().is_err());
        let w = Waveform::new(vec![0.0; 100], 8_000).unwrap();
        assert!(matches!(
            waveform_to_mel(&w, &MelConfig::default()),
            Err(MelError::SampleRateMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_and_floored() {
        let cfg = MelConfig::default();
        let w = sine(3000.0, 1.0);
        let a = waveform_to_mel(&w, &cfg).unwrap();
        let b = waveform_to_mel(&w, &cfg).unwrap();
        assert!(a.grid().iter().zip(b.grid()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.grid().iter().all(|&v| v >= LOG_FLOOR.ln()));
    }

    #[test]
    fn record_round_trip() {
        let cfg = MelConfig::default();
        let mel = waveform_to_mel(&sine(500.0, 0.5), &cfg).unwrap();
        let rec = GridRecord::from_bytes(&mel.to_record().to_bytes()).unwrap();
        let back = MelSpectrogram::from_record(&rec).unwrap();
        assert_eq!(back.config(), mel.config());
        for (a, b) in back.grid().iter().zip(mel.grid()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
