//! Mono waveforms and the time-domain edit primitives used to build triplets.
//!
//! Every operation here is a pure function returning a new [`Waveform`].
//! Sample positions are derived from seconds with `round(t * sample_rate)`,
//! so a [`TimeRegion`] returned by one operation maps back to exactly the
//! same sample range in the next.

mod wav;

use std::ops::Range;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use wav::{read_wav, read_wav_native, write_wav, wav_bytes};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("waveform contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("target duration must be positive, got {0} s")]
    NonPositiveDuration(f64),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("invalid region [{start}, {end}] s: end must exceed start and start must be >= 0")]
    InvalidRegion { start: f64, end: f64 },
    #[error("region [{start}, {end}] s lies outside a {duration} s waveform")]
    RegionOutOfBounds { start: f64, end: f64, duration: f64 },
    #[error("offset {offset} s leaves no room for the event in a {duration} s waveform")]
    EmptyOverlay { offset: f64, duration: f64 },
    #[error("cutoff {cutoff} Hz must lie strictly between 0 and {nyquist} Hz")]
    CutoffOutOfRange { cutoff: f64, nyquist: f64 },
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono audio clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Result<Self> {
        if !(seconds > 0.0) {
            return Err(AudioError::NonPositiveDuration(seconds));
        }
        Self::new(vec![0.0; seconds_to_index(seconds, sample_rate)], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (sum / self.samples.len() as f64).sqrt()
    }

    /// Multiply every sample by `gain`.
    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Rescale so the peak does not exceed `limit`. Quiet clips are untouched.
    pub fn peak_limited(self, limit: f32) -> Self {
        let peak = self.peak();
        if peak > limit {
            self.scaled(limit / peak)
        } else {
            self
        }
    }

    /// Keep the first `n` samples (or all, if shorter).
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn index_of(&self, seconds: f64) -> usize {
        seconds_to_index(seconds, self.sample_rate)
    }
}

pub fn seconds_to_index(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round().max(0.0) as usize
}

/// Half-open time interval, in seconds, where an edit was applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRegion {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeRegion {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0) || !(end_s > start_s) || !end_s.is_finite() {
            return Err(AudioError::InvalidRegion {
                start: start_s,
                end: end_s,
            });
        }
        Ok(Self { start_s, end_s })
    }

    /// Region covering samples `range` at `sample_rate`.
    pub fn from_samples(range: Range<usize>, sample_rate: u32) -> Result<Self> {
        let sr = sample_rate as f64;
        Self::new(range.start as f64 / sr, range.end as f64 / sr)
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn sample_range(&self, sample_rate: u32) -> Range<usize> {
        seconds_to_index(self.start_s, sample_rate)..seconds_to_index(self.end_s, sample_rate)
    }

    pub fn overlaps(&self, other: &TimeRegion) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }

    fn check_within(&self, w: &Waveform) -> Result<()> {
        let range = self.sample_range(w.sample_rate);
        if range.end > w.len() {
            return Err(AudioError::RegionOutOfBounds {
                start: self.start_s,
                end: self.end_s,
                duration: w.duration_s(),
            });
        }
        Ok(())
    }
}

/// Pad with trailing zeros or keep the prefix so the clip lasts exactly `target_s`.
pub fn pad_or_truncate(w: &Waveform, target_s: f64) -> Result<Waveform> {
    if !(target_s > 0.0) || !target_s.is_finite() {
        return Err(AudioError::NonPositiveDuration(target_s));
    }
    let n = w.index_of(target_s);
    let mut samples = w.samples[..n.min(w.len())].to_vec();
    samples.resize(n, 0.0);
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Add `gain * event` into `base` starting at `offset_s`.
///
/// The event is clipped at the end of `base`. If the mix exceeds full scale,
/// the whole output is divided by its peak, so callers that need the region
/// outside the overlay to stay bit-identical must keep inputs below clipping.
pub fn mix_overlay(
    base: &Waveform,
    event: &Waveform,
    offset_s: f64,
    gain: f32,
) -> Result<(Waveform, TimeRegion)> {
    if base.sample_rate != event.sample_rate {
        return Err(AudioError::SampleRateMismatch(
            base.sample_rate,
            event.sample_rate,
        ));
    }
    let start = base.index_of(offset_s.max(0.0));
    let end = (start + event.len()).min(base.len());
    if !(offset_s >= 0.0) || end <= start {
        return Err(AudioError::EmptyOverlay {
            offset: offset_s,
            duration: base.duration_s(),
        });
    }
    let mut samples = base.samples.clone();
    for (out, &e) in samples[start..end].iter_mut().zip(&event.samples) {
        *out += gain * e;
    }
    let mixed = Waveform {
        samples,
        sample_rate: base.sample_rate,
    }
    .peak_limited(1.0);
    let region = TimeRegion::from_samples(start..end, base.sample_rate)?;
    Ok((mixed, region))
}

/// Place an event into a host clip. Same contract as [`mix_overlay`]; the
/// replacement generator uses this name for its two insertions.
pub fn insert_at(
    base: &Waveform,
    event: &Waveform,
    offset_s: f64,
    gain: f32,
) -> Result<(Waveform, TimeRegion)> {
    mix_overlay(base, event, offset_s, gain)
}

/// Zero every sample inside `region`.
pub fn mask_region(w: &Waveform, region: &TimeRegion) -> Result<Waveform> {
    region.check_within(w)?;
    let mut samples = w.samples.clone();
    samples[region.sample_range(w.sample_rate)].fill(0.0);
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Remove all content above `cutoff_hz` with an ideal low-pass over the
/// whole clip, keeping length and sample rate.
pub fn degrade_bandwidth(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    let nyquist = w.sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(AudioError::CutoffOutOfRange {
            cutoff: cutoff_hz,
            nyquist,
        });
    }
    let n = w.len();
    if n == 0 {
        return Ok(w.clone());
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut spectrum: Vec<Complex<f64>> = w
        .samples
        .iter()
        .map(|&s| Complex::new(s as f64, 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut spectrum);
    let bin_hz = w.sample_rate as f64 / n as f64;
    for k in 1..n {
        let folded = k.min(n - k);
        if folded as f64 * bin_hz > cutoff_hz {
            spectrum[k] = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut spectrum);
    let scale = 1.0 / n as f64;
    Ok(Waveform {
        samples: spectrum.iter().map(|c| (c.re * scale) as f32).collect(),
        sample_rate: w.sample_rate,
    })
}

/// Band-limited resampling by spectrum truncation or zero extension.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    if target_rate == w.sample_rate || w.is_empty() {
        return Ok(Waveform {
            samples: w.samples.clone(),
            sample_rate: target_rate,
        });
    }
    let n = w.len();
    let m = ((n as u64 * target_rate as u64 + w.sample_rate as u64 / 2) / w.sample_rate as u64)
        .max(1) as usize;
    let mut planner = FftPlanner::<f64>::new();
    let mut spectrum: Vec<Complex<f64>> = w
        .samples
        .iter()
        .map(|&s| Complex::new(s as f64, 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut spectrum);

    let mut out = vec![Complex::new(0.0, 0.0); m];
    // Strictly-below-Nyquist bins of the smaller length survive.
    let keep = (n.min(m) - 1) / 2;
    out[0] = spectrum[0];
    for k in 1..=keep {
        out[k] = spectrum[k];
        out[m - k] = spectrum[n - k];
    }
    planner.plan_fft_inverse(m).process(&mut out);
    let scale = 1.0 / n as f64;
    Waveform::new(
        out.iter().map(|c| (c.re * scale) as f32).collect(),
        target_rate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const SR: u32 = 16_000;

    fn sine(freq: f64, amp: f64, seconds: f64) -> Waveform {
        let n = seconds_to_index(seconds, SR);
        Waveform::new(
            (0..n)
                .map(|i| (amp * (2.0 * PI * freq * i as f64 / SR as f64).sin()) as f32)
                .collect(),
            SR,
        )
        .unwrap()
    }

    fn noise(seconds: f64, amp: f32, seed: u64) -> Waveform {
        use rand::Rng;
        let mut rng = crate::seed::rng_from(seed);
        let n = seconds_to_index(seconds, SR);
        Waveform::new((0..n).map(|_| rng.random_range(-amp..amp)).collect(), SR).unwrap()
    }

    /// Energy below and above `cutoff` via a direct DFT-by-FFT oracle.
    fn band_energy(w: &Waveform, cutoff: f64) -> (f64, f64) {
        let n = w.len();
        let mut buf: Vec<Complex<f64>> = w
            .samples()
            .iter()
            .map(|&s| Complex::new(s as f64, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mut low = 0.0;
        let mut high = 0.0;
        for (k, c) in buf.iter().enumerate() {
            let f = k.min(n - k) as f64 * SR as f64 / n as f64;
            if f > cutoff {
                high += c.norm_sqr();
            } else {
                low += c.norm_sqr();
            }
        }
        (low, high)
    }

    #[test]
    fn pad_or_truncate_cases() {
        let ten = sine(440.0, 0.5, 10.0);
        assert_eq!(pad_or_truncate(&ten, 10.0).unwrap(), ten);

        let twelve = sine(440.0, 0.5, 12.0);
        let cut = pad_or_truncate(&twelve, 10.0).unwrap();
        assert_eq!(cut.len(), 160_000);
        assert_eq!(cut.samples(), &twelve.samples()[..160_000]);

        let four = sine(440.0, 0.5, 4.0);
        let padded = pad_or_truncate(&four, 5.0).unwrap();
        assert_eq!(padded.len(), 80_000);
        assert_eq!(&padded.samples()[..64_000], four.samples());
        assert!(padded.samples()[64_000..].iter().all(|&s| s == 0.0));
        assert_eq!(padded.samples().len() - four.len(), 16_000);

        assert!(pad_or_truncate(&four, 0.0).is_err());
        assert!(pad_or_truncate(&four, -1.0).is_err());
    }

    #[test]
    fn mix_identities() {
        let base = sine(440.0, 0.2, 2.0);
        let zeros = Waveform::silence(1.0, SR).unwrap();
        let (out, region) = mix_overlay(&base, &zeros, 0.5, 1.0).unwrap();
        assert_eq!(out, base);
        assert_eq!(region.sample_range(SR), 8_000..24_000);

        let event = sine(660.0, 0.3, 1.0);
        let silent = Waveform::silence(2.0, SR).unwrap();
        let (out, _) = mix_overlay(&silent, &event, 0.0, 1.0).unwrap();
        assert_eq!(&out.samples()[..event.len()], event.samples());
    }

    #[test]
    fn mix_matches_elementwise_sum() {
        let a = sine(440.0, 0.1, 1.0);
        let b = sine(660.0, 0.1, 1.0);
        let (out, region) = mix_overlay(&a, &b, 0.0, 1.0).unwrap();
        let oracle: Vec<f32> = a
            .samples()
            .iter()
            .zip(b.samples())
            .map(|(x, y)| x + y)
            .collect();
        assert_eq!(out.samples(), oracle.as_slice());
        assert_eq!(region, TimeRegion::new(0.0, 1.0).unwrap());
    }

    #[test]
    fn mix_clips_event_and_rescales_on_overflow() {
        let base = sine(440.0, 0.9, 1.0);
        let event = sine(440.0, 0.9, 2.0);
        let (out, region) = mix_overlay(&base, &event, 0.5, 1.0).unwrap();
        assert_eq!(out.len(), base.len());
        assert_eq!(region.sample_range(SR), 8_000..16_000);
        assert!(out.peak() <= 1.0);

        let other_rate = Waveform::new(vec![0.0; 10], 8_000).unwrap();
        assert!(matches!(
            mix_overlay(&base, &other_rate, 0.0, 1.0),
            Err(AudioError::SampleRateMismatch(..))
        ));
        assert!(mix_overlay(&base, &event, 1.0, 1.0).is_err());
    }

    #[test]
    fn insert_at_delegates() {
        let base = sine(300.0, 0.2, 3.0);
        let event = sine(900.0, 0.2, 1.0);
        assert_eq!(
            insert_at(&base, &event, 1.0, 0.5).unwrap(),
            mix_overlay(&base, &event, 1.0, 0.5).unwrap()
        );
    }

    #[test]
    fn mask_region_cases() {
        let w = sine(440.0, 0.5, 10.0);
        let all = mask_region(&w, &TimeRegion::new(0.0, 10.0).unwrap()).unwrap();
        assert!(all.samples().iter().all(|&s| s == 0.0));

        assert!(TimeRegion::new(3.0, 3.0).is_err());
        assert!(TimeRegion::new(-1.0, 3.0).is_err());

        let masked = mask_region(&w, &TimeRegion::new(2.0, 4.0).unwrap()).unwrap();
        for (i, (&m, &o)) in masked.samples().iter().zip(w.samples()).enumerate() {
            if (32_000..64_000).contains(&i) {
                assert_eq!(m, 0.0);
            } else {
                assert_eq!(m.to_bits(), o.to_bits());
            }
        }
        assert!(mask_region(&w, &TimeRegion::new(9.0, 11.0).unwrap()).is_err());
    }

    #[test]
    fn bandwidth_passband_sine_survives() {
        let w = sine(200.0, 0.5, 1.0);
        let out = degrade_bandwidth(&w, 4000.0).unwrap();
        let num: f64 = w
            .samples()
            .iter()
            .zip(out.samples())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let corr = num / (w.rms() * out.rms() * w.len() as f64);
        assert!(corr > 0.99, "correlation {corr}");
        assert_eq!(out.len(), w.len());
        assert_eq!(out.sample_rate(), SR);
    }

    #[test]
    fn bandwidth_stopband_sine_removed() {
        let w = sine(7000.0, 0.5, 1.0);
        let out = degrade_bandwidth(&w, 4000.0).unwrap();
        assert!(out.rms() < 0.01 * w.rms());
        // A frequency that does not land on a bin still leaks very little.
        let w = sine(7013.7, 0.5, 1.0);
        let out = degrade_bandwidth(&w, 4000.0).unwrap();
        assert!(out.rms() < 0.01 * w.rms(), "{} vs {}", out.rms(), w.rms());
    }

    #[test]
    fn bandwidth_white_noise_ratio() {
        let w = noise(1.0, 0.5, 3);
        let out = degrade_bandwidth(&w, 4000.0).unwrap();
        let (low, high) = band_energy(&out, 4000.0);
        assert!(high / low < 0.01);
        // Attenuation of the removed band relative to the original: > 40 dB.
        let (_, high_in) = band_energy(&w, 4000.0);
        assert!(10.0 * (high_in / high.max(1e-300)).log10() > 40.0);
    }

    #[test]
    fn bandwidth_errors_and_idempotence() {
        let w = noise(0.5, 0.5, 9);
        assert!(degrade_bandwidth(&w, 0.0).is_err());
        assert!(degrade_bandwidth(&w, 8000.0).is_err());
        let once = degrade_bandwidth(&w, 2000.0).unwrap();
        let twice = degrade_bandwidth(&once, 2000.0).unwrap();
        let diff: f64 = once
            .samples()
            .iter()
            .zip(twice.samples())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / once.len() as f64;
        assert!(diff.sqrt() < 1e-3);
    }

    #[test]
    fn resample_preserves_a_low_tone() {
        let w = sine(440.0, 0.5, 1.0);
        let up = resample(&w, 22_050).unwrap();
        assert_eq!(up.len(), 22_050);
        let back = resample(&up, SR).unwrap();
        assert_eq!(back.len(), w.len());
        let err = w
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-4, "max error {err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn pad_or_truncate_is_idempotent(len in 1usize..4000, target in 0.01f64..0.4) {
                let w = Waveform::new((0..len).map(|i| (i as f32 * 0.37).sin() * 0.5).collect(), SR).unwrap();
                let once = pad_or_truncate(&w, target).unwrap();
                prop_assert_eq!(pad_or_truncate(&once, target).unwrap(), once);
            }

            #[test]
            fn mix_leaves_outside_bit_identical(
                base_len in 200usize..2000,
                ev_len in 1usize..500,
                offset in 0usize..150,
                gain in 0.0f32..1.0,
            ) {
                let base = Waveform::new((0..base_len).map(|i| (i as f32 * 0.11).sin() * 0.3).collect(), SR).unwrap();
                let event = Waveform::new((0..ev_len).map(|i| (i as f32 * 0.7).cos() * 0.3).collect(), SR).unwrap();
                let (out, region) = mix_overlay(&base, &event, offset as f64 / SR as f64, gain).unwrap();
                let range = region.sample_range(SR);
                prop_assert_eq!(range.start, offset);
                for i in (0..base_len).filter(|i| !range.contains(i)) {
                    prop_assert_eq!(out.samples()[i].to_bits(), base.samples()[i].to_bits());
                }
            }

            #[test]
            fn mask_is_idempotent(start in 0usize..1000, len in 1usize..1000) {
                let w = Waveform::new((0..2000).map(|i| (i as f32 * 0.05).sin()).collect(), SR).unwrap();
                let r = TimeRegion::from_samples(start..start + len, SR).unwrap();
                let once = mask_region(&w, &r).unwrap();
                prop_assert_eq!(mask_region(&once, &r).unwrap(), once);
            }
        }
    }
}
