use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex;

use super::{MelError, MelFrontend, MelSpectrogram, Result, LOG_FLOOR};
use crate::audio::Waveform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GriffinLimOptions {
    pub iterations: usize,
    /// Multiplicative-update passes used to invert the mel filterbank.
    pub nnls_iterations: usize,
    /// Seed for the initial random phase.
    pub seed: u64,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self {
            iterations: 60,
            nnls_iterations: 40,
            seed: 0,
        }
    }
}

/// Invert a log-mel grid to audio with `iterations` rounds of Griffin-Lim.
pub fn mel_to_waveform(m: &MelSpectrogram, iterations: usize) -> Result<Waveform> {
    mel_to_waveform_with(
        m,
        GriffinLimOptions {
            iterations,
            ..Default::default()
        },
    )
}

pub fn mel_to_waveform_with(m: &MelSpectrogram, opts: GriffinLimOptions) -> Result<Waveform> {
    if let Some(((r, c), _)) = m.grid().indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(MelError::NonFinite(r, c));
    }
    let front = MelFrontend::new(*m.config())?;
    let magnitude = linear_magnitude(&front, m, opts.nnls_iterations);
    let stft = front.stft();
    let frames = m.frames();
    let len = frames * stft.hop();

    let mut rng = crate::seed::rng_for(opts.seed, "griffin-lim/phase");
    let mut spec = magnitude.mapv(|a| {
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Complex::from_polar(a, phi)
    });
    let mut signal = stft.inverse(&spec, len);
    for _ in 0..opts.iterations {
        let rebuilt = stft.forward(&signal, frames);
        for ((s, &a), r) in spec.iter_mut().zip(&magnitude).zip(&rebuilt) {
            let n = r.norm();
            *s = if n > 1e-12 {
                r * (a / n)
            } else {
                Complex::new(a, 0.0)
            };
        }
        signal = stft.inverse(&spec, len);
    }
    Waveform::new(
        signal.iter().map(|&s| s as f32).collect(),
        m.config().sample_rate,
    )
    .map_err(|_| MelError::NonFinite(0, 0))
}

/// Nonnegative least-squares estimate of the linear magnitude spectrogram
/// from mel power, by multiplicative updates.
fn linear_magnitude(front: &MelFrontend, m: &MelSpectrogram, iterations: usize) -> Array2<f64> {
    let fb = front.filterbank();
    let n_bins = front.config().n_bins();
    let n_mels = m.n_mels();
    let mut out = Array2::zeros((n_bins, m.frames()));

    // Column sums of W^T W applied to ones, for the initial guess.
    let mut col_weight = vec![0.0; n_bins];
    fb.apply_transpose(&vec![1.0; n_mels], &mut col_weight);

    // No signal in [-1, 1] has more mel power than this; larger values can
    // only come from a bad decode and would overflow the inversion.
    let mut row_sums = vec![0.0; n_mels];
    fb.apply(&vec![1.0; n_bins], &mut row_sums);
    let win = front.stft().window_len() as f64;
    let ceiling = (row_sums.iter().cloned().fold(0.0, f64::max) * win * win).ln();

    let mut target = vec![0.0; n_mels];
    let mut back = vec![0.0; n_bins];
    let mut s = vec![0.0; n_bins];
    let mut ws = vec![0.0; n_mels];
    let mut wtws = vec![0.0; n_bins];
    for j in 0..m.frames() {
        for (mi, t) in target.iter_mut().enumerate() {
            *t = (m.grid()[[mi, j]].min(ceiling).exp() - LOG_FLOOR).max(0.0);
        }
        if target.iter().all(|&t| t == 0.0) {
            continue;
        }
        fb.apply_transpose(&target, &mut back);
        for k in 0..n_bins {
            s[k] = if col_weight[k] > 0.0 {
                back[k] / (col_weight[k] * col_weight[k]).max(1e-12)
            } else {
                0.0
            };
        }
        for _ in 0..iterations {
            fb.apply(&s, &mut ws);
            fb.apply_transpose(&ws, &mut wtws);
            for k in 0..n_bins {
                if s[k] > 0.0 {
                    s[k] *= back[k] / (wtws[k] + 1e-30);
                }
            }
        }
        for k in 0..n_bins {
            out[[k, j]] = s[k].max(0.0).sqrt();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mel::{waveform_to_mel, MelConfig};
    use std::f64::consts::PI;

    fn chirp_with_harmonics(seconds: f64) -> Waveform {
        let sr = 16_000.0;
        let n = (seconds * sr) as usize;
        Waveform::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let phase = 2.0 * PI * (220.0 * t + 100.0 * t * t);
                    let env = 0.6 + 0.4 * (2.0 * PI * 0.5 * t).sin();
                    (env * 0.2 * (phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin()))
                        as f32
                })
                .collect(),
            16_000,
        )
        .unwrap()
    }

    fn mean_abs_log_error(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let n = a.grid().len() as f64;
        a.grid()
            .iter()
            .zip(b.grid())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n
    }

    #[test]
    fn zero_grid_gives_silence() {
        let cfg = MelConfig::default();
        let grid = Array2::from_elem((80, 64), LOG_FLOOR.ln());
        let m = MelSpectrogram::new(grid, cfg).unwrap();
        let w = mel_to_waveform(&m, 10).unwrap();
        assert_eq!(w.len(), 64 * 256);
        assert!(w.rms() < 1e-3);
    }

    #[test]
    fn absurd_log_mel_still_inverts() {
        let grid = Array2::from_elem((80, 16), 5_000.0);
        let m = MelSpectrogram::new(grid, MelConfig::default()).unwrap();
        let w = mel_to_waveform(&m, 5).unwrap();
        assert!(w.samples().iter().all(|s| s.is_finite()));
    }

    #[test]
    fn round_trip_error_is_bounded_and_shrinks() {
        let cfg = MelConfig::default();
        let w = chirp_with_harmonics(2.0);
        let mel = waveform_to_mel(&w, &cfg).unwrap();
        let err = |iters| {
            let out = mel_to_waveform(&mel, iters).unwrap();
            mean_abs_log_error(&waveform_to_mel(&out, &cfg).unwrap(), &mel)
        };
        let e30 = err(30);
        let e100 = err(100);
        assert!(e30 <= 1.0, "30 iterations: {e30}");
        assert!(e100 <= e30, "30: {e30}, 100: {e100}");
    }

    #[test]
    fn dominant_bin_trajectory_survives() {
        let cfg = MelConfig::default();
        let n = 32_000;
        let w = Waveform::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * PI * 1500.0 * i as f64 / 16_000.0).sin()) as f32)
                .collect(),
            16_000,
        )
        .unwrap();
        let mel = waveform_to_mel(&w, &cfg).unwrap();
        let back = waveform_to_mel(&mel_to_waveform(&mel, 30).unwrap(), &cfg).unwrap();
        let argmax = |m: &MelSpectrogram, j: usize| {
            let col = m.grid().column(j);
            (0..80).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap()
        };
        for j in 0..mel.frames() {
            assert_eq!(argmax(&mel, j), argmax(&back, j), "frame {j}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        let cfg = MelConfig::default();
        assert!(MelSpectrogram::new(Array2::from_elem((80, 8), f64::NAN), cfg).is_err());
    }
}
