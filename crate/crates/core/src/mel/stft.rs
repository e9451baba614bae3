use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Centered short-time Fourier transform with a periodic Hann window.
///
/// Frame `j` is centred on sample `j * hop`; the signal is reflect-padded by
/// `window / 2` on both sides (zero-padded when too short to reflect).
#[derive(Clone)]
pub struct Stft {
    window: Vec<f64>,
    hop: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("window", &self.window.len())
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(window_len: usize, hop: usize) -> Self {
        let window = (0..window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window_len as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            window,
            hop,
            forward: planner.plan_fft_forward(window_len),
            inverse: planner.plan_fft_inverse(window_len),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Frames available from a signal of `n` samples under centre padding.
    pub fn max_frames(&self, n: usize) -> usize {
        n / self.hop + 1
    }

    fn padded(&self, signal: &[f64]) -> Vec<f64> {
        let pad = self.window.len() / 2;
        let n = signal.len();
        let mut out = Vec::with_capacity(n + 2 * pad);
        let reflect = n > pad;
        for i in (1..=pad).rev() {
            out.push(if reflect { signal[i] } else { 0.0 });
        }
        out.extend_from_slice(signal);
        for i in 0..pad {
            out.push(if reflect { signal[n - 2 - i] } else { 0.0 });
        }
        out
    }

    /// Complex spectrum, shape `(n_bins, frames)`. `frames` must not exceed
    /// [`Stft::max_frames`].
    pub fn forward(&self, signal: &[f64], frames: usize) -> Array2<Complex<f64>> {
        let padded = self.padded(signal);
        let win = self.window.len();
        let n_bins = self.n_bins();
        let mut out = Array2::zeros((n_bins, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for j in 0..frames {
            let start = j * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = padded.get(start + i).copied().unwrap_or(0.0);
                *b = Complex::new(s * self.window[i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                out[[k, j]] = buf[k];
            }
        }
        out
    }

    /// Weighted overlap-add inverse producing `len` samples.
    pub fn inverse(&self, spec: &Array2<Complex<f64>>, len: usize) -> Vec<f64> {
        let win = self.window.len();
        let pad = win / 2;
        let n_bins = self.n_bins();
        let frames = spec.ncols();
        let total = len + 2 * pad;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / win as f64;
        for j in 0..frames {
            for k in 0..n_bins {
                buf[k] = spec[[k, j]];
            }
            // Hermitian completion; DC and Nyquist are forced real.
            buf[0].im = 0.0;
            if win % 2 == 0 {
                buf[win / 2].im = 0.0;
            }
            for k in n_bins..win {
                buf[k] = buf[win - k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = j * self.hop;
            for i in 0..win {
                let p = start + i;
                if p >= total {
                    break;
                }
                acc[p] += buf[i].re * scale * self.window[i];
                norm[p] += self.window[i] * self.window[i];
            }
        }
        (0..len)
            .map(|i| {
                let p = i + pad;
                if norm[p] > 1e-8 {
                    acc[p] / norm[p]
                } else {
                    0.0
                }
            })
            .collect()
    }
}
