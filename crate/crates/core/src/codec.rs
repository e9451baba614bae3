//! Mel <-> latent codec and the autoencoder training loss.
//!
//! The reference codec maps every `d x d` mel patch onto the first `C`
//! functions of the orthonormal 2-D DCT-II basis, giving a latent of shape
//! `(C, n_mels / d, frames / d)`. Decoding is the transpose, so
//! `decode . encode` is the orthogonal projection onto the kept basis and
//! `encode . decode` is the identity on latents.
//!
//! The trainable stub starts from the same basis but owns its encoder,
//! decoder and per-channel log-variance as plain parameters, and can take
//! gradient steps on [`vae_loss`].

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::Latent;
use crate::mel::{MelConfig, MelSpectrogram};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("downsample factor {d} does not divide mel shape {shape:?}")]
    Indivisible { d: usize, shape: (usize, usize) },
    #[error("invalid codec parameters: {0}")]
    InvalidParams(String),
    #[error("latent shape {got:?} does not match the codec (expected {expected} channels)")]
    LatentShape {
        expected: usize,
        got: (usize, usize, usize),
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    ReferenceOrthonormal,
    TrainableStub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecParams {
    pub downsample: usize,
    pub channels: usize,
    pub mode: CodecMode,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            downsample: 8,
            channels: 4,
            mode: CodecMode::ReferenceOrthonormal,
        }
    }
}

impl CodecParams {
    pub fn with_downsample(downsample: usize) -> Self {
        Self {
            downsample,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.downsample;
        if d == 0 {
            return Err(CodecError::InvalidParams("downsample must be positive".into()));
        }
        if self.channels == 0 || self.channels > d * d {
            return Err(CodecError::InvalidParams(format!(
                "channels must be in 1..={} for downsample {d}",
                d * d
            )));
        }
        Ok(())
    }

    /// Latent shape for a mel grid of `(n_mels, frames)`.
    pub fn latent_shape(&self, mel_shape: (usize, usize)) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let d = self.downsample;
        let (h, w) = mel_shape;
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(CodecError::Indivisible { d, shape: mel_shape });
        }
        Ok((self.channels, h / d, w / d))
    }

    /// Whether `decode . encode` is lossless.
    pub fn full_capacity(&self) -> bool {
        self.channels == self.downsample * self.downsample
    }
}

/// The first `channels` functions of the orthonormal `d x d` DCT-II basis,
/// ordered low-frequency first; row `c` is basis function `c` flattened
/// row-major over the patch.
pub fn dct_patch_basis(d: usize, channels: usize) -> Array2<f64> {
    let mut order: Vec<(usize, usize)> = (0..d).flat_map(|u| (0..d).map(move |v| (u, v))).collect();
    order.sort_by_key(|&(u, v)| (u.max(v), u + v, u));
    let coef = |k: usize, n: usize| {
        let s = if k == 0 { (1.0 / d as f64).sqrt() } else { (2.0 / d as f64).sqrt() };
        s * (PI * (2 * n + 1) as f64 * k as f64 / (2 * d) as f64).cos()
    };
    let mut basis = Array2::zeros((channels, d * d));
    for (c, &(u, v)) in order.iter().take(channels).enumerate() {
        for a in 0..d {
            for b in 0..d {
                basis[[c, a * d + b]] = coef(u, a) * coef(v, b);
            }
        }
    }
    basis
}

/// Encoder/decoder pair. In reference mode the parameters never change.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    params: CodecParams,
    /// `(C, d*d)`.
    encoder: Array2<f64>,
    /// `(d*d, C)`.
    decoder: Array2<f64>,
    /// Per-channel posterior log-variance.
    log_var: Vec<f64>,
}

impl LatentCodec {
    pub fn new(params: CodecParams) -> Result<Self> {
        params.validate()?;
        let basis = dct_patch_basis(params.downsample, params.channels);
        Ok(Self {
            params,
            decoder: basis.t().to_owned(),
            encoder: basis,
            log_var: vec![-4.0; params.channels],
        })
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn encoder_matrix(&self) -> &Array2<f64> {
        &self.encoder
    }

    pub fn decoder_matrix(&self) -> &Array2<f64> {
        &self.decoder
    }

    /// Posterior mean, i.e. the deterministic latent.
    pub fn encode(&self, m: &MelSpectrogram) -> Result<Latent> {
        self.encode_grid(m.grid())
    }

    pub fn encode_grid(&self, grid: &Array2<f64>) -> Result<Latent> {
        let (c, h, w) = self.params.latent_shape(grid.dim())?;
        let d = self.params.downsample;
        let mut z = Array3::zeros((c, h, w));
        let mut patch = vec![0.0; d * d];
        for i in 0..h {
            for j in 0..w {
                for a in 0..d {
                    for b in 0..d {
                        patch[a * d + b] = grid[[i * d + a, j * d + b]];
                    }
                }
                for ch in 0..c {
                    let row = self.encoder.row(ch);
                    z[[ch, i, j]] = row.iter().zip(&patch).map(|(e, p)| e * p).sum();
                }
            }
        }
        Ok(Latent::new(z))
    }

    /// Posterior mean and per-entry log-variance.
    pub fn encode_distribution(&self, m: &MelSpectrogram) -> Result<(Latent, Latent)> {
        let mu = self.encode(m)?;
        let mut log_var = Array3::zeros(mu.shape());
        for (ch, mut plane) in log_var.outer_iter_mut().enumerate() {
            plane.fill(self.log_var[ch]);
        }
        Ok((mu, Latent::new(log_var)))
    }

    pub fn decode_grid(&self, z: &Latent) -> Result<Array2<f64>> {
        let (c, h, w) = z.shape();
        if c != self.params.channels {
            return Err(CodecError::LatentShape {
                expected: self.params.channels,
                got: z.shape(),
            });
        }
        let d = self.params.downsample;
        let mut grid = Array2::zeros((h * d, w * d));
        let zg = z.grid();
        for i in 0..h {
            for j in 0..w {
                for a in 0..d {
                    for b in 0..d {
                        let row = self.decoder.row(a * d + b);
                        grid[[i * d + a, j * d + b]] =
                            (0..c).map(|ch| row[ch] * zg[[ch, i, j]]).sum();
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn decode(&self, z: &Latent, mel: &MelConfig) -> Result<MelSpectrogram> {
        let grid = self.decode_grid(z)?;
        if grid.nrows() != mel.n_mels {
            return Err(CodecError::ShapeMismatch(format!(
                "decoded {} mel rows but config has {}",
                grid.nrows(),
                mel.n_mels
            )));
        }
        MelSpectrogram::new(grid, *mel).map_err(|_| CodecError::NonFinite("decoded mel"))
    }

    /// Flattened trainable parameters: encoder, decoder, log-variance.
    pub fn parameters(&self) -> Vec<f64> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .chain(self.log_var.iter())
            .copied()
            .collect()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        let ne = self.encoder.len();
        let nd = self.decoder.len();
        if flat.len() != ne + nd + self.log_var.len() {
            return Err(CodecError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                ne + nd + self.log_var.len(),
                flat.len()
            )));
        }
        if self.params.mode == CodecMode::ReferenceOrthonormal {
            return Err(CodecError::InvalidParams("reference codec is fixed".into()));
        }
        self.encoder.iter_mut().zip(&flat[..ne]).for_each(|(p, v)| *p = *v);
        self.decoder.iter_mut().zip(&flat[ne..ne + nd]).for_each(|(p, v)| *p = *v);
        self.log_var.copy_from_slice(&flat[ne + nd..]);
        Ok(())
    }

    /// One SGD step on [`vae_loss`] over a batch of mel grids using the
    /// reparameterized sample `z = mu + sigma * eps`. Returns the mean loss
    /// before the update. Only available in trainable-stub mode.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[MelSpectrogram],
        weights: &VaeLossWeights,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if self.params.mode != CodecMode::TrainableStub {
            return Err(CodecError::InvalidParams("reference codec is fixed".into()));
        }
        let d = self.params.downsample;
        let dd = d * d;
        let c = self.params.channels;
        let mut g_enc = Array2::<f64>::zeros(self.encoder.dim());
        let mut g_dec = Array2::<f64>::zeros(self.decoder.dim());
        let mut g_lv = vec![0.0; c];
        let mut total = 0.0;
        for m in batch {
            let (_, h, w) = self.params.latent_shape(m.shape())?;
            let n_x = (h * w * dd) as f64;
            let n_z = (h * w * c) as f64;
            let mut l1 = 0.0;
            let mut l2 = 0.0;
            let mut kl = 0.0;
            let mut patch = vec![0.0; dd];
            for i in 0..h {
                for j in 0..w {
                    for a in 0..d {
                        for b in 0..d {
                            patch[a * d + b] = m.grid()[[i * d + a, j * d + b]];
                        }
                    }
                    let mu: Vec<f64> = (0..c)
                        .map(|ch| self.encoder.row(ch).iter().zip(&patch).map(|(e, p)| e * p).sum())
                        .collect();
                    let eps: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
                    let sigma: Vec<f64> = self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
                    let z: Vec<f64> = (0..c).map(|ch| mu[ch] + sigma[ch] * eps[ch]).collect();
                    let mut dz = vec![0.0; c];
                    for k in 0..dd {
                        let xh: f64 = (0..c).map(|ch| self.decoder[[k, ch]] * z[ch]).sum();
                        let diff = xh - patch[k];
                        l1 += diff.abs();
                        l2 += diff * diff;
                        let dxh = (weights.l1 * diff.signum() + weights.l2 * 2.0 * diff) / n_x;
                        for ch in 0..c {
                            g_dec[[k, ch]] += dxh * z[ch];
                            dz[ch] += dxh * self.decoder[[k, ch]];
                        }
                    }
                    for ch in 0..c {
                        let lv = self.log_var[ch];
                        kl += 0.5 * (mu[ch] * mu[ch] + lv.exp() - 1.0 - lv);
                        let dmu = dz[ch] + weights.kl * mu[ch] / n_z;
                        g_lv[ch] += dz[ch] * eps[ch] * 0.5 * sigma[ch] + weights.kl * 0.5 * (lv.exp() - 1.0) / n_z;
                        for k in 0..dd {
                            g_enc[[ch, k]] += dmu * patch[k];
                        }
                    }
                }
            }
            total += weights.l1 * l1 / n_x + weights.l2 * l2 / n_x + weights.kl * kl / n_z;
        }
        let scale = lr / batch.len().max(1) as f64;
        Zip::from(&mut self.encoder).and(&g_enc).for_each(|p, g| *p -= scale * g);
        Zip::from(&mut self.decoder).and(&g_dec).for_each(|p, g| *p -= scale * g);
        for (p, g) in self.log_var.iter_mut().zip(&g_lv) {
            *p -= scale * g;
        }
        Ok(total / batch.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLossWeights {
    pub l1: f64,
    pub l2: f64,
    pub kl: f64,
    pub gan: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            kl: 1e-6,
            gan: 0.5,
        }
    }
}

impl VaeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.l1, self.l2, self.kl, self.gan].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CodecError::InvalidParams("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// The KL term should stay a small regularizer next to L1.
    pub fn kl_is_small(&self) -> bool {
        self.kl <= 0.01 * self.l1
    }
}

/// Individual terms of the autoencoder loss, each a per-element mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VaeLoss {
    pub l1: f64,
    pub l2: f64,
    pub kl: f64,
    pub gan: f64,
    pub total: f64,
}

/// Scores a reconstruction for the adversarial term. Plug a real patch
/// discriminator in here; the default contributes nothing.
pub trait PatchDiscriminator {
    fn gan_term(&self, reconstruction: &MelSpectrogram) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullDiscriminator;

impl PatchDiscriminator for NullDiscriminator {
    fn gan_term(&self, _: &MelSpectrogram) -> f64 {
        0.0
    }
}

/// `l1 * L1 + l2 * L2 + kl * KL(N(mu, sigma^2) || N(0, I)) + gan * gan_term`.
pub fn vae_loss(
    x: &MelSpectrogram,
    x_hat: &MelSpectrogram,
    mu: &Latent,
    log_var: &Latent,
    gan_term: f64,
    weights: &VaeLossWeights,
) -> Result<VaeLoss> {
    weights.validate()?;
    if x.shape() != x_hat.shape() {
        return Err(CodecError::ShapeMismatch(format!(
            "x {:?} vs x_hat {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if mu.shape() != log_var.shape() {
        return Err(CodecError::ShapeMismatch(format!(
            "mu {:?} vs log_var {:?}",
            mu.shape(),
            log_var.shape()
        )));
    }
    if !mu.is_finite() || !log_var.is_finite() {
        return Err(CodecError::NonFinite("latent statistics"));
    }
    if !gan_term.is_finite() {
        return Err(CodecError::NonFinite("gan term"));
    }
    let n = x.grid().len().max(1) as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (a, b) in x.grid().iter().zip(x_hat.grid()) {
        let diff = b - a;
        l1 += diff.abs();
        l2 += diff * diff;
    }
    let nz = mu.len().max(1) as f64;
    let kl = mu
        .iter()
        .zip(log_var.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        / nz;
    let (l1, l2) = (l1 / n, l2 / n);
    let total = weights.l1 * l1 + weights.l2 * l2 + weights.kl * kl + weights.gan * gan_term;
    Ok(VaeLoss {
        l1,
        l2,
        kl,
        gan: gan_term,
        total,
    })
}

/// [`vae_loss`] with the adversarial term taken from `disc`.
pub fn vae_loss_with(
    x: &MelSpectrogram,
    x_hat: &MelSpectrogram,
    mu: &Latent,
    log_var: &Latent,
    disc: &dyn PatchDiscriminator,
    weights: &VaeLossWeights,
) -> Result<VaeLoss> {
    vae_loss(x, x_hat, mu, log_var, disc.gan_term(x_hat), weights)
}
