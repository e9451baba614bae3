//! Conditional latent diffusion: forward process, noise-prediction loss with
//! text dropout, channel-concatenated conditioning, ancestral sampling with
//! two-condition classifier-free guidance, and the SDEdit-style baselines.

mod mask;
mod model;
mod preset;
mod sampler;
mod schedule;
mod train;

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::Latent;
use crate::text::TextEmbedding;

pub use mask::{Granularity, ObservabilityMask};
pub use model::{Arch, LinearConfig, Model, TinyConfig};
pub use preset::{UNetPreset, EDITING_UNET, GENERATIVE_UNET};
pub use sampler::{ddpm_sample, inpaint_sample, reverse_step, sdedit_sample, InpaintVariant};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{
    epoch_means, ldm_loss, read_loss_curve, train, train_until, write_loss_curve, AdamW, Checkpoint, OptimizerConfig,
    TrainConfig, TrainState, TrainingExample,
};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {t} is outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("guidance coefficient must be >= 1, got {0}")]
    Guidance(f64),
    #[error("non-finite {what} at step {t}")]
    Diverged { what: &'static str, t: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// The noise predictor `eps_theta(z_t, t, z_in, c_text)`.
pub trait Denoiser: Sync {
    fn predict(&self, z_t: &Latent, t: usize, z_in: &Latent, text: &TextEmbedding) -> Result<Latent>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, z_t: &Latent, t: usize, z_in: &Latent, text: &TextEmbedding) -> Result<Latent> {
        (**self).predict(z_t, t, z_in, text)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, z_t: &Latent, t: usize, z_in: &Latent, text: &TextEmbedding) -> Result<Latent> {
        (**self).predict(z_t, t, z_in, text)
    }
}

/// Everything the sampler conditions on.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    pub z_in: &'a Latent,
    pub text: &'a TextEmbedding,
    /// The empty-text embedding used for the unconditional branch.
    pub null: &'a TextEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub p_drop: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            p_drop: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0) || !self.scale.is_finite() {
            return Err(DiffusionError::Guidance(self.scale));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(DiffusionError::Config(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        Ok(())
    }
}

fn same_shape(a: &Latent, b: &Latent, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`; `t = 0` returns `z0`.
pub fn forward_diffuse(z0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    same_shape(z0, eps, "z0 and eps")?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = sched.alpha_bar(t)?;
    Ok(z0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Stack `z_t` over `z_in` along the channel axis.
pub fn concat_condition(z_t: &Latent, z_in: &Latent) -> Result<Latent> {
    let (_, h, w) = z_t.shape();
    let (_, h2, w2) = z_in.shape();
    if (h, w) != (h2, w2) {
        return Err(DiffusionError::Shape(format!(
            "z_t is {h}x{w} but z_in is {h2}x{w2}"
        )));
    }
    let stacked = concatenate(Axis(0), &[z_t.grid().view(), z_in.grid().view()])
        .map_err(|e| DiffusionError::Shape(e.to_string()))?;
    Ok(Latent::new(stacked))
}

/// Inverse of [`concat_condition`] for a stack with `c` channels on top.
pub fn split_condition(stacked: &Latent, c: usize) -> Result<(Latent, Latent)> {
    if c > stacked.channels() {
        return Err(DiffusionError::Shape(format!(
            "cannot take {c} channels from {}",
            stacked.channels()
        )));
    }
    let g = stacked.grid();
    Ok((
        Latent::new(g.slice(s![..c, .., ..]).to_owned()),
        Latent::new(g.slice(s![c.., .., ..]).to_owned()),
    ))
}

/// Classifier-free guidance over the text condition:
/// `eps(.., null) + s * (eps(.., text) - eps(.., null))`.
///
/// Always evaluates the denoiser exactly twice. With `s == 1` the
/// conditional prediction is returned unchanged.
pub fn cfg_epsilon(den: &dyn Denoiser, z_t: &Latent, t: usize, cond: &Condition<'_>, s: f64) -> Result<Latent> {
    if !(s >= 1.0) || !s.is_finite() {
        return Err(DiffusionError::Guidance(s));
    }
    let uncond = den.predict(z_t, t, cond.z_in, cond.null)?;
    let conditional = den.predict(z_t, t, cond.z_in, cond.text)?;
    same_shape(z_t, &conditional, "denoiser output")?;
    same_shape(z_t, &uncond, "denoiser output")?;
    let out = if s == 1.0 {
        conditional
    } else {
        let mut g = uncond.into_grid();
        ndarray::Zip::from(&mut g)
            .and(conditional.grid())
            .for_each(|u, &c| *u += s * (c - *u));
        Latent::new(g)
    };
    if !out.is_finite() {
        return Err(DiffusionError::Diverged { what: "guided noise prediction", t });
    }
    Ok(out)
}

/// Exact posterior-mean noise for Gaussian data `z0 ~ N(mean, diag(var))`:
/// `(z_t - sqrt(ab) mean) sqrt(1 - ab) / (ab var + 1 - ab)`. Ignores `z_in`
/// and the text.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mean: Latent,
    var: Latent,
    sched: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mean: Latent, var: Latent, sched: NoiseSchedule) -> Result<Self> {
        same_shape(&mean, &var, "oracle mean and variance")?;
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(DiffusionError::Config("oracle variances must be positive".into()));
        }
        Ok(Self { mean, var, sched })
    }

    /// Same mean and variance in every entry.
    pub fn isotropic(shape: (usize, usize, usize), mean: f64, var: f64, sched: NoiseSchedule) -> Result<Self> {
        Self::new(Latent::from_elem(shape, mean), Latent::from_elem(shape, var), sched)
    }
}

/// Constructor alias for [`GaussianOracle::new`].
pub fn make_gaussian_oracle_denoiser(mean: Latent, var: Latent, sched: NoiseSchedule) -> Result<GaussianOracle> {
    GaussianOracle::new(mean, var, sched)
}

impl Denoiser for GaussianOracle {
    fn predict(&self, z_t: &Latent, t: usize, _z_in: &Latent, _text: &TextEmbedding) -> Result<Latent> {
        same_shape(z_t, &self.mean, "oracle input")?;
        let ab = self.sched.alpha_bar(t)?;
        let (ra, rb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = z_t.grid().clone();
        ndarray::Zip::from(&mut out)
            .and(self.mean.grid())
            .and(self.var.grid())
            .for_each(|z, &m, &v| *z = (*z - ra * m) * rb / (ab * v + 1.0 - ab));
        Ok(Latent::new(out))
    }
}
