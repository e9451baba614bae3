use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cfg_epsilon, forward_diffuse, Condition, Denoiser, DiffusionError, NoiseSchedule, ObservabilityMask, Result};
use crate::latent::Latent;
use crate::seed;

/// One ancestral step `z_t -> z_{t-1}` with reverse variance `beta_t`.
/// No noise is added on the final step (`t == 1`).
pub fn reverse_step<R: Rng + ?Sized>(
    z_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent> {
    let beta = sched.beta(t)?;
    let alpha = 1.0 - beta;
    let ab = sched.alpha_bar(t)?;
    let mut mean = z_t.lin_comb(1.0 / alpha.sqrt(), eps_hat, -beta / ((1.0 - ab).sqrt() * alpha.sqrt()));
    if t > 1 {
        let noise = Latent::randn(z_t.shape(), rng);
        mean = mean.lin_comb(1.0, &noise, beta.sqrt());
    }
    if !mean.is_finite() {
        return Err(DiffusionError::Diverged { what: "latent", t });
    }
    Ok(mean)
}

fn chain_rng(seed: u64) -> ChaCha8Rng {
    seed::rng_for(seed, "diffusion/chain")
}

fn run_chain(
    den: &dyn Denoiser,
    mut z: Latent,
    from: usize,
    cond: &Condition<'_>,
    sched: &NoiseSchedule,
    s: f64,
    rng: &mut ChaCha8Rng,
    mut after_step: impl FnMut(&mut Latent, usize) -> Result<()>,
) -> Result<Latent> {
    for t in (1..=from).rev() {
        let eps = cfg_epsilon(den, &z, t, cond, s)?;
        z = reverse_step(&z, &eps, t, sched, rng)?;
        after_step(&mut z, t - 1)?;
    }
    Ok(z)
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`, guided by
/// [`cfg_epsilon`] at every step. The output has the shape of `cond.z_in`.
pub fn ddpm_sample(den: &dyn Denoiser, cond: &Condition<'_>, sched: &NoiseSchedule, s: f64, seed: u64) -> Result<Latent> {
    let mut rng = chain_rng(seed);
    let z_t = Latent::randn(cond.z_in.shape(), &mut rng);
    run_chain(den, z_t, sched.steps(), cond, sched, s, &mut rng, |_, _| Ok(()))
}

/// Noise `z_input` to step `n`, then denoise back to step 0 with the same
/// step rule as [`ddpm_sample`]. `n == 0` returns the input unchanged.
pub fn sdedit_sample(
    den: &dyn Denoiser,
    z_input: &Latent,
    cond: &Condition<'_>,
    sched: &NoiseSchedule,
    s: f64,
    n: usize,
    seed: u64,
) -> Result<Latent> {
    if n > sched.steps() {
        return Err(DiffusionError::Step { t: n, steps: sched.steps() });
    }
    if n == 0 {
        return Ok(z_input.clone());
    }
    let mut rng = chain_rng(seed);
    let eps = Latent::randn(z_input.shape(), &mut rng);
    let z_n = forward_diffuse(z_input, n, &eps, sched)?;
    run_chain(den, z_n, n, cond, sched, s, &mut rng, |_, _| Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InpaintVariant {
    Rough,
    Precise,
    /// Precise mask, empty text.
    WoText,
}

impl std::str::FromStr for InpaintVariant {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rough" => Ok(Self::Rough),
            "precise" => Ok(Self::Precise),
            "wo-text" | "wotext" => Ok(Self::WoText),
            other => Err(DiffusionError::Config(format!("unknown inpaint variant {other:?}"))),
        }
    }
}

/// Reverse chain that re-imposes the observable part of `z_input` after
/// every step, noised to the matching level. The chain itself consumes the
/// same random stream as [`ddpm_sample`], so a mask with nothing observable
/// reproduces it exactly; the observable entries of the result equal
/// `z_input` bit for bit.
pub fn inpaint_sample(
    den: &dyn Denoiser,
    z_input: &Latent,
    mask: &ObservabilityMask,
    cond: &Condition<'_>,
    sched: &NoiseSchedule,
    s: f64,
    seed: u64,
    variant: InpaintVariant,
) -> Result<Latent> {
    if mask.shape() != z_input.shape() {
        return Err(DiffusionError::Shape(format!(
            "mask {:?} vs latent {:?}",
            mask.shape(),
            z_input.shape()
        )));
    }
    let cond = Condition {
        text: if variant == InpaintVariant::WoText { cond.null } else { cond.text },
        ..*cond
    };
    let mut known_rng = seed::rng_for(seed, "diffusion/inpaint-known");
    let mut rng = chain_rng(seed);
    let z_t = Latent::randn(z_input.shape(), &mut rng);
    let any_observable = mask.count_observable() > 0;
    run_chain(den, z_t, sched.steps(), &cond, sched, s, &mut rng, |z, t| {
        if !any_observable {
            return Ok(());
        }
        let known = if t == 0 {
            z_input.clone()
        } else {
            let eps = Latent::randn(z_input.shape(), &mut known_rng);
            forward_diffuse(z_input, t, &eps, sched)?
        };
        mask.impose(z, &known);
        Ok(())
    })
}
