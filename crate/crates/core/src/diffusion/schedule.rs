use serde::{Deserialize, Serialize};

use super::{DiffusionError, Result};

/// Linear beta schedule. The endpoints are stated for a 1000-step process
/// and stretched by `1000 / steps`, so shorter schedules still end close to
/// pure noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn full_scale() -> Self {
        Self {
            steps: 1000,
            ..Self::default()
        }
    }

    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self)
    }
}

/// `beta_t` for `t = 1..=T` and the running products `alpha_bar_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    config: Option<ScheduleConfig>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(DiffusionError::Schedule("at least one step is required".into()));
        }
        let stretch = 1000.0 / cfg.steps as f64;
        let (b0, b1) = (cfg.beta_start * stretch, (cfg.beta_end * stretch).min(0.999));
        let betas: Vec<f64> = if cfg.steps == 1 {
            vec![b0.min(0.999)]
        } else {
            (0..cfg.steps)
                .map(|i| b0 + (b1 - b0) * i as f64 / (cfg.steps - 1) as f64)
                .collect()
        };
        let mut s = Self::from_betas(betas)?;
        s.config = Some(*cfg);
        Ok(s)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(DiffusionError::Schedule("at least one step is required".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::Schedule("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DiffusionError::Schedule("betas must be non-decreasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alpha_bars,
            config: None,
        })
    }

    /// The configuration this schedule was built from, if any.
    pub fn config(&self) -> Option<&ScheduleConfig> {
        self.config.as_ref()
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}
