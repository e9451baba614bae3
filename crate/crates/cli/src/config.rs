//! Run configuration: built-in defaults, then a `key = value` file, then
//! `TRIPLEDIT_*` environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tripledit_core::diffusion::{Arch, GuidanceConfig, LinearConfig, OptimizerConfig, ScheduleConfig, TinyConfig};
use tripledit_core::metrics::{EvalSettings, KlDirection, SpectrumKind};
use tripledit_core::pipeline::PipelineConfig;
use tripledit_core::text::TextEncoderConfig;
use tripledit_core::triplet::{TaskMix, TripletConfig};

pub const ENV_PREFIX: &str = "TRIPLEDIT_";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub text: TextEncoderConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub optimizer: OptimizerConfig,
    pub train_steps: usize,
    pub batch_size: usize,
    pub arch: String,
    pub hidden: usize,
    pub oracle_mean: f64,
    pub oracle_var: f64,
    pub triplet: TripletConfig,
    pub dataset_total: usize,
    pub task_mix: String,
    pub griffin_lim_iterations: usize,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            dataset: None,
            checkpoint: None,
            pipeline: PipelineConfig::default(),
            text: TextEncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            optimizer: OptimizerConfig::default(),
            train_steps: 200,
            batch_size: 8,
            arch: "tiny".into(),
            hidden: TinyConfig::default().hidden,
            oracle_mean: 0.0,
            oracle_var: 1.0,
            triplet: TripletConfig::default(),
            dataset_total: 50,
            task_mix: "add=1,drop=1,replace=1,inpaint=1,super-resolution=1".into(),
            griffin_lim_iterations: 60,
            eval: EvalSettings::default(),
        }
    }
}

/// Every recognised key, in the order `show` prints them.
pub const KEYS: &[&str] = &[
    "seed",
    "corpus",
    "dataset",
    "checkpoint",
    "mel.sample_rate",
    "mel.hop",
    "mel.window",
    "mel.n_mels",
    "mel.fmin",
    "mel.fmax",
    "mel.frame_multiple",
    "codec.downsample",
    "codec.channels",
    "latent.scale",
    "latent.mel_center",
    "latent.mel_spread",
    "text.dim",
    "text.max_length",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "guidance.scale",
    "guidance.p_drop",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.cosine",
    "model.arch",
    "model.hidden",
    "model.oracle_mean",
    "model.oracle_var",
    "dataset.total",
    "dataset.mix",
    "dataset.clip_s",
    "dataset.event_max_s",
    "dataset.replace_jitter_s",
    "dataset.lowercase_captions",
    "griffin_lim.iterations",
    "eval.embedder",
    "eval.spectrum",
    "eval.kl_direction",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("{key} = {value:?}: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.pipeline;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "corpus" => self.corpus = Some(v.into()),
            "dataset" => self.dataset = Some(v.into()),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "mel.sample_rate" => {
                p.mel.sample_rate = parse(key, v)?;
                self.triplet.sample_rate = p.mel.sample_rate;
            }
            "mel.hop" => p.mel.hop = parse(key, v)?,
            "mel.window" => p.mel.window = parse(key, v)?,
            "mel.n_mels" => p.mel.n_mels = parse(key, v)?,
            "mel.fmin" => p.mel.fmin = parse(key, v)?,
            "mel.fmax" => p.mel.fmax = parse(key, v)?,
            "mel.frame_multiple" => p.mel.frame_multiple = parse(key, v)?,
            "codec.downsample" => p.codec.downsample = parse(key, v)?,
            "codec.channels" => p.codec.channels = parse(key, v)?,
            "latent.scale" => p.latent_scale = parse(key, v)?,
            "latent.mel_center" => p.mel_center = parse(key, v)?,
            "latent.mel_spread" => p.mel_spread = parse(key, v)?,
            "text.dim" => self.text.dim = parse(key, v)?,
            "text.max_length" => self.text.max_length = parse(key, v)?,
            "schedule.steps" => self.schedule.steps = parse(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(key, v)?,
            "guidance.scale" => self.guidance.scale = parse(key, v)?,
            "guidance.p_drop" => self.guidance.p_drop = parse(key, v)?,
            "train.steps" => self.train_steps = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr" => self.optimizer.lr = parse(key, v)?,
            "train.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "train.cosine" => self.optimizer.cosine = parse(key, v)?,
            "model.arch" => self.arch = v.to_string(),
            "model.hidden" => self.hidden = parse(key, v)?,
            "model.oracle_mean" => self.oracle_mean = parse(key, v)?,
            "model.oracle_var" => self.oracle_var = parse(key, v)?,
            "dataset.total" => self.dataset_total = parse(key, v)?,
            "dataset.mix" => self.task_mix = v.to_string(),
            "dataset.clip_s" => self.triplet.clip_s = parse(key, v)?,
            "dataset.event_max_s" => self.triplet.event_max_s = parse(key, v)?,
            "dataset.replace_jitter_s" => self.triplet.replace_jitter_s = parse(key, v)?,
            "dataset.lowercase_captions" => self.triplet.captions.lowercase = parse(key, v)?,
            "griffin_lim.iterations" => self.griffin_lim_iterations = parse(key, v)?,
            "eval.embedder" => self.eval.embedder = v.to_string(),
            "eval.spectrum" => self.eval.spectrum = parse::<SpectrumKind>(key, v)?,
            "eval.kl_direction" => self.eval.kl_direction = parse::<KlDirection>(key, v)?,
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let p = &self.pipeline;
        let path = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "seed" => self.seed.to_string(),
            "corpus" => path(&self.corpus),
            "dataset" => path(&self.dataset),
            "checkpoint" => path(&self.checkpoint),
            "mel.sample_rate" => p.mel.sample_rate.to_string(),
            "mel.hop" => p.mel.hop.to_string(),
            "mel.window" => p.mel.window.to_string(),
            "mel.n_mels" => p.mel.n_mels.to_string(),
            "mel.fmin" => p.mel.fmin.to_string(),
            "mel.fmax" => p.mel.fmax.to_string(),
            "mel.frame_multiple" => p.mel.frame_multiple.to_string(),
            "codec.downsample" => p.codec.downsample.to_string(),
            "codec.channels" => p.codec.channels.to_string(),
            "latent.scale" => p.latent_scale.to_string(),
            "latent.mel_center" => p.mel_center.to_string(),
            "latent.mel_spread" => p.mel_spread.to_string(),
            "text.dim" => self.text.dim.to_string(),
            "text.max_length" => self.text.max_length.to_string(),
            "schedule.steps" => self.schedule.steps.to_string(),
            "schedule.beta_start" => self.schedule.beta_start.to_string(),
            "schedule.beta_end" => self.schedule.beta_end.to_string(),
            "guidance.scale" => self.guidance.scale.to_string(),
            "guidance.p_drop" => self.guidance.p_drop.to_string(),
            "train.steps" => self.train_steps.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.lr" => self.optimizer.lr.to_string(),
            "train.weight_decay" => self.optimizer.weight_decay.to_string(),
            "train.cosine" => self.optimizer.cosine.to_string(),
            "model.arch" => self.arch.clone(),
            "model.hidden" => self.hidden.to_string(),
            "model.oracle_mean" => self.oracle_mean.to_string(),
            "model.oracle_var" => self.oracle_var.to_string(),
            "dataset.total" => self.dataset_total.to_string(),
            "dataset.mix" => self.task_mix.clone(),
            "dataset.clip_s" => self.triplet.clip_s.to_string(),
            "dataset.event_max_s" => self.triplet.event_max_s.to_string(),
            "dataset.replace_jitter_s" => self.triplet.replace_jitter_s.to_string(),
            "dataset.lowercase_captions" => self.triplet.captions.lowercase.to_string(),
            "griffin_lim.iterations" => self.griffin_lim_iterations.to_string(),
            "eval.embedder" => self.eval.embedder.clone(),
            "eval.spectrum" => serde_json::to_string(&self.eval.spectrum).unwrap_or_default().trim_matches('"').to_string(),
            "eval.kl_direction" => serde_json::to_string(&self.eval.kl_direction).unwrap_or_default().trim_matches('"').to_string(),
            _ => String::new(),
        }
    }

    /// Apply a config file. Lines are `key = value`; `[section]` headers
    /// prefix the keys that follow; `#` starts a comment. Relative paths
    /// are resolved against the file's directory.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            let v = v.trim().trim_matches('"');
            let v = if matches!(key.as_str(), "corpus" | "dataset" | "checkpoint") && Path::new(v).is_relative() {
                base.join(v).display().to_string()
            } else {
                v.to_string()
            };
            self.set(&key, &v).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// `TRIPLEDIT_MEL_HOP` sets `mel.hop`, and so on.
    pub fn apply_env(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<()> {
        let vars: Vec<(String, String)> = vars.collect();
        for key in KEYS {
            let name = env_name(key);
            if let Some((_, v)) = vars.iter().find(|(k, _)| *k == name) {
                self.set(key, v).with_context(|| format!("environment variable {name}"))?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.mel.validate()?;
        self.pipeline.codec.validate()?;
        if self.pipeline.mel.frame_multiple % self.pipeline.codec.downsample != 0 {
            bail!(
                "mel.frame_multiple ({}) must be a multiple of codec.downsample ({})",
                self.pipeline.mel.frame_multiple,
                self.pipeline.codec.downsample
            );
        }
        if self.pipeline.mel.n_mels % self.pipeline.codec.downsample != 0 {
            bail!("mel.n_mels must be a multiple of codec.downsample");
        }
        self.guidance.validate()?;
        self.schedule.build()?;
        self.triplet.validate()?;
        self.arch()?;
        Ok(())
    }

    pub fn task_mix(&self) -> Result<TaskMix> {
        Ok(TaskMix::parse(&self.task_mix)?)
    }

    pub fn arch(&self) -> Result<Arch> {
        Ok(match self.arch.as_str() {
            "tiny" => Arch::Tiny(TinyConfig {
                channels: self.pipeline.codec.channels,
                hidden: self.hidden,
                text_dim: self.text.dim,
                ..TinyConfig::default()
            }),
            "linear" => Arch::Linear(LinearConfig { steps: self.schedule.steps }),
            "gaussian-oracle" => Arch::GaussianOracle {
                mean: self.oracle_mean,
                var: self.oracle_var,
            },
            other => bail!("unknown model.arch {other:?} (expected tiny, linear or gaussian-oracle)"),
        })
    }

    pub fn show(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}
