//! Audio <-> latent plumbing shared by the command line and the tests:
//! waveform -> log-mel -> normalized mel -> codec latent -> scaled latent,
//! and back through Griffin-Lim.

use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, TimeRegion, Waveform};
use crate::codec::{CodecError, CodecParams, LatentCodec};
use crate::diffusion::{
    ddpm_sample, inpaint_sample, sdedit_sample, Condition, Denoiser, DiffusionError, Granularity, InpaintVariant,
    NoiseSchedule, ObservabilityMask, TrainingExample,
};
use crate::latent::Latent;
use crate::mel::{mel_to_waveform_with, GriffinLimOptions, MelConfig, MelError, MelFrontend, MelSpectrogram};
use crate::text::{TextEmbedding, TextEncoder};
use crate::triplet::{DatasetManifest, EditRegion, TripletError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Mel(#[from] MelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Dataset(#[from] TripletError),
    #[error("mask: {0}")]
    Mask(String),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mel: MelConfig,
    pub codec: CodecParams,
    /// Log-mel values are mapped through `(m - mel_center) / mel_spread`
    /// before encoding.
    pub mel_center: f64,
    pub mel_spread: f64,
    /// Multiplier applied to codec latents so they have roughly unit scale.
    pub latent_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            codec: CodecParams::default(),
            mel_center: -4.0,
            mel_spread: 4.0,
            latent_scale: 0.16,
        }
    }
}

/// Converts between waveforms and diffusion latents.
#[derive(Debug, Clone)]
pub struct LatentPipeline {
    config: PipelineConfig,
    front: MelFrontend,
    codec: LatentCodec,
}

impl LatentPipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        if !(config.mel_spread > 0.0) || !(config.latent_scale > 0.0) {
            return Err(PipelineError::Input("mel_spread and latent_scale must be positive".into()));
        }
        Ok(Self {
            front: MelFrontend::new(config.mel)?,
            codec: LatentCodec::new(config.codec)?,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.front
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    pub fn waveform_to_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        Ok(self.front.waveform_to_mel(w)?)
    }

    pub fn mel_to_latent(&self, m: &MelSpectrogram) -> Result<Latent> {
        let c = &self.config;
        let norm = m.grid().mapv(|v| (v - c.mel_center) / c.mel_spread);
        Ok(self.codec.encode_grid(&norm)?.scaled(c.latent_scale))
    }

    pub fn audio_to_latent(&self, w: &Waveform) -> Result<Latent> {
        self.mel_to_latent(&self.waveform_to_mel(w)?)
    }

    pub fn latent_to_mel(&self, z: &Latent) -> Result<MelSpectrogram> {
        let c = &self.config;
        let grid = self.codec.decode_grid(&z.scaled(1.0 / c.latent_scale))?;
        let grid = grid.mapv(|v| v * c.mel_spread + c.mel_center);
        Ok(MelSpectrogram::new(grid, c.mel)?)
    }

    pub fn latent_to_audio(&self, z: &Latent, gl: GriffinLimOptions) -> Result<Waveform> {
        Ok(mel_to_waveform_with(&self.latent_to_mel(z)?, gl)?)
    }

    /// Seconds of audio spanned by a latent of width `w`.
    pub fn latent_seconds(&self, w: usize) -> f64 {
        (w * self.config.codec.downsample) as f64 * self.config.mel.frame_seconds()
    }

    /// Upper frequency edge of the mel bands pooled into each latent row.
    pub fn latent_row_top_hz(&self) -> Vec<f64> {
        let peaks = self.front.filterbank().peak_frequencies();
        let d = self.config.codec.downsample;
        let rows = self.config.mel.n_mels / d;
        (0..rows)
            .map(|i| {
                let above = (i + 1) * d;
                if above < peaks.len() {
                    peaks[above]
                } else {
                    self.config.mel.fmax
                }
            })
            .collect()
    }

    /// Observability mask for `spec` over a latent of `shape`.
    pub fn mask(&self, spec: &MaskSpec, shape: (usize, usize, usize), granularity: Granularity) -> Result<ObservabilityMask> {
        if spec.nothing_observable {
            return Ok(ObservabilityMask::from_grid(Array3::from_elem(shape, false), granularity));
        }
        let clip_s = self.latent_seconds(shape.2);
        for r in &spec.regions {
            if r.end_s > clip_s + 1e-9 {
                return Err(PipelineError::Mask(format!(
                    "region [{}, {}] s ends after the {clip_s:.3} s clip; shorten the region or pass a longer input",
                    r.start_s, r.end_s
                )));
            }
        }
        let time = ObservabilityMask::from_time_regions(shape, &spec.regions, clip_s, granularity)?;
        let grid = match spec.cutoff_hz {
            Some(hz) => {
                let band = ObservabilityMask::from_cutoff(shape, &self.latent_row_top_hz(), hz, granularity)?;
                ndarray::Zip::from(time.grid()).and(band.grid()).map_collect(|&a, &b| a && b)
            }
            None => time.grid().clone(),
        };
        Ok(ObservabilityMask::from_grid(grid, granularity))
    }

    /// Load every record of a dataset as latent training triples.
    pub fn load_training_set(&self, manifest: &DatasetManifest, encoder: &TextEncoder) -> Result<Vec<TrainingExample>> {
        let sr = self.config.mel.sample_rate;
        manifest
            .records
            .par_iter()
            .map(|r| {
                let input = audio::read_wav(&manifest.resolve(&r.input), sr)?;
                let output = audio::read_wav(&manifest.resolve(&r.output), sr)?;
                Ok(TrainingExample {
                    z_in: self.audio_to_latent(&input)?,
                    z_out: self.audio_to_latent(&output)?,
                    text: encoder.encode(&r.instruction),
                })
            })
            .collect()
    }
}

/// Unobservable parts of a clip: time spans, everything above a cutoff, or
/// the whole clip. A default spec leaves everything observable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSpec {
    pub regions: Vec<TimeRegion>,
    pub cutoff_hz: Option<f64>,
    pub nothing_observable: bool,
}

impl MaskSpec {
    /// Line-oriented mask file:
    ///
    /// ```text
    /// # hide two spans and everything above 4 kHz
    /// time 2.0 4.0
    /// time 6.5 7.0
    /// cutoff 4000
    /// ```
    ///
    /// `all` hides the whole clip; `none` (or an empty file) hides nothing.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| PipelineError::Mask(format!("line {}: {m}: {raw:?}", i + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("expected a number"));
            match parts.as_slice() {
                ["time", a, b] => spec.regions.push(TimeRegion::new(num(a)?, num(b)?).map_err(|e| bad(&e.to_string()))?),
                ["cutoff", hz] => {
                    let hz = num(hz)?;
                    if !(hz > 0.0) {
                        return Err(bad("cutoff must be positive"));
                    }
                    spec.cutoff_hz = Some(spec.cutoff_hz.map_or(hz, |c: f64| c.min(hz)));
                }
                ["all"] => spec.nothing_observable = true,
                ["none"] => {}
                _ => return Err(bad("expected `time START END`, `cutoff HZ`, `all` or `none`")),
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Mask(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_edit_region(r: &EditRegion) -> Self {
        match r {
            EditRegion::Time { regions } => Self {
                regions: regions.clone(),
                ..Self::default()
            },
            EditRegion::Band { cutoff_hz } => Self {
                cutoff_hz: Some(*cutoff_hz),
                ..Self::default()
            },
        }
    }
}

/// Which reverse process turns the input latent into the edit.
#[derive(Debug, Clone, PartialEq)]
pub enum EditMode {
    /// Full chain from noise, conditioned on the input latent.
    Ddpm,
    /// Noise the input to step `n`, then denoise.
    Sdedit { n: usize },
    /// Re-impose the observable part of the input at every step.
    Inpaint { variant: InpaintVariant, mask: MaskSpec },
}

/// Everything one edit produced, for dumping.
#[derive(Debug, Clone)]
pub struct EditOutput {
    pub mel_in: MelSpectrogram,
    pub z_in: Latent,
    pub mask: Option<ObservabilityMask>,
    pub z_out: Latent,
    pub mel_out: MelSpectrogram,
    pub waveform: Waveform,
}

pub struct EditRequest<'a> {
    pub input: &'a Waveform,
    pub instruction: &'a str,
    pub mode: EditMode,
    pub guidance: f64,
    pub seed: u64,
    pub griffin_lim: GriffinLimOptions,
}

/// Load, encode, sample, decode and invert one clip.
pub fn edit(
    pipe: &LatentPipeline,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    encoder: &TextEncoder,
    req: &EditRequest<'_>,
) -> Result<EditOutput> {
    let wo_text = matches!(req.mode, EditMode::Inpaint { variant: InpaintVariant::WoText, .. });
    if req.instruction.trim().is_empty() && !wo_text {
        return Err(PipelineError::Input(
            "the instruction is empty; pass one, or use the wo-text inpaint variant".into(),
        ));
    }
    let mel_in = pipe.waveform_to_mel(req.input)?;
    let z_in = pipe.mel_to_latent(&mel_in)?;
    let text: TextEmbedding = encoder.encode(req.instruction);
    let cond = Condition {
        z_in: &z_in,
        text: &text,
        null: encoder.null(),
    };
    let (z_out, mask) = match &req.mode {
        EditMode::Ddpm => (ddpm_sample(den, &cond, sched, req.guidance, req.seed)?, None),
        EditMode::Sdedit { n } => (sdedit_sample(den, &z_in, &cond, sched, req.guidance, *n, req.seed)?, None),
        EditMode::Inpaint { variant, mask } => {
            let gran = if *variant == InpaintVariant::Rough { Granularity::Rough } else { Granularity::Precise };
            let m = pipe.mask(mask, z_in.shape(), gran)?;
            (inpaint_sample(den, &z_in, &m, &cond, sched, req.guidance, req.seed, *variant)?, Some(m))
        }
    };
    let mel_out = pipe.latent_to_mel(&z_out)?;
    // Frames are rounded down, so the tail is padded back to the input length.
    let mut samples = mel_to_waveform_with(&mel_out, req.griffin_lim)?.into_samples();
    samples.resize(req.input.len(), 0.0);
    let waveform = Waveform::new(samples, req.input.sample_rate())?;
    Ok(EditOutput {
        mel_in,
        z_in,
        mask,
        z_out,
        mel_out,
        waveform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::triplet::synth_clips;

    #[test]
    fn latent_shapes_for_ten_seconds() {
        let pipe = LatentPipeline::new(PipelineConfig::default()).unwrap();
        let w = Waveform::silence(10.0, 16_000).unwrap();
        assert_eq!(pipe.audio_to_latent(&w).unwrap().shape(), (4, 10, 78));
        assert!((pipe.latent_seconds(78) - 9.984).abs() < 1e-12);
        let tops = pipe.latent_row_top_hz();
        assert_eq!(tops.len(), 10);
        assert!(tops.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(tops[9], 8000.0);
    }

    /// The codec keeps only low-order patch coefficients, so decoding is a
    /// projection: encoding the decoded mel gives back the same latent.
    #[test]
    fn latent_round_trip_is_a_projection() {
        let pipe = LatentPipeline::new(PipelineConfig::default()).unwrap();
        let clip = &synth_clips(1, 3, 16_000)[0];
        let z = pipe.audio_to_latent(&clip.audio).unwrap();
        let z2 = pipe.mel_to_latent(&pipe.latent_to_mel(&z).unwrap()).unwrap();
        let err = z.sub(&z2).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn latents_have_moderate_scale() {
        let pipe = LatentPipeline::new(PipelineConfig::default()).unwrap();
        let clips = synth_clips(10, 1, 16_000);
        let vals: Vec<f64> = clips
            .iter()
            .flat_map(|c| pipe.audio_to_latent(&c.audio).unwrap().iter().copied().collect::<Vec<_>>())
            .collect();
        let n = vals.len() as f64;
        let rms = (vals.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((0.3..3.0).contains(&rms), "latent rms {rms}");
    }

    #[test]
    fn mask_spec_parsing() {
        let spec = MaskSpec::parse("# comment\ntime 2 4\ntime 6.5 7\ncutoff 4000\ncutoff 6000\n").unwrap();
        assert_eq!(spec.regions.len(), 2);
        assert_eq!(spec.cutoff_hz, Some(4000.0));
        assert!(MaskSpec::parse("all").unwrap().nothing_observable);
        assert_eq!(MaskSpec::parse("none\n\n").unwrap(), MaskSpec::default());
        for bad in ["time 4 2", "cutoff -1", "time 1", "blur 3"] {
            assert!(MaskSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn combined_masks() {
        let pipe = LatentPipeline::new(PipelineConfig::default()).unwrap();
        let shape = (4, 10, 78);
        let all = pipe.mask(&MaskSpec::default(), shape, Granularity::Precise).unwrap();
        assert_eq!(all.count_observable(), 4 * 10 * 78);
        let none = pipe.mask(&MaskSpec::parse("all").unwrap(), shape, Granularity::Precise).unwrap();
        assert_eq!(none.count_observable(), 0);
        let both = pipe
            .mask(&MaskSpec::parse("time 2 3\ncutoff 4000").unwrap(), shape, Granularity::Precise)
            .unwrap();
        let time = pipe.mask(&MaskSpec::parse("time 2 3").unwrap(), shape, Granularity::Precise).unwrap();
        assert!(both.count_observable() < time.count_observable());
        assert!(pipe.mask(&MaskSpec::parse("time 9 12").unwrap(), shape, Granularity::Precise).is_err());
    }

    #[test]
    fn edit_with_all_observable_mask_returns_input_latent() {
        let pipe = LatentPipeline::new(PipelineConfig::default()).unwrap();
        let sched = ScheduleConfig::with_steps(10).build().unwrap();
        let clip = &synth_clips(1, 5, 16_000)[0];
        let w = audio::pad_or_truncate(&clip.audio, 4.0).unwrap();
        let shape = pipe.audio_to_latent(&w).unwrap().shape();
        let oracle = crate::diffusion::GaussianOracle::isotropic(shape, 0.0, 1.0, sched.clone()).unwrap();
        let enc = TextEncoder::default();
        let req = EditRequest {
            input: &w,
            instruction: "Inpaint",
            mode: EditMode::Inpaint { variant: InpaintVariant::Precise, mask: MaskSpec::default() },
            guidance: 1.0,
            seed: 1,
            griffin_lim: GriffinLimOptions { iterations: 4, ..Default::default() },
        };
        let out = edit(&pipe, &oracle, &sched, &enc, &req).unwrap();
        assert_eq!(out.z_out, out.z_in);
        let empty = EditRequest { instruction: " ", mode: EditMode::Ddpm, ..req };
        assert!(edit(&pipe, &oracle, &sched, &enc, &empty).is_err());
    }
}
