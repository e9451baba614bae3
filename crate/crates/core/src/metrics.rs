//! Objective edit metrics: log spectral distance, Fréchet distance, paired
//! KL divergence and Inception Score over a pluggable embedder.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::mel::{MelError, MelFrontend, MelSpectrogram, LOG_FLOOR};
use crate::seed;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("posterior row {row} sums to {sum}, not 1")]
    NotSimplex { row: usize, sum: f64 },
    #[error("{0} requires class posteriors")]
    MissingPosteriors(&'static str),
    #[error("cannot pair {0} outputs with {1} targets")]
    Unpaired(usize, usize),
    #[error("{0} needs at least one sample")]
    Empty(&'static str),
    #[error("unknown embedder {0:?}")]
    UnknownEmbedder(String),
    #[error("unknown option {0:?}")]
    UnknownOption(String),
    #[error(transparent)]
    Mel(#[from] MelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Covariance regularizer added to both Gaussian fits.
pub const FD_EPSILON: f64 = 1e-6;
/// Probability floor for the KL metric.
pub const KL_EPSILON: f64 = 1e-10;

/// `n x d` embeddings with optional `n x k` class posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Array2<f64>,
    posteriors: Option<Array2<f64>>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Array2<f64>, posteriors: Option<Array2<f64>>) -> Result<Self> {
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite("embeddings"));
        }
        if let Some(p) = &posteriors {
            if p.nrows() != embeddings.nrows() {
                return Err(MetricsError::Shape(format!(
                    "{} posterior rows for {} embeddings",
                    p.nrows(),
                    embeddings.nrows()
                )));
            }
            for (row, r) in p.outer_iter().enumerate() {
                let sum = r.sum();
                if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return Err(MetricsError::NotSimplex { row, sum });
                }
            }
        }
        Ok(Self { embeddings, posteriors })
    }

    pub fn from_posteriors(posteriors: Array2<f64>) -> Result<Self> {
        let n = posteriors.nrows();
        Self::new(Array2::zeros((n, 0)), Some(posteriors))
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn posteriors(&self) -> Option<&Array2<f64>> {
        self.posteriors.as_ref()
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which spectrogram LSD compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumKind {
    Mel,
    Linear,
}

impl std::str::FromStr for SpectrumKind {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(Self::Mel),
            "linear" => Ok(Self::Linear),
            other => Err(MetricsError::UnknownOption(other.into())),
        }
    }
}

/// Mean over frames (columns) of the RMS difference between two
/// log-magnitude grids.
pub fn lsd(out: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if out.dim() != target.dim() {
        return Err(MetricsError::Shape(format!("{:?} vs {:?}", out.dim(), target.dim())));
    }
    if out.ncols() == 0 || out.nrows() == 0 {
        return Err(MetricsError::Empty("lsd"));
    }
    let rows = out.nrows() as f64;
    let total: f64 = out
        .axis_iter(Axis(1))
        .zip(target.axis_iter(Axis(1)))
        .map(|(a, b)| (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / rows).sqrt())
        .sum();
    let v = total / out.ncols() as f64;
    if !v.is_finite() {
        return Err(MetricsError::NonFinite("spectrogram"));
    }
    Ok(v)
}

pub fn lsd_mel(out: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    lsd(out.grid(), target.grid())
}

/// Log spectrogram of `w` of the requested kind, natural log of power.
pub fn log_spectrum(front: &MelFrontend, w: &Waveform, kind: SpectrumKind) -> Result<Array2<f64>> {
    match kind {
        SpectrumKind::Mel => Ok(front.waveform_to_mel(w)?.into_grid()),
        SpectrumKind::Linear => {
            let signal: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
            let frames = front.config().frames_for(signal.len()).min(front.stft().max_frames(signal.len()));
            if frames == 0 {
                return Err(MetricsError::Empty("linear spectrogram"));
            }
            Ok(front.power_spectrogram(&signal, frames).mapv(|p| (p + LOG_FLOOR).ln()))
        }
    }
}

fn gaussian_fit(x: &Array2<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        let centered = x - &mean;
        let c = centered.t().dot(&centered) / (n as f64 - 1.0);
        for ((i, j), v) in c.indexed_iter() {
            cov[(i, j)] = *v;
        }
    }
    for i in 0..d {
        cov[(i, i)] += FD_EPSILON;
    }
    (DMatrix::from_column_slice(d, 1, mean.as_slice().expect("contiguous mean")), cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})` between Gaussian
/// fits, each covariance regularized by [`FD_EPSILON`]. The trace of the
/// square root is taken as `Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`, which has
/// the same eigenvalues and stays symmetric. A single sample has zero
/// covariance.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty("frechet distance"));
    }
    if a.embeddings.ncols() != b.embeddings.ncols() {
        return Err(MetricsError::Shape(format!(
            "embedding dims {} vs {}",
            a.embeddings.ncols(),
            b.embeddings.ncols()
        )));
    }
    let (ma, sa) = gaussian_fit(&a.embeddings);
    let (mb, sb) = gaussian_fit(&b.embeddings);
    let ra = sym_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&ma - &mb).norm_squared();
    let fd = diff + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if !fd.is_finite() {
        return Err(MetricsError::NonFinite("frechet distance"));
    }
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(p_target || p_output)`.
    TargetOutput,
    /// `KL(p_output || p_target)`.
    OutputTarget,
}

impl std::str::FromStr for KlDirection {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target-output" => Ok(Self::TargetOutput),
            "output-target" => Ok(Self::OutputTarget),
            other => Err(MetricsError::UnknownOption(other.into())),
        }
    }
}

/// KL divergence between two distributions after flooring every
/// probability at `eps` and renormalizing.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let floor = |v: &[f64]| {
        let f: Vec<f64> = v.iter().map(|x| x.max(eps)).collect();
        let s: f64 = f.iter().sum();
        f.into_iter().map(move |x| x / s)
    };
    floor(p).zip(floor(q)).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Mean KL over index-paired posteriors.
pub fn kl_metric(output: &EmbeddingSet, target: &EmbeddingSet, direction: KlDirection, eps: f64) -> Result<f64> {
    let po = output.posteriors.as_ref().ok_or(MetricsError::MissingPosteriors("kl"))?;
    let pt = target.posteriors.as_ref().ok_or(MetricsError::MissingPosteriors("kl"))?;
    if po.nrows() != pt.nrows() {
        return Err(MetricsError::Unpaired(po.nrows(), pt.nrows()));
    }
    if po.nrows() == 0 {
        return Err(MetricsError::Empty("kl"));
    }
    if po.ncols() != pt.ncols() {
        return Err(MetricsError::Shape(format!("{} vs {} classes", po.ncols(), pt.ncols())));
    }
    let total: f64 = po
        .outer_iter()
        .zip(pt.outer_iter())
        .map(|(o, t)| {
            let (o, t) = (o.to_vec(), t.to_vec());
            match direction {
                KlDirection::TargetOutput => kl_divergence(&t, &o, eps),
                KlDirection::OutputTarget => kl_divergence(&o, &t, eps),
            }
        })
        .sum();
    Ok(total / po.nrows() as f64)
}

/// Neumaier summation; the score is exponentiated, so rounding in the sum
/// is magnified.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

/// `exp(mean_n KL(p_n || p_bar))`.
pub fn inception_score(set: &EmbeddingSet) -> Result<f64> {
    let p = set.posteriors.as_ref().ok_or(MetricsError::MissingPosteriors("inception score"))?;
    if p.nrows() == 0 {
        return Err(MetricsError::Empty("inception score"));
    }
    let n = p.nrows() as f64;
    let marginal: Vec<f64> = p.columns().into_iter().map(|c| compensated_sum(c.iter().copied()) / n).collect();
    let terms = p.outer_iter().flat_map(|row| {
        row.iter()
            .zip(&marginal)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, m)| a * (a.ln() - m.ln()))
            .collect::<Vec<_>>()
    });
    let mean_kl = compensated_sum(terms) / n;
    Ok(mean_kl.max(0.0).exp())
}

/// Maps a mel spectrogram to an embedding and a class posterior.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, m: &MelSpectrogram) -> (Vec<f64>, Vec<f64>);
}

/// Per-band statistics: means, variances and mean absolute frame-to-frame
/// deltas of the log-mel grid. The posterior is a softmax over a fixed
/// random linear head.
#[derive(Debug, Clone)]
pub struct MelStatsEmbedder {
    head: Array2<f64>,
    n_mels: usize,
}

impl MelStatsEmbedder {
    pub const NAME: &'static str = "mel-stats";
    pub const CLASSES: usize = 16;

    pub fn new(n_mels: usize) -> Self {
        let d = 3 * n_mels;
        let mut rng = seed::rng_for(0x6d65_6c73, "metrics/mel-stats/head");
        let std = 4.0 / (d as f64).sqrt();
        let head = Array2::from_shape_simple_fn((Self::CLASSES, d), || std * rng.sample::<f64, _>(StandardNormal));
        Self { head, n_mels }
    }

    pub fn stats(m: &MelSpectrogram) -> Vec<f64> {
        let g = m.grid();
        let frames = g.ncols().max(1) as f64;
        let mut means = Vec::with_capacity(g.nrows());
        let mut vars = Vec::with_capacity(g.nrows());
        let mut deltas = Vec::with_capacity(g.nrows());
        for row in g.outer_iter() {
            let mean = row.sum() / frames;
            means.push(mean);
            vars.push(row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frames);
            let d: f64 = row.iter().zip(row.iter().skip(1)).map(|(a, b)| (b - a).abs()).sum();
            deltas.push(if g.ncols() > 1 { d / (frames - 1.0) } else { 0.0 });
        }
        means.into_iter().chain(vars).chain(deltas).collect()
    }
}

impl Embedder for MelStatsEmbedder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn embed(&self, m: &MelSpectrogram) -> (Vec<f64>, Vec<f64>) {
        let e = Self::stats(m);
        let n = self.n_mels.min(m.n_mels());
        // Bring the three blocks to comparable scales before the head.
        let z: Vec<f64> = e
            .iter()
            .enumerate()
            .map(|(i, v)| match i / n.max(1) {
                0 => (v + 4.0) / 4.0,
                1 => v / 16.0,
                _ => v / 4.0,
            })
            .collect();
        let logits: Vec<f64> = if z.len() == self.head.ncols() {
            self.head.outer_iter().map(|w| w.iter().zip(&z).map(|(a, b)| a * b).sum()).collect()
        } else {
            vec![0.0; Self::CLASSES]
        };
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = exp.iter().sum();
        (e, exp.into_iter().map(|v| v / s).collect())
    }
}

/// Named embedders, so a real classifier can be plugged in.
pub struct EmbedderRegistry {
    entries: BTreeMap<String, Box<dyn Embedder>>,
}

impl EmbedderRegistry {
    pub fn with_builtins(n_mels: usize) -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(MelStatsEmbedder::new(n_mels)));
        r
    }

    pub fn register(&mut self, e: Box<dyn Embedder>) {
        self.entries.insert(e.name().to_string(), e);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Embedder> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| MetricsError::UnknownEmbedder(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// Shorthand for the default embedder.
pub fn mel_stats_embedder(m: &MelSpectrogram) -> (Vec<f64>, Vec<f64>) {
    MelStatsEmbedder::new(m.n_mels()).embed(m)
}

pub fn embed_set(embedder: &dyn Embedder, mels: &[MelSpectrogram]) -> Result<EmbeddingSet> {
    let rows: Vec<(Vec<f64>, Vec<f64>)> = mels.par_iter().map(|m| embedder.embed(m)).collect();
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.0.len());
    let k = rows.first().map_or(0, |r| r.1.len());
    if rows.iter().any(|r| r.0.len() != d || r.1.len() != k) {
        return Err(MetricsError::Shape("embedder produced ragged rows".into()));
    }
    let e = Array2::from_shape_vec((n, d), rows.iter().flat_map(|r| r.0.iter().copied()).collect())
        .map_err(|e| MetricsError::Shape(e.to_string()))?;
    let p = Array2::from_shape_vec((n, k), rows.iter().flat_map(|r| r.1.iter().copied()).collect())
        .map_err(|e| MetricsError::Shape(e.to_string()))?;
    EmbeddingSet::new(e, Some(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Better {
    Lower,
    Higher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub better: Better,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub name: String,
    pub lsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub embedder: String,
    pub spectrum: SpectrumKind,
    pub kl_direction: KlDirection,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            embedder: MelStatsEmbedder::NAME.into(),
            spectrum: SpectrumKind::Mel,
            kl_direction: KlDirection::TargetOutput,
        }
    }
}

/// Set-level scores plus per-pair LSD. Serialized as pretty JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lsd: Score,
    pub kl: Score,
    pub fd: Score,
    pub is: Score,
    pub pairs: Vec<PairScore>,
    pub skipped: Vec<String>,
    pub settings: EvalSettings,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Score paired `(name, output, target)` clips.
pub fn evaluate(
    pairs: &[(String, Waveform, Waveform)],
    front: &MelFrontend,
    registry: &EmbedderRegistry,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("evaluation"));
    }
    let embedder = registry.get(&settings.embedder)?;
    struct Row {
        lsd: f64,
        out_mel: MelSpectrogram,
        ref_mel: MelSpectrogram,
    }
    let rows: Vec<Row> = pairs
        .par_iter()
        .map(|(name, out, reference)| {
            let out_mel = front.waveform_to_mel(out)?;
            let ref_mel = front.waveform_to_mel(reference)?;
            let a = log_spectrum(front, out, settings.spectrum)?;
            let b = log_spectrum(front, reference, settings.spectrum)?;
            let lsd = lsd(&a, &b).map_err(|e| match e {
                MetricsError::Shape(m) => MetricsError::Shape(format!("{name}: {m}")),
                other => other,
            })?;
            Ok(Row { lsd, out_mel, ref_mel })
        })
        .collect::<Result<_>>()?;
    let outs: Vec<MelSpectrogram> = rows.iter().map(|r| r.out_mel.clone()).collect();
    let refs: Vec<MelSpectrogram> = rows.iter().map(|r| r.ref_mel.clone()).collect();
    let eo = embed_set(embedder, &outs)?;
    let er = embed_set(embedder, &refs)?;
    let lsd_mean = rows.iter().map(|r| r.lsd).sum::<f64>() / rows.len() as f64;
    let lower = |value| Score { value, better: Better::Lower };
    Ok(EvalReport {
        lsd: lower(lsd_mean),
        kl: lower(kl_metric(&eo, &er, settings.kl_direction, KL_EPSILON)?),
        fd: lower(frechet_distance(&eo, &er)?),
        is: Score {
            value: inception_score(&eo)?,
            better: Better::Higher,
        },
        pairs: pairs.iter().zip(&rows).map(|((n, _, _), r)| PairScore { name: n.clone(), lsd: r.lsd }).collect(),
        skipped: Vec::new(),
        settings: settings.clone(),
    })
}
