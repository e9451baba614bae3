//! Trainable desk-scale denoisers.
//!
//! `Tiny` is a one-hidden-layer convolutional network:
//!
//! ```text
//! x    = concat(z_t, z_in)                         (2C x h x w)
//! pre  = conv3x3(x) + b1 + Wt emb(t) + Wa attn(c)  (H x h x w)
//! out  = W2 silu(pre) + S x + b2                   (C x h x w)
//! ```
//!
//! where `attn(c)` pools the text tokens with a learned query, a single-head
//! cross-attention. `Linear` predicts `a_t z_t + b_t z_in` with one pair of
//! scalars per step.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{concat_condition, Denoiser, DiffusionError, GaussianOracle, NoiseSchedule, Result};
use crate::latent::Latent;
use crate::seed;
use crate::text::TextEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub channels: usize,
    pub hidden: usize,
    pub text_dim: usize,
    pub time_dim: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            hidden: 16,
            text_dim: 64,
            time_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arch {
    Tiny(TinyConfig),
    Linear(LinearConfig),
    /// Analytic noise predictor for isotropic Gaussian data; has no parameters.
    GaussianOracle { mean: f64, var: f64 },
}

impl Arch {
    pub fn param_count(&self) -> usize {
        match self {
            Arch::Tiny(c) => Layout::new(c).total,
            Arch::Linear(c) => 2 * c.steps,
            Arch::GaussianOracle { .. } => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Tiny(_) => "tiny",
            Arch::Linear(_) => "linear",
            Arch::GaussianOracle { .. } => "gaussian-oracle",
        }
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    wt: usize,
    wa: usize,
    q: usize,
    w2: usize,
    skip: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn new(c: &TinyConfig) -> Self {
        let (ch, h) = (c.channels, c.hidden);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let w1 = take(h * 2 * ch * 9);
        let b1 = take(h);
        let wt = take(h * c.time_dim);
        let wa = take(h * c.text_dim);
        let q = take(c.text_dim);
        let w2 = take(ch * h);
        let skip = take(ch * 2 * ch);
        let b2 = take(ch);
        Self {
            w1,
            b1,
            wt,
            wa,
            q,
            w2,
            skip,
            b2,
            total: at,
        }
    }
}

fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half.max(1) as f64 * (1000f64).ln()).exp();
        e[i] = (t as f64 * freq).sin();
        e[half + i] = (t as f64 * freq).cos();
    }
    e
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A denoiser together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Arch,
    params: Vec<f64>,
    sched: NoiseSchedule,
}

struct Attention {
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(arch: Arch, sched: NoiseSchedule, seed: u64) -> Result<Self> {
        let mut rng = seed::rng_for(seed, "model/init");
        let params = match &arch {
            Arch::Tiny(c) => {
                if c.channels == 0 || c.hidden == 0 || c.text_dim == 0 || c.time_dim < 2 {
                    return Err(DiffusionError::Config("tiny denoiser dimensions must be positive".into()));
                }
                let l = Layout::new(c);
                let mut p = vec![0.0; l.total];
                let mut fill = |range: std::ops::Range<usize>, std: f64| {
                    for v in &mut p[range] {
                        *v = std * rng.sample::<f64, _>(StandardNormal);
                    }
                };
                fill(l.w1..l.b1, (1.0 / (2 * c.channels * 9) as f64).sqrt());
                fill(l.wt..l.wa, (1.0 / c.time_dim as f64).sqrt());
                fill(l.wa..l.q, (1.0 / c.text_dim as f64).sqrt());
                fill(l.q..l.w2, (1.0 / c.text_dim as f64).sqrt());
                fill(l.w2..l.skip, 0.1 * (1.0 / c.hidden as f64).sqrt());
                p
            }
            Arch::Linear(c) => {
                if c.steps != sched.steps() {
                    return Err(DiffusionError::Config(format!(
                        "linear denoiser has {} steps but the schedule has {}",
                        c.steps,
                        sched.steps()
                    )));
                }
                vec![0.0; 2 * c.steps]
            }
            Arch::GaussianOracle { var, .. } => {
                if !(*var > 0.0) {
                    return Err(DiffusionError::Config("oracle variance must be positive".into()));
                }
                Vec::new()
            }
        };
        Ok(Self { arch, params, sched })
    }

    pub fn from_parts(arch: Arch, sched: NoiseSchedule, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(DiffusionError::Checkpoint(format!(
                "{} expects {} parameters, found {}",
                arch.name(),
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { arch, params, sched })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_trainable(&self) -> bool {
        !self.params.is_empty()
    }

    fn attention(&self, c: &TinyConfig, l: &Layout, text: &TextEmbedding) -> Result<Attention> {
        if text.dim() != c.text_dim {
            return Err(DiffusionError::Shape(format!(
                "text embedding dim {} vs model {}",
                text.dim(),
                c.text_dim
            )));
        }
        let q = &self.params[l.q..l.q + c.text_dim];
        let scale = 1.0 / (c.text_dim as f64).sqrt();
        let scores: Vec<f64> = text.vectors().outer_iter().map(|e| scale * e.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        let mut pooled = vec![0.0; c.text_dim];
        for (w, e) in weights.iter().zip(text.vectors().outer_iter()) {
            for (p, v) in pooled.iter_mut().zip(e.iter()) {
                *p += w * v;
            }
        }
        Ok(Attention { weights, pooled })
    }

    /// Forward pass of the tiny net. Returns the output and, for backprop,
    /// the stacked input, pre-activations, time embedding and attention.
    fn tiny_forward(
        &self,
        c: &TinyConfig,
        z_t: &Latent,
        t: usize,
        z_in: &Latent,
        text: &TextEmbedding,
    ) -> Result<(Latent, Latent, Vec<f64>, Vec<f64>, Attention)> {
        if z_t.channels() != c.channels || z_in.channels() != c.channels {
            return Err(DiffusionError::Shape(format!(
                "tiny denoiser expects {} channels, got z_t {} and z_in {}",
                c.channels,
                z_t.channels(),
                z_in.channels()
            )));
        }
        let l = Layout::new(c);
        let x = concat_condition(z_t, z_in)?;
        let (cin, h, w) = x.shape();
        let xs = x.grid().as_slice().expect("standard layout");
        let p = &self.params;
        let temb = time_embedding(t, c.time_dim);
        let att = self.attention(c, &l, text)?;
        let hid = c.hidden;
        let mut bias = vec![0.0; hid];
        for (k, b) in bias.iter_mut().enumerate() {
            *b = p[l.b1 + k]
                + (0..c.time_dim).map(|e| p[l.wt + k * c.time_dim + e] * temb[e]).sum::<f64>()
                + (0..c.text_dim).map(|e| p[l.wa + k * c.text_dim + e] * att.pooled[e]).sum::<f64>();
        }
        let hw = h * w;
        let mut pre = vec![0.0; hid * hw];
        for k in 0..hid {
            let out = &mut pre[k * hw..(k + 1) * hw];
            out.fill(bias[k]);
            for ci in 0..cin {
                let plane = &xs[ci * hw..(ci + 1) * hw];
                for a in 0..3 {
                    for b in 0..3 {
                        let wgt = p[l.w1 + ((k * cin + ci) * 3 + a) * 3 + b];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (di, dj) = (a as isize - 1, b as isize - 1);
                        for i in 0..h {
                            let si = i as isize + di;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let row_out = &mut out[i * w..(i + 1) * w];
                            let row_in = &plane[si as usize * w..(si as usize + 1) * w];
                            let (j0, j1) = di_range(dj, w);
                            for j in j0..j1 {
                                row_out[j] += wgt * row_in[(j as isize + dj) as usize];
                            }
                        }
                    }
                }
            }
        }
        let ch = c.channels;
        let mut out = vec![0.0; ch * hw];
        for co in 0..ch {
            let o = &mut out[co * hw..(co + 1) * hw];
            o.fill(p[l.b2 + co]);
            for k in 0..hid {
                let wgt = p[l.w2 + co * hid + k];
                for (v, &z) in o.iter_mut().zip(&pre[k * hw..(k + 1) * hw]) {
                    *v += wgt * z * sigmoid(z);
                }
            }
            for ci in 0..cin {
                let wgt = p[l.skip + co * cin + ci];
                for (v, &xv) in o.iter_mut().zip(&xs[ci * hw..(ci + 1) * hw]) {
                    *v += wgt * xv;
                }
            }
        }
        let out = Latent::new(Array3::from_shape_vec((ch, h, w), out).expect("sized above"));
        Ok((out, x, pre, temb, att))
    }

    /// Per-example loss `||eps_hat - eps||_2`, accumulating `scale` times its
    /// gradient into `grad`.
    pub fn loss_and_grad(
        &self,
        z_t: &Latent,
        t: usize,
        z_in: &Latent,
        text: &TextEmbedding,
        eps: &Latent,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        if grad.len() != self.params.len() {
            return Err(DiffusionError::Shape("gradient buffer size".into()));
        }
        match &self.arch {
            Arch::Tiny(c) => {
                let (out, x, pre, temb, att) = self.tiny_forward(c, z_t, t, z_in, text)?;
                let (norm, up) = residual(&out, eps, t)?;
                self.tiny_backward(c, &x, &pre, &temb, text, &att, &up, scale / norm.max(1e-12), grad);
                Ok(norm)
            }
            Arch::Linear(_) => {
                let out = self.predict(z_t, t, z_in, text)?;
                let (norm, up) = residual(&out, eps, t)?;
                let k = scale / norm.max(1e-12);
                let ga: f64 = up.iter().zip(z_t.iter()).map(|(u, z)| u * z).sum();
                let gb: f64 = up.iter().zip(z_in.iter()).map(|(u, z)| u * z).sum();
                grad[2 * (t - 1)] += k * ga;
                grad[2 * (t - 1) + 1] += k * gb;
                Ok(norm)
            }
            Arch::GaussianOracle { .. } => {
                let out = self.predict(z_t, t, z_in, text)?;
                Ok(residual(&out, eps, t)?.0)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tiny_backward(
        &self,
        c: &TinyConfig,
        x: &Latent,
        pre: &[f64],
        temb: &[f64],
        text: &TextEmbedding,
        att: &Attention,
        up: &[f64],
        k: f64,
        grad: &mut [f64],
    ) {
        let l = Layout::new(c);
        let p = &self.params;
        let (cin, h, w) = x.shape();
        let hw = h * w;
        let xs = x.grid().as_slice().expect("standard layout");
        let (ch, hid) = (c.channels, c.hidden);

        for co in 0..ch {
            let g = &up[co * hw..(co + 1) * hw];
            grad[l.b2 + co] += k * g.iter().sum::<f64>();
            for kk in 0..hid {
                let s: f64 = g
                    .iter()
                    .zip(&pre[kk * hw..(kk + 1) * hw])
                    .map(|(gv, &z)| gv * z * sigmoid(z))
                    .sum();
                grad[l.w2 + co * hid + kk] += k * s;
            }
            for ci in 0..cin {
                let s: f64 = g.iter().zip(&xs[ci * hw..(ci + 1) * hw]).map(|(a, b)| a * b).sum();
                grad[l.skip + co * cin + ci] += k * s;
            }
        }

        let mut dpre = vec![0.0; hid * hw];
        for kk in 0..hid {
            let d = &mut dpre[kk * hw..(kk + 1) * hw];
            for co in 0..ch {
                let wgt = p[l.w2 + co * hid + kk];
                for (dv, &g) in d.iter_mut().zip(&up[co * hw..(co + 1) * hw]) {
                    *dv += wgt * g;
                }
            }
            for (dv, &z) in d.iter_mut().zip(&pre[kk * hw..(kk + 1) * hw]) {
                let s = sigmoid(z);
                *dv *= k * s * (1.0 + z * (1.0 - s));
            }
        }

        let mut dpooled = vec![0.0; c.text_dim];
        for kk in 0..hid {
            let d = &dpre[kk * hw..(kk + 1) * hw];
            let total: f64 = d.iter().sum();
            grad[l.b1 + kk] += total;
            for e in 0..c.time_dim {
                grad[l.wt + kk * c.time_dim + e] += total * temb[e];
            }
            for e in 0..c.text_dim {
                grad[l.wa + kk * c.text_dim + e] += total * att.pooled[e];
                dpooled[e] += total * p[l.wa + kk * c.text_dim + e];
            }
            for ci in 0..cin {
                let plane = &xs[ci * hw..(ci + 1) * hw];
                for a in 0..3 {
                    for b in 0..3 {
                        let (di, dj) = (a as isize - 1, b as isize - 1);
                        let (j0, j1) = di_range(dj, w);
                        let mut s = 0.0;
                        for i in 0..h {
                            let si = i as isize + di;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let row_d = &d[i * w..(i + 1) * w];
                            let row_in = &plane[si as usize * w..(si as usize + 1) * w];
                            for j in j0..j1 {
                                s += row_d[j] * row_in[(j as isize + dj) as usize];
                            }
                        }
                        grad[l.w1 + ((kk * cin + ci) * 3 + a) * 3 + b] += s;
                    }
                }
            }
        }

        // Softmax attention pooling.
        let scale = 1.0 / (c.text_dim as f64).sqrt();
        let dalpha: Vec<f64> = text
            .vectors()
            .outer_iter()
            .map(|e| e.iter().zip(&dpooled).map(|(a, b)| a * b).sum())
            .collect();
        let mean: f64 = att.weights.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        for (m, e) in text.vectors().outer_iter().enumerate() {
            let ds = att.weights[m] * (dalpha[m] - mean);
            for (qi, v) in e.iter().enumerate() {
                grad[l.q + qi] += ds * scale * v;
            }
        }
    }
}

/// Valid output columns `j` such that `j + dj` stays in `0..w`.
fn di_range(dj: isize, w: usize) -> (usize, usize) {
    let j0 = if dj < 0 { (-dj) as usize } else { 0 };
    let j1 = if dj > 0 { w.saturating_sub(dj as usize) } else { w };
    (j0.min(w), j1)
}

fn residual(out: &Latent, eps: &Latent, t: usize) -> Result<(f64, Vec<f64>)> {
    if out.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!("prediction {:?} vs noise {:?}", out.shape(), eps.shape())));
    }
    let r: Vec<f64> = out.iter().zip(eps.iter()).map(|(a, b)| a - b).collect();
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(DiffusionError::Diverged { what: "loss", t });
    }
    Ok((norm, r))
}

impl Denoiser for Model {
    fn predict(&self, z_t: &Latent, t: usize, z_in: &Latent, text: &TextEmbedding) -> Result<Latent> {
        self.sched.beta(t)?;
        let out = match &self.arch {
            Arch::Tiny(c) => self.tiny_forward(c, z_t, t, z_in, text)?.0,
            Arch::Linear(_) => {
                if z_t.shape() != z_in.shape() {
                    return Err(DiffusionError::Shape(format!("z_t {:?} vs z_in {:?}", z_t.shape(), z_in.shape())));
                }
                z_t.lin_comb(self.params[2 * (t - 1)], z_in, self.params[2 * (t - 1) + 1])
            }
            Arch::GaussianOracle { mean, var } => {
                GaussianOracle::isotropic(z_t.shape(), *mean, *var, self.sched.clone())?.predict(z_t, t, z_in, text)?
            }
        };
        if !out.is_finite() {
            return Err(DiffusionError::Diverged { what: "denoiser output", t });
        }
        Ok(out)
    }
}
