use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward_diffuse, Arch, Denoiser, DiffusionError, Model, NoiseSchedule, Result};
use crate::latent::Latent;
use crate::seed;
use crate::text::TextEmbedding;

/// One `(z_in, z_out, c_text)` triple in latent space.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub z_in: Latent,
    pub z_out: Latent,
    pub text: TextEmbedding,
}

struct Draw {
    t: usize,
    dropped: bool,
    eps: Latent,
}

fn draw<R: Rng + ?Sized>(ex: &TrainingExample, t: usize, p_drop: f64, rng: &mut R) -> Draw {
    let dropped = rng.random::<f64>() < p_drop;
    let eps = Latent::randn(ex.z_out.shape(), rng);
    Draw { t, dropped, eps }
}

/// Mean over the batch of `||eps_theta(z_t, t, z_in, c) - eps||_2`, with
/// `t ~ U{1..T}`, `eps ~ N(0, I)` and `c` replaced by `null` with
/// probability `p_drop`. Per example the draws are taken in the order
/// `t`, dropout, `eps`.
pub fn ldm_loss<R: Rng + ?Sized>(
    batch: &[TrainingExample],
    den: &dyn Denoiser,
    null: &TextEmbedding,
    sched: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DiffusionError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        check_example(ex)?;
        let t = rng.random_range(1..=sched.steps());
        let d = draw(ex, t, p_drop, rng);
        let z_t = forward_diffuse(&ex.z_out, d.t, &d.eps, sched)?;
        let text = if d.dropped { null } else { &ex.text };
        let pred = den.predict(&z_t, d.t, &ex.z_in, text)?;
        if pred.shape() != d.eps.shape() {
            return Err(DiffusionError::Shape(format!("prediction {:?} vs noise {:?}", pred.shape(), d.eps.shape())));
        }
        let l = pred.sub(&d.eps).norm();
        if !l.is_finite() {
            return Err(DiffusionError::Diverged { what: "loss", t: d.t });
        }
        total += l;
    }
    Ok(total / batch.len() as f64)
}

fn check_example(ex: &TrainingExample) -> Result<()> {
    let (_, h, w) = ex.z_in.shape();
    let (_, h2, w2) = ex.z_out.shape();
    if (h, w) != (h2, w2) {
        return Err(DiffusionError::Shape(format!(
            "z_in {:?} vs z_out {:?}",
            ex.z_in.shape(),
            ex.z_out.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            eps: 1e-8,
            cosine: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(DiffusionError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let frac = step as f64 / total as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &OptimizerConfig, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub p_drop: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seed: 0,
            p_drop: 0.1,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DiffusionError::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(DiffusionError::Config(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        self.optimizer.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
    pub loss_curve: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let n = model.params().len();
        Self {
            model,
            opt: AdamW::new(n),
            step: 0,
            loss_curve: Vec::new(),
        }
    }
}

/// Example order and timesteps for one epoch. Each epoch visits every
/// example once; the timesteps are stratified so one epoch covers `1..=T`
/// evenly while each example's marginal stays uniform.
fn epoch_plan(seed: u64, epoch: usize, n: usize, steps: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::rng_from(seed::derive_indexed(seed, "train/epoch", epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut ts: Vec<usize> = (0..n)
        .map(|i| {
            let u: f64 = rng.random();
            let k = (((i as f64 + u) / n as f64) * steps as f64).floor() as usize;
            k.min(steps - 1) + 1
        })
        .collect();
    ts.shuffle(&mut rng);
    (order, ts)
}

/// Run AdamW on `state` until `cfg.steps` total steps. Every step's
/// randomness is derived from `(cfg.seed, step)`, so stopping, saving a
/// [`Checkpoint`] and resuming gives the same result as one long run.
pub fn train(data: &[TrainingExample], state: &mut TrainState, null: &TextEmbedding, cfg: &TrainConfig) -> Result<()> {
    train_until(data, state, null, cfg, cfg.steps)
}

/// [`train`], stopping early once `state.step` reaches `until`. The
/// learning-rate schedule still spans `cfg.steps`.
pub fn train_until(
    data: &[TrainingExample],
    state: &mut TrainState,
    null: &TextEmbedding,
    cfg: &TrainConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    let until = until.min(cfg.steps);
    if state.step >= until {
        return Ok(());
    }
    if data.is_empty() {
        return Err(DiffusionError::Config("no training examples".into()));
    }
    if !state.model.is_trainable() {
        return Err(DiffusionError::Config(format!(
            "{} denoiser has no trainable parameters",
            state.model.arch().name()
        )));
    }
    data.iter().try_for_each(check_example)?;
    let sched = state.model.schedule().clone();
    let n = data.len();
    let spe = cfg.steps_per_epoch(n);
    let mut plan_epoch = usize::MAX;
    let mut plan = (Vec::new(), Vec::new());
    let np = state.model.params().len();

    while state.step < until {
        let step = state.step;
        let epoch = step / spe;
        if epoch != plan_epoch {
            plan = epoch_plan(cfg.seed, epoch, n, sched.steps());
            plan_epoch = epoch;
        }
        let slot = step % spe;
        let lo = slot * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let mut rng = seed::rng_from(seed::derive_indexed(cfg.seed, "train/step", step as u64));
        let draws: Vec<(usize, Draw)> = (lo..hi)
            .map(|pos| {
                let idx = plan.0[pos];
                (idx, draw(&data[idx], plan.1[pos], cfg.p_drop, &mut rng))
            })
            .collect();
        let scale = 1.0 / draws.len() as f64;
        let model = &state.model;
        let parts: Vec<Result<(f64, Vec<f64>)>> = draws
            .par_iter()
            .map(|(idx, d)| {
                let ex = &data[*idx];
                let z_t = forward_diffuse(&ex.z_out, d.t, &d.eps, &sched)?;
                let text = if d.dropped { null } else { &ex.text };
                let mut g = vec![0.0; np];
                let l = model.loss_and_grad(&z_t, d.t, &ex.z_in, text, &d.eps, scale, &mut g)?;
                Ok((l, g))
            })
            .collect();
        let mut grad = vec![0.0; np];
        let mut loss = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss += l * scale;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(DiffusionError::Diverged { what: "training loss", t: step });
        }
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        state.opt.update(state.model.params_mut(), &grad, &cfg.optimizer, lr);
        state.step += 1;
        state.loss_curve.push((state.step, loss));
    }
    Ok(())
}

/// Mean loss of each complete or partial epoch.
pub fn epoch_means(curve: &[(usize, f64)], steps_per_epoch: usize) -> Vec<f64> {
    curve
        .chunks(steps_per_epoch.max(1))
        .map(|c| c.iter().map(|(_, l)| l).sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn write_loss_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("step\tloss\n");
    for (step, loss) in curve {
        s.push_str(&format!("{step}\t{loss}\n"));
    }
    crate::io::atomic_write(path, s.as_bytes())?;
    Ok(())
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<(usize, f64)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || (i == 0 && line.trim_end() == "step\tloss") {
            continue;
        }
        let bad = || DiffusionError::Checkpoint(format!("loss curve line {}: {line:?}", i + 1));
        let (a, b) = line.split_once('\t').ok_or_else(bad)?;
        out.push((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?));
    }
    Ok(out)
}

const MAGIC: &str = "tripledit-checkpoint v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: Arch,
    schedule_steps: usize,
    seed: u64,
    step: usize,
    params: usize,
    adam_step: u64,
}

/// Saved model and optimizer state.
///
/// File layout: a magic line, a one-line JSON header, then little-endian
/// `f64` arrays: betas, parameters, Adam first moments, Adam second moments.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState, seed: u64) -> Self {
        Self { seed, state }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.state.model;
        let header = Header {
            arch: m.arch().clone(),
            schedule_steps: m.schedule().steps(),
            seed: self.seed,
            step: self.state.step,
            params: m.params().len(),
            adam_step: self.state.opt.step,
        };
        let mut buf = Vec::new();
        writeln!(buf, "{MAGIC}")?;
        writeln!(buf, "{}", serde_json::to_string(&header).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?)?;
        for arr in [m.schedule().betas(), m.params(), &self.state.opt.m, &self.state.opt.v] {
            for v in arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::io::atomic_write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: &str| DiffusionError::Checkpoint(format!("{}: {msg}", path.display()));
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let h: Header = serde_json::from_str(line.trim_end()).map_err(|e| bad(&e.to_string()))?;
        if h.params != h.arch.param_count() {
            return Err(bad("parameter count does not match the architecture"));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let want = (h.schedule_steps + 3 * h.params) * 8;
        if rest.len() != want {
            return Err(bad(&format!("expected {want} payload bytes, found {}", rest.len())));
        }
        let mut vals = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let betas = take(h.schedule_steps);
        let params = take(h.params);
        let m = take(h.params);
        let v = take(h.params);
        let sched = NoiseSchedule::from_betas(betas)?;
        let model = Model::from_parts(h.arch, sched, params)?;
        Ok(Self {
            seed: h.seed,
            state: TrainState {
                model,
                opt: AdamW { m, v, step: h.adam_step },
                step: h.step,
                loss_curve: Vec::new(),
            },
        })
    }
}
