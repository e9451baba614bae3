use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::record::{GridRecord, RecordError, RecordKind};

/// `C x h x w` grid the diffusion engine works in.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    grid: Array3<f64>,
}

impl Latent {
    pub fn new(grid: Array3<f64>) -> Self {
        Self { grid }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self::new(Array3::zeros(shape))
    }

    pub fn from_elem(shape: (usize, usize, usize), v: f64) -> Self {
        Self::new(Array3::from_elem(shape, v))
    }

    pub fn from_vec(shape: (usize, usize, usize), data: Vec<f64>) -> Option<Self> {
        Array3::from_shape_vec(shape, data).ok().map(Self::new)
    }

    /// Standard-normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Self {
        Self::new(Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal)))
    }

    pub fn grid(&self) -> &Array3<f64> {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut Array3<f64> {
        &mut self.grid
    }

    pub fn into_grid(self) -> Array3<f64> {
        self.grid
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.grid.dim()
    }

    pub fn channels(&self) -> usize {
        self.grid.dim().0
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.grid.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grid.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.grid.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `a * self + b * other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &Latent, b: f64) -> Latent {
        let mut out = self.grid.clone();
        Zip::from(&mut out)
            .and(&other.grid)
            .for_each(|x, &y| *x = a * *x + b * y);
        Latent::new(out)
    }

    pub fn sub(&self, other: &Latent) -> Latent {
        Latent::new(&self.grid - &other.grid)
    }

    pub fn scaled(&self, s: f64) -> Latent {
        Latent::new(&self.grid * s)
    }

    pub fn to_record(&self, meta: Vec<(String, String)>) -> GridRecord {
        let (c, h, w) = self.shape();
        GridRecord {
            kind: RecordKind::Latent,
            dims: vec![c, h, w],
            meta,
            data: self.grid.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_record(rec: &GridRecord) -> Result<Self, RecordError> {
        rec.expect_kind(RecordKind::Latent)?;
        let [c, h, w] = rec.dims[..] else {
            return Err(RecordError::Malformed(format!(
                "latent record has {} dims",
                rec.dims.len()
            )));
        };
        Self::from_vec((c, h, w), rec.data.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| RecordError::Malformed("data length does not match dims".into()))
    }
}
