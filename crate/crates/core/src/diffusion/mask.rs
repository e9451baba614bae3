use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, Result};
use crate::audio::TimeRegion;
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Unobservable cells widened to whole coarse blocks.
    Rough,
    /// Exactly the cells touched by the edit.
    Precise,
}

/// Latent-shaped binary grid; `true` marks entries known from the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityMask {
    observable: Array3<bool>,
    granularity: Granularity,
}

/// Latent columns (or rows) merged into one block by a rough mask.
pub const ROUGH_BLOCK: usize = 4;

impl ObservabilityMask {
    pub fn from_grid(observable: Array3<bool>, granularity: Granularity) -> Self {
        Self { observable, granularity }
    }

    pub fn all_observable(shape: (usize, usize, usize)) -> Self {
        Self::from_grid(Array3::from_elem(shape, true), Granularity::Precise)
    }

    pub fn none_observable(shape: (usize, usize, usize)) -> Self {
        Self::from_grid(Array3::from_elem(shape, false), Granularity::Precise)
    }

    /// Columns overlapping any of `regions` are unobservable in every channel
    /// and row. `clip_s` is the duration spanned by the latent's width.
    pub fn from_time_regions(
        shape: (usize, usize, usize),
        regions: &[TimeRegion],
        clip_s: f64,
        granularity: Granularity,
    ) -> Result<Self> {
        let (_, _, w) = shape;
        if !(clip_s > 0.0) || w == 0 {
            return Err(DiffusionError::Config("mask needs a positive clip length and width".into()));
        }
        let col_s = clip_s / w as f64;
        let mut hidden = vec![false; w];
        for r in regions {
            for (j, h) in hidden.iter_mut().enumerate() {
                let (a, b) = (j as f64 * col_s, (j + 1) as f64 * col_s);
                if r.start_s < b && a < r.end_s {
                    *h = true;
                }
            }
        }
        if granularity == Granularity::Rough {
            hidden = widen(&hidden);
        }
        Ok(Self::from_grid(
            Array3::from_shape_fn(shape, |(_, _, j)| !hidden[j]),
            granularity,
        ))
    }

    /// Rows whose frequency band reaches above `cutoff_hz` are unobservable.
    /// `row_top_hz[i]` is the highest frequency represented by latent row `i`.
    pub fn from_cutoff(
        shape: (usize, usize, usize),
        row_top_hz: &[f64],
        cutoff_hz: f64,
        granularity: Granularity,
    ) -> Result<Self> {
        let (_, h, _) = shape;
        if row_top_hz.len() != h {
            return Err(DiffusionError::Shape(format!(
                "{} row frequencies for {h} latent rows",
                row_top_hz.len()
            )));
        }
        let mut hidden: Vec<bool> = row_top_hz.iter().map(|&f| f > cutoff_hz).collect();
        if granularity == Granularity::Rough {
            hidden = widen(&hidden);
        }
        Ok(Self::from_grid(
            Array3::from_shape_fn(shape, |(_, i, _)| !hidden[i]),
            granularity,
        ))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.observable.dim()
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn grid(&self) -> &Array3<bool> {
        &self.observable
    }

    pub fn is_observable(&self, idx: (usize, usize, usize)) -> bool {
        self.observable[idx]
    }

    pub fn count_observable(&self) -> usize {
        self.observable.iter().filter(|&&o| o).count()
    }

    /// Overwrite the observable entries of `z` with those of `known`.
    pub fn impose(&self, z: &mut Latent, known: &Latent) {
        ndarray::Zip::from(z.grid_mut())
            .and(known.grid())
            .and(&self.observable)
            .for_each(|z, &k, &o| {
                if o {
                    *z = k;
                }
            });
    }

    /// 0/1 latent, handy for dumps.
    pub fn to_latent(&self) -> Latent {
        Latent::new(self.observable.mapv(|o| if o { 1.0 } else { 0.0 }))
    }
}

fn widen(hidden: &[bool]) -> Vec<bool> {
    let mut out = hidden.to_vec();
    for (b, chunk) in hidden.chunks(ROUGH_BLOCK).enumerate() {
        if chunk.iter().any(|&h| h) {
            let start = b * ROUGH_BLOCK;
            out[start..start + chunk.len()].fill(true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precise_and_rough_time_masks() {
        let shape = (4, 10, 78);
        let r = TimeRegion::new(2.0, 3.0).unwrap();
        let precise = ObservabilityMask::from_time_regions(shape, &[r], 10.0, Granularity::Precise).unwrap();
        let hidden: Vec<usize> = (0..78).filter(|&j| !precise.is_observable((0, 0, j))).collect();
        // Columns are 10/78 s wide; [2, 3) s touches columns 15..=23.
        assert_eq!(hidden, (15..=23).collect::<Vec<_>>());
        let rough = ObservabilityMask::from_time_regions(shape, &[r], 10.0, Granularity::Rough).unwrap();
        let hidden_rough: Vec<usize> = (0..78).filter(|&j| !rough.is_observable((3, 9, j))).collect();
        assert_eq!(hidden_rough, (12..24).collect::<Vec<_>>());
        for &j in &hidden {
            assert!(!rough.is_observable((1, 4, j)));
        }
    }

    #[test]
    fn cutoff_masks_hide_high_rows() {
        let tops: Vec<f64> = (1..=10).map(|i| i as f64 * 800.0).collect();
        let m = ObservabilityMask::from_cutoff((4, 10, 5), &tops, 4000.0, Granularity::Precise).unwrap();
        let hidden: Vec<usize> = (0..10).filter(|&i| !m.is_observable((0, i, 0))).collect();
        assert_eq!(hidden, (5..10).collect::<Vec<_>>());
        let r = ObservabilityMask::from_cutoff((4, 10, 5), &tops, 4000.0, Granularity::Rough).unwrap();
        let hidden: Vec<usize> = (0..10).filter(|&i| !r.is_observable((0, i, 0))).collect();
        assert_eq!(hidden, (4..10).collect::<Vec<_>>());
        assert!(ObservabilityMask::from_cutoff((4, 10, 5), &tops[..3], 4000.0, Granularity::Rough).is_err());
    }

    #[test]
    fn impose_touches_only_observable_entries() {
        let m = ObservabilityMask::from_grid(
            Array3::from_shape_fn((1, 2, 2), |(_, i, j)| i == j),
            Granularity::Precise,
        );
        let mut z = Latent::zeros((1, 2, 2));
        m.impose(&mut z, &Latent::from_elem((1, 2, 2), 5.0));
        assert_eq!(z.grid().iter().copied().collect::<Vec<_>>(), vec![5.0, 0.0, 0.0, 5.0]);
        assert_eq!(m.count_observable(), 2);
    }
}
