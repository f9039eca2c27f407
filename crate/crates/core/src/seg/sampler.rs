//! Training batch sampler: class-balanced, with background voxels near the
//! mask drawn four times more often than distant ones.

use super::{extract_triplanar_patches, TriplanarPatchSet};
use crate::error::{Error, Result};
use crate::volume::{squared_distance_transform, LabelMask, Volume};
use rand::Rng;
use rayon::prelude::*;

/// Per-volume sampling state: the mask voxel list plus background voxels
/// split at the near/far distance threshold (Euclidean, voxel units).
pub struct TrainingSampler {
    foreground: Vec<usize>,
    near: Vec<usize>,
    far: Vec<usize>,
    near_weight: f64,
}

impl TrainingSampler {
    pub const DEFAULT_NEAR_DISTANCE: f64 = 80.0;
    pub const DEFAULT_NEAR_WEIGHT: f64 = 4.0;

    pub fn new(
        mask: &LabelMask,
        near_distance_vox: f64,
        near_weight: f64,
    ) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Parameter("training mask is empty".into()));
        }
        let dims = mask.dims;
        let foreground = mask.indices();
        let sq = squared_distance_transform(dims, (1.0, 1.0, 1.0), |i| mask.get_idx(i));
        let limit = near_distance_vox * near_distance_vox;
        let mut near = Vec::new();
        let mut far = Vec::new();
        for idx in 0..dims.count() {
            if mask.get_idx(idx) {
                continue;
            }
            if sq[idx] < limit {
                near.push(idx);
            } else {
                far.push(idx);
            }
        }
        if near.is_empty() && far.is_empty() {
            return Err(Error::Parameter(
                "mask fills the whole volume; no background to sample".into(),
            ));
        }
        Ok(TrainingSampler {
            foreground,
            near,
            far,
            near_weight,
        })
    }

    pub fn draw_positive(&self, rng: &mut impl Rng) -> usize {
        self.foreground[rng.gen_range(0..self.foreground.len())]
    }

    /// Weighted background draw: each near voxel is `near_weight` times as
    /// likely as each far voxel.
    pub fn draw_negative(&self, rng: &mut impl Rng) -> usize {
        let wn = self.near_weight * self.near.len() as f64;
        let wf = self.far.len() as f64;
        if !self.near.is_empty() && (self.far.is_empty() || rng.gen::<f64>() < wn / (wn + wf)) {
            self.near[rng.gen_range(0..self.near.len())]
        } else {
            self.far[rng.gen_range(0..self.far.len())]
        }
    }

    pub fn near_count(&self) -> usize {
        self.near.len()
    }

    pub fn far_count(&self) -> usize {
        self.far.len()
    }
}

/// One class-balanced batch from a single volume: `batch_size / 2`
/// foreground centers, the rest background. Returns patch sets with labels
/// (true = foreground). Odd sizes give the extra sample to the negatives.
pub fn sample_training_batch(
    volume: &Volume,
    sampler: &TrainingSampler,
    rng: &mut impl Rng,
    batch_size: usize,
) -> Result<(Vec<TriplanarPatchSet>, Vec<bool>)> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let n_pos = batch_size / 2;
    let dims = volume.dims;
    let mut picks: Vec<(usize, bool)> = Vec::with_capacity(batch_size);
    for _ in 0..n_pos {
        picks.push((sampler.draw_positive(rng), true));
    }
    for _ in n_pos..batch_size {
        picks.push((sampler.draw_negative(rng), false));
    }
    // extraction is pure; parallelize it while keeping the draw order fixed
    let patches: Vec<TriplanarPatchSet> = picks
        .par_iter()
        .map(|&(idx, _)| extract_triplanar_patches(volume, dims.coords(idx)))
        .collect::<Result<_>>()?;
    let labels = picks.iter().map(|&(_, l)| l).collect();
    Ok((patches, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volume::Dims;

    fn ball_mask(dims: Dims, r: f64) -> LabelMask {
        let mut mask = LabelMask::new(dims);
        let (cx, cy, cz) = (
            dims.nx as f64 / 2.0,
            dims.ny as f64 / 2.0,
            dims.nz as f64 / 2.0,
        );
        for idx in 0..dims.count() {
            let (x, y, z) = dims.coords(idx);
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2))
                .sqrt();
            if d <= r {
                mask.set_idx(idx, true);
            }
        }
        mask
    }

    #[test]
    fn batch_is_class_balanced() {
        let dims = Dims::new(24, 24, 16);
        let vol = Volume::new(dims, (0.5, 0.5, 0.9), 100.0).unwrap();
        let mask = ball_mask(dims, 5.0);
        let sampler = TrainingSampler::new(&mask, 8.0, 4.0).unwrap();
        let mut r = rng::substream(1, "batch");
        let (patches, labels) = sample_training_batch(&vol, &sampler, &mut r, 500).unwrap();
        assert_eq!(patches.len(), 500);
        assert_eq!(labels.iter().filter(|&&l| l).count(), 250);
    }

    #[test]
    fn empty_mask_is_parameter_error() {
        let dims = Dims::new(8, 8, 8);
        let mask = LabelMask::new(dims);
        assert!(matches!(
            TrainingSampler::new(&mask, 8.0, 4.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn full_mask_is_parameter_error() {
        let dims = Dims::new(6, 6, 6);
        let mut mask = LabelMask::new(dims);
        for idx in 0..dims.count() {
            mask.set_idx(idx, true);
        }
        assert!(matches!(
            TrainingSampler::new(&mask, 8.0, 4.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn near_voxels_drawn_four_to_one_per_candidate() {
        let dims = Dims::new(24, 24, 16);
        let mask = ball_mask(dims, 4.0);
        let sampler = TrainingSampler::new(&mask, 6.0, 4.0).unwrap();
        let (n_near, n_far) = (sampler.near_count() as f64, sampler.far_count() as f64);
        assert!(n_near > 100.0 && n_far > 100.0);
        let mut r = rng::substream(7, "ratio");
        let draws = 100_000usize;
        let mut near_hits = 0usize;
        let near_limit = 6.0f64 * 6.0;
        let sq = squared_distance_transform(dims, (1.0, 1.0, 1.0), |i| mask.get_idx(i));
        for _ in 0..draws {
            let idx = sampler.draw_negative(&mut r);
            assert!(!mask.get_idx(idx));
            if sq[idx] < near_limit {
                near_hits += 1;
            }
        }
        // chi-squared against p_near = 4 n_near / (4 n_near + n_far), 1 dof
        let p = 4.0 * n_near / (4.0 * n_near + n_far);
        let expected_near = draws as f64 * p;
        let expected_far = draws as f64 * (1.0 - p);
        let far_hits = draws - near_hits;
        let chi2 = (near_hits as f64 - expected_near).powi(2) / expected_near
            + (far_hits as f64 - expected_far).powi(2) / expected_far;
        assert!(chi2 < 6.63, "chi2 {chi2} (99% critical value 6.63)");
        // and the per-candidate rate ratio is ~4
        let rate_near = near_hits as f64 / n_near;
        let rate_far = far_hits as f64 / n_far;
        let ratio = rate_near / rate_far;
        assert!((3.6..=4.4).contains(&ratio), "ratio {ratio}");
    }
}
