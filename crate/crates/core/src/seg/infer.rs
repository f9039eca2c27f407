//! Inference: sparse-grid voxel classification, Gaussian rough mask, and
//! iterative surface refinement.

use super::{extract_triplanar_patches, SegmentationModel};
use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMask, Volume};
use rayon::prelude::*;
use std::collections::HashMap;

/// Probabilities at equidistantly spaced voxels.
#[derive(Debug, Clone)]
pub struct ProbabilityGrid {
    pub stride: usize,
    /// Number of grid points per axis: ceil(dim / stride).
    pub grid_dims: Dims,
    /// Source volume dims, for densification.
    pub volume_dims: Dims,
    /// Row-major over (gz, gy, gx), same linear order as Dims.
    pub probabilities: Vec<f32>,
}

impl ProbabilityGrid {
    pub fn grid_to_voxel(&self, gx: usize, gy: usize, gz: usize) -> (usize, usize, usize) {
        (gx * self.stride, gy * self.stride, gz * self.stride)
    }
}

/// Batch size for parallel voxel classification.
const EVAL_CHUNK: usize = 16;

/// Classify a list of voxels against a shared model, in parallel chunks.
pub fn classify_voxels(
    model: &SegmentationModel,
    volume: &Volume,
    voxels: &[(usize, usize, usize)],
) -> Result<Vec<f32>> {
    let chunks: Vec<Vec<f32>> = voxels
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<Vec<f32>> {
            let patches = chunk
                .iter()
                .map(|&v| extract_triplanar_patches(volume, v))
                .collect::<Result<Vec<_>>>()?;
            model.classify_batch(&patches)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Classify every `stride`-th voxel along each axis, starting at 0.
pub fn classify_sparse_grid(
    model: &SegmentationModel,
    volume: &Volume,
    stride: usize,
) -> Result<ProbabilityGrid> {
    if stride == 0 {
        return Err(Error::Parameter("grid stride must be positive".into()));
    }
    let vd = volume.dims;
    let grid_dims = Dims::new(
        vd.nx.div_ceil(stride),
        vd.ny.div_ceil(stride),
        vd.nz.div_ceil(stride),
    );
    let mut voxels = Vec::with_capacity(grid_dims.count());
    for gz in 0..grid_dims.nz {
        for gy in 0..grid_dims.ny {
            for gx in 0..grid_dims.nx {
                voxels.push((gx * stride, gy * stride, gz * stride));
            }
        }
    }
    let probabilities = classify_voxels(model, volume, &voxels)?;
    Ok(ProbabilityGrid {
        stride,
        grid_dims,
        volume_dims: vd,
        probabilities,
    })
}

/// Truncated 1D Gaussian taps for a kernel of the given odd width.
fn gaussian_taps(width: usize, sigma: f64) -> Vec<f64> {
    let half = (width / 2) as isize;
    (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable 3D Gaussian smoothing with border renormalization (each pass
/// divides by the in-bounds tap weight, so constant fields stay constant).
fn gaussian_smooth_3d(dims: Dims, data: &mut Vec<f64>, width: usize, sigma: f64) {
    let taps = gaussian_taps(width, sigma);
    let half = (width / 2) as isize;
    let mut out = vec![0.0f64; data.len()];
    let axes: [(usize, Box<dyn Fn(usize, isize) -> Option<usize>>); 3] = [
        (
            dims.nx,
            Box::new(move |idx, d| {
                let (x, y, z) = dims.coords(idx);
                let nx = x as isize + d;
                (nx >= 0 && (nx as usize) < dims.nx).then(|| dims.index(nx as usize, y, z))
            }),
        ),
        (
            dims.ny,
            Box::new(move |idx, d| {
                let (x, y, z) = dims.coords(idx);
                let ny = y as isize + d;
                (ny >= 0 && (ny as usize) < dims.ny).then(|| dims.index(x, ny as usize, z))
            }),
        ),
        (
            dims.nz,
            Box::new(move |idx, d| {
                let (x, y, z) = dims.coords(idx);
                let nz = z as isize + d;
                (nz >= 0 && (nz as usize) < dims.nz).then(|| dims.index(x, y, nz as usize))
            }),
        ),
    ];
    for (_, neighbor) in &axes {
        for idx in 0..dims.count() {
            let mut acc = 0.0;
            let mut weight = 0.0;
            for (ti, &t) in taps.iter().enumerate() {
                if let Some(nidx) = neighbor(idx, ti as isize - half) {
                    acc += t * data[nidx];
                    weight += t;
                }
            }
            out[idx] = acc / weight;
        }
        std::mem::swap(data, &mut out);
    }
}

/// Dense rough mask from the sparse grid: nearest-grid-point fill, 3D
/// Gaussian smoothing (truncated width-5 kernel by default), threshold at
/// strictly > 0.5. An all-background result is signaled, not fatal.
pub fn rough_segmentation(
    grid: &ProbabilityGrid,
    kernel_voxels: usize,
    sigma: f64,
    threshold: f64,
) -> Result<(LabelMask, bool)> {
    if grid.probabilities.is_empty() {
        return Err(Error::Parameter("probability grid is empty".into()));
    }
    let vd = grid.volume_dims;
    let gd = grid.grid_dims;
    let stride = grid.stride as f64;
    let mut dense = vec![0.0f64; vd.count()];
    for z in 0..vd.nz {
        let gz = ((z as f64 / stride).round() as usize).min(gd.nz - 1);
        for y in 0..vd.ny {
            let gy = ((y as f64 / stride).round() as usize).min(gd.ny - 1);
            for x in 0..vd.nx {
                let gx = ((x as f64 / stride).round() as usize).min(gd.nx - 1);
                dense[vd.index(x, y, z)] = grid.probabilities[gd.index(gx, gy, gz)] as f64;
            }
        }
    }
    gaussian_smooth_3d(vd, &mut dense, kernel_voxels, sigma);
    let mut mask = LabelMask::new(vd);
    for (idx, &p) in dense.iter().enumerate() {
        if p > threshold {
            mask.set_idx(idx, true);
        }
    }
    let empty = mask.is_empty();
    Ok((mask, empty))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    Converged,
    MaxItersReached,
}

#[derive(Debug)]
pub struct RefineResult {
    pub mask: LabelMask,
    pub iterations: usize,
    pub status: RefineStatus,
}

/// Iteratively reclassify the mask surface: foreground surface voxels
/// classified background are removed (and never return), background voxels
/// adjacent to the mask classified foreground are added. Voxels strictly
/// interior to the current mask are never touched. Stops when an iteration
/// changes nothing, or after `max_iters` (reported in the result).
///
/// The classifier is a pure function of (weights, volume), so probabilities
/// are cached across iterations and each voxel is evaluated at most once.
pub fn refine_surface(
    model: &SegmentationModel,
    volume: &Volume,
    rough: &LabelMask,
    max_iters: usize,
) -> Result<RefineResult> {
    if rough.is_empty() {
        return Err(Error::Parameter("rough mask is empty".into()));
    }
    let dims = rough.dims;
    let mut mask = rough.clone();
    let mut removed = LabelMask::new(dims);
    let mut prob_cache: HashMap<usize, f32> = HashMap::new();

    for iteration in 1..=max_iters {
        let mut to_classify: Vec<usize> = mask.surface_indices();
        for idx in mask.outer_shell_indices() {
            if !removed.get_idx(idx) {
                to_classify.push(idx);
            }
        }
        to_classify.sort_unstable();
        to_classify.dedup();

        let uncached: Vec<usize> = to_classify
            .iter()
            .copied()
            .filter(|idx| !prob_cache.contains_key(idx))
            .collect();
        if !uncached.is_empty() {
            let coords: Vec<(usize, usize, usize)> =
                uncached.iter().map(|&i| dims.coords(i)).collect();
            let probs = classify_voxels(model, volume, &coords)?;
            for (&idx, &p) in uncached.iter().zip(&probs) {
                prob_cache.insert(idx, p);
            }
        }

        let mut changed = false;
        for &idx in &to_classify {
            let fg = prob_cache[&idx] > 0.5;
            let in_mask = mask.get_idx(idx);
            if in_mask && !fg {
                mask.set_idx(idx, false);
                removed.set_idx(idx, true);
                changed = true;
            } else if !in_mask && fg {
                mask.set_idx(idx, true);
                changed = true;
            }
        }
        if !changed {
            return Ok(RefineResult {
                mask,
                iterations: iteration,
                status: RefineStatus::Converged,
            });
        }
        if mask.is_empty() {
            return Ok(RefineResult {
                mask,
                iterations: iteration,
                status: RefineStatus::Converged,
            });
        }
    }
    Ok(RefineResult {
        mask,
        iterations: max_iters,
        status: RefineStatus::MaxItersReached,
    })
}

/// Same erosion/growth loop against a fixed probability field instead of a
/// model; used by tests to drive the refinement semantics directly.
#[cfg(test)]
pub fn refine_surface_with(
    probs: impl Fn(usize) -> f32,
    rough: &LabelMask,
    max_iters: usize,
) -> RefineResult {
    let dims = rough.dims;
    let mut mask = rough.clone();
    let mut removed = LabelMask::new(dims);
    for iteration in 1..=max_iters {
        let mut to_classify: Vec<usize> = mask.surface_indices();
        for idx in mask.outer_shell_indices() {
            if !removed.get_idx(idx) {
                to_classify.push(idx);
            }
        }
        to_classify.sort_unstable();
        to_classify.dedup();
        let mut changed = false;
        for &idx in &to_classify {
            let fg = probs(idx) > 0.5;
            let in_mask = mask.get_idx(idx);
            if in_mask && !fg {
                mask.set_idx(idx, false);
                removed.set_idx(idx, true);
                changed = true;
            } else if !in_mask && fg {
                mask.set_idx(idx, true);
                changed = true;
            }
        }
        if !changed || mask.is_empty() {
            return RefineResult {
                mask,
                iterations: iteration,
                status: RefineStatus::Converged,
            };
        }
    }
    RefineResult {
        mask,
        iterations: max_iters,
        status: RefineStatus::MaxItersReached,
    }
}
