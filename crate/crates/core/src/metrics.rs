//! Segmentation evaluation: Dice overlap and mean absolute surface distance.

use crate::error::{Error, Result};
use crate::volume::{squared_distance_transform, LabelMask};

/// Dice coefficient 2|A∩B| / (|A|+|B|). Two empty masks count as identical.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Dimension(format!(
            "dice: dims {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let (na, nb) = (a.count(), b.count());
    if na == 0 && nb == 0 {
        return Ok(1.0);
    }
    let mut inter = 0usize;
    for idx in a.indices() {
        if b.get_idx(idx) {
            inter += 1;
        }
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean absolute surface distance in mm, symmetric over both surfaces.
/// Surfaces are the 6-connectivity boundaries; distances are between voxel
/// centers under the given spacing. Undefined for empty masks.
pub fn mad(a: &LabelMask, b: &LabelMask, spacing: (f32, f32, f32)) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Dimension(format!(
            "mad: dims {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric(
            "mad requires two nonempty masks".into(),
        ));
    }
    let surf_a = a.surface_indices();
    let surf_b = b.surface_indices();
    let weights = (spacing.0 as f64, spacing.1 as f64, spacing.2 as f64);
    let dims = a.dims;

    let mean_to = |from: &[usize], to: &[usize]| -> f64 {
        // exact distance transform seeded on the target surface
        let mut is_target = vec![false; dims.count()];
        for &idx in to {
            is_target[idx] = true;
        }
        let sq = squared_distance_transform(dims, weights, |i| is_target[i]);
        from.iter().map(|&idx| sq[idx].sqrt()).sum::<f64>() / from.len() as f64
    };

    Ok(0.5 * (mean_to(&surf_a, &surf_b) + mean_to(&surf_b, &surf_a)))
}

#[cfg(test)]
pub mod oracle {
    //! Brute-force reference implementations, kept independent of the
    //! production paths above.

    use crate::volume::{Dims, LabelMask, NEIGHBORS_6};

    pub fn dice_brute(a: &LabelMask, b: &LabelMask) -> f64 {
        let dims = a.dims;
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for idx in 0..dims.count() {
            let (va, vb) = (a.get_idx(idx), b.get_idx(idx));
            na += va as usize;
            nb += vb as usize;
            inter += (va && vb) as usize;
        }
        if na + nb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (na + nb) as f64
        }
    }

    fn surface_brute(m: &LabelMask) -> Vec<(usize, usize, usize)> {
        let dims = m.dims;
        let mut out = Vec::new();
        for idx in 0..dims.count() {
            if !m.get_idx(idx) {
                continue;
            }
            let (x, y, z) = dims.coords(idx);
            let boundary = NEIGHBORS_6.iter().any(|&(dx, dy, dz)| {
                !m.get_or_false(x as isize + dx, y as isize + dy, z as isize + dz)
            });
            if boundary {
                out.push((x, y, z));
            }
        }
        out
    }

    pub fn mad_brute(a: &LabelMask, b: &LabelMask, spacing: (f32, f32, f32)) -> f64 {
        let sa = surface_brute(a);
        let sb = surface_brute(b);
        let (wx, wy, wz) = (spacing.0 as f64, spacing.1 as f64, spacing.2 as f64);
        let nearest = |p: (usize, usize, usize), set: &[(usize, usize, usize)]| -> f64 {
            set.iter()
                .map(|&(x, y, z)| {
                    (((p.0 as f64 - x as f64) * wx).powi(2)
                        + ((p.1 as f64 - y as f64) * wy).powi(2)
                        + ((p.2 as f64 - z as f64) * wz).powi(2))
                    .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let d_ab: f64 = sa.iter().map(|&p| nearest(p, &sb)).sum::<f64>() / sa.len() as f64;
        let d_ba: f64 = sb.iter().map(|&p| nearest(p, &sa)).sum::<f64>() / sb.len() as f64;
        0.5 * (d_ab + d_ba)
    }

    pub fn random_mask(dims: Dims, fill: f64, rng: &mut impl rand::Rng) -> LabelMask {
        let mut m = LabelMask::new(dims);
        for idx in 0..dims.count() {
            if rng.gen::<f64>() < fill {
                m.set_idx(idx, true);
            }
        }
        m
    }
}
