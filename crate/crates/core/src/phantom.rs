//! Synthetic 3D patients: volumes containing a ring-shaped target structure
//! (a thick-walled annulus along z, standing in for contrast-enhanced
//! muscle around a bright cavity), a reference mask, optional local texture
//! lesions, and a synthetic FFR value tied to lesion severity.
//!
//! Randomness is split over named substreams so the base volume is
//! bit-identical whether or not lesions are applied: geometry and voxel
//! noise never observe the patient-level draws.

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{Dims, LabelMask, Volume};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// FFR cut-off the generator designs its severity map around: diseased
/// phantoms always land at or below it, lesion-free phantoms above 0.80.
pub const DESIGN_CUTOFF: f64 = 0.78;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomParams {
    pub dims: Dims,
    pub spacing: (f32, f32, f32),
    /// Outer ring radius range, as a fraction of min(nx, ny).
    pub outer_radius_frac: (f64, f64),
    /// Ring wall thickness range in voxels.
    pub wall_thickness: (f64, f64),
    /// Ring extent along z, as a fraction of nz.
    pub z_extent_frac: (f64, f64),
    /// Base intensities (arbitrary units in the CT number range).
    pub background_intensity: f32,
    pub body_intensity: f32,
    pub cavity_intensity: f32,
    pub ring_intensity: f32,
    /// Per-voxel Gaussian noise, same units.
    pub noise_sigma: f32,
    /// Probability that a phantom is diseased (has lesions, low FFR).
    pub lesion_probability: f64,
    /// Peak intensity offset at a lesion center. 0 makes lesions invisible.
    pub lesion_contrast_delta: f32,
    /// Extra texture noise inside lesions, scaled by the lesion profile.
    pub lesion_texture_sigma: f32,
    /// Total severity drawn uniformly from this range for diseased patients.
    pub severity_range: (f64, f64),
    /// FFR = clamp(1 - severity_to_ffr_k * severity + noise, 0, 1).
    pub severity_to_ffr_k: f64,
    pub ffr_noise_sigma: f64,
    /// Minimum mask distance to the volume boundary, in voxels.
    pub margin_xy: usize,
    pub margin_z: usize,
}

impl PhantomParams {
    /// Desk-scale defaults for the given grid, mirroring the source data's
    /// anisotropy (0.5 x 0.5 x 0.9 mm) at reduced extent.
    pub fn for_dims(dims: Dims) -> Self {
        PhantomParams {
            dims,
            spacing: (0.5, 0.5, 0.9),
            outer_radius_frac: (0.30, 0.38),
            wall_thickness: (3.0, 5.0),
            z_extent_frac: (0.45, 0.6),
            background_intensity: 50.0,
            body_intensity: 120.0,
            cavity_intensity: 450.0,
            ring_intensity: 250.0,
            noise_sigma: 25.0,
            lesion_probability: 0.5,
            lesion_contrast_delta: -80.0,
            lesion_texture_sigma: 0.0,
            severity_range: (1.0, 2.5),
            severity_to_ffr_k: 0.25,
            ffr_noise_sigma: 0.01,
            margin_xy: (dims.nx / 8).max(4),
            margin_z: (dims.nz / 8).max(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.nx == 0 || d.ny == 0 || d.nz == 0 {
            return Err(Error::Parameter("phantom dims must be positive".into()));
        }
        let min_xy = d.nx.min(d.ny) as f64;
        let r_max = self.outer_radius_frac.1 * min_xy / 2.0;
        let jitter = 3.0;
        // ring plus jitter must fit inside the margins
        let fits_x = r_max + jitter + self.margin_xy as f64 + 1.0 <= d.nx as f64 / 2.0;
        let fits_y = r_max + jitter + self.margin_xy as f64 + 1.0 <= d.ny as f64 / 2.0;
        // z0/z1 are clamped to the margins during generation; the ring just
        // needs a few slices of room between them
        let fits_z = d.nz >= 2 * self.margin_z + 4
            && self.z_extent_frac.0 * d.nz as f64 >= 3.0;
        if !(fits_x && fits_y && fits_z) {
            return Err(Error::Parameter(format!(
                "ring geometry (outer radius up to {r_max:.1} vox) cannot fit in \
                 {}x{}x{} with margins ({}, {})",
                d.nx, d.ny, d.nz, self.margin_xy, self.margin_z
            )));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::Parameter("lesion probability must be in [0, 1]".into()));
        }
        if self.outer_radius_frac.0 > self.outer_radius_frac.1
            || self.wall_thickness.0 > self.wall_thickness.1
            || self.z_extent_frac.0 > self.z_extent_frac.1
            || self.severity_range.0 > self.severity_range.1
        {
            return Err(Error::Parameter("phantom ranges must be non-degenerate".into()));
        }
        if self.wall_thickness.0 < 2.0 {
            return Err(Error::Parameter(
                "ring wall must be at least 2 voxels to stay 6-connected".into(),
            ));
        }
        if self.severity_to_ffr_k <= 0.0 {
            return Err(Error::Parameter("severity_to_ffr_k must be positive".into()));
        }
        // the designed severity floor must push FFR at or below the cut-off
        let worst = 1.0 - self.severity_to_ffr_k * self.severity_range.0
            + 2.0 * self.ffr_noise_sigma;
        if worst > DESIGN_CUTOFF {
            return Err(Error::Parameter(format!(
                "severity floor {} maps to FFR {worst:.3} > {DESIGN_CUTOFF}",
                self.severity_range.0
            )));
        }
        Ok(())
    }
}

/// A local lesion: sphere in physical coordinates, smooth radial profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: (usize, usize, usize),
    pub radius_mm: f64,
    pub contrast_delta: f32,
    pub texture_sigma: f32,
}

/// Reference radius: a lesion of this radius carries severity 1 by itself.
pub const LESION_REF_RADIUS_MM: f64 = 2.5;

impl LesionSpec {
    /// Severity proxy: relative lesion volume.
    pub fn severity(&self) -> f64 {
        (self.radius_mm / LESION_REF_RADIUS_MM).powi(3)
    }
}

#[derive(Debug, Clone)]
pub struct PatientPhantom {
    pub id: String,
    pub volume: Volume,
    pub mask: LabelMask,
    pub lesions: Vec<LesionSpec>,
    pub ffr: f64,
}

impl PatientPhantom {
    pub fn is_diseased_at(&self, cutoff: f64) -> bool {
        self.ffr <= cutoff
    }
}

/// Severity to FFR: clamp(1 - k*severity + noise, 0, 1) with noise drawn
/// from N(0, sigma) truncated at two sigma.
pub fn severity_to_ffr(severity: f64, k: f64, noise_sigma: f64, rng: &mut impl Rng) -> f64 {
    let noise = (rng::normal(rng) * noise_sigma).clamp(-2.0 * noise_sigma, 2.0 * noise_sigma);
    (1.0 - k * severity + noise).clamp(0.0, 1.0)
}

/// Generate one phantom. Deterministic in (seed, params).
pub fn generate_phantom(seed: u64, id: &str, params: &PhantomParams) -> Result<PatientPhantom> {
    params.validate()?;
    let dims = params.dims;
    let mut geom_rng = rng::substream(seed, "phantom-geometry");

    // ring geometry
    let min_xy = dims.nx.min(dims.ny) as f64;
    let r_out = geom_rng.gen_range(params.outer_radius_frac.0..=params.outer_radius_frac.1)
        * min_xy
        / 2.0;
    let wall = geom_rng.gen_range(params.wall_thickness.0..=params.wall_thickness.1);
    let z_span = geom_rng.gen_range(params.z_extent_frac.0..=params.z_extent_frac.1)
        * dims.nz as f64;
    let cx = dims.nx as f64 / 2.0 + geom_rng.gen_range(-3.0..=3.0);
    let cy = dims.ny as f64 / 2.0 + geom_rng.gen_range(-3.0..=3.0);
    let cz = dims.nz as f64 / 2.0 + geom_rng.gen_range(-1.5..=1.5);
    let z0 = ((cz - z_span / 2.0).round() as usize).max(params.margin_z);
    let z1 = ((cz + z_span / 2.0).round() as usize).min(dims.nz - 1 - params.margin_z);
    // apex taper: outer radius shrinks slightly toward z1
    let taper = geom_rng.gen_range(0.0..=0.12);

    let radius_at = |z: usize| -> (f64, f64) {
        let t = if z1 > z0 { (z - z0) as f64 / (z1 - z0) as f64 } else { 0.0 };
        let r_o = r_out * (1.0 - taper * t);
        (r_o - wall, r_o)
    };

    // reference mask
    let mut mask = LabelMask::new(dims);
    for z in z0..=z1 {
        let (r_in, r_o) = radius_at(z);
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let r = (dx * dx + dy * dy).sqrt();
                if r >= r_in && r <= r_o {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
    debug_assert!(mask.is_six_connected());

    // base intensities: background, body ellipsoid, cavity, ring
    let mut volume = Volume::new(dims, params.spacing, params.background_intensity)?;
    let body_a = (r_out * 2.0).min(dims.nx as f64 / 2.0 - 2.0);
    let body_b = (r_out * 2.0).min(dims.ny as f64 / 2.0 - 2.0);
    let body_c = (z_span * 0.9).min(dims.nz as f64 / 2.0 - 2.0);
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let ex = (x as f64 - cx) / body_a;
                let ey = (y as f64 - cy) / body_b;
                let ez = (z as f64 - cz) / body_c;
                if ex * ex + ey * ey + ez * ez <= 1.0 {
                    volume.set(x, y, z, params.body_intensity);
                }
            }
        }
    }
    for z in z0..=z1 {
        let (r_in, r_o) = radius_at(z);
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let r = (dx * dx + dy * dy).sqrt();
                if r < r_in {
                    volume.set(x, y, z, params.cavity_intensity);
                } else if r <= r_o {
                    volume.set(x, y, z, params.ring_intensity);
                }
            }
        }
    }

    // voxel noise from its own stream, one draw per voxel in linear order
    let mut noise_rng = rng::substream(seed, "phantom-noise");
    for v in &mut volume.voxels {
        *v += (rng::normal(&mut noise_rng) as f32) * params.noise_sigma;
    }

    // patient-level draws
    let mut patient_rng = rng::substream(seed, "phantom-patient");
    let diseased = patient_rng.gen::<f64>() < params.lesion_probability;
    let (lesions, ffr) = if diseased {
        let total_severity =
            patient_rng.gen_range(params.severity_range.0..=params.severity_range.1);
        let n_lesions = patient_rng.gen_range(1..=3usize);
        // split severity into positive shares
        let mut shares: Vec<f64> = (0..n_lesions)
            .map(|_| patient_rng.gen_range(0.5..=1.0))
            .collect();
        let share_sum: f64 = shares.iter().sum();
        for s in &mut shares {
            *s *= total_severity / share_sum;
        }
        let mask_voxels = mask.indices();
        let lesions: Vec<LesionSpec> = shares
            .iter()
            .map(|&s| {
                let center_idx = mask_voxels[patient_rng.gen_range(0..mask_voxels.len())];
                LesionSpec {
                    center: dims.coords(center_idx),
                    radius_mm: LESION_REF_RADIUS_MM * s.cbrt(),
                    contrast_delta: params.lesion_contrast_delta,
                    texture_sigma: params.lesion_texture_sigma,
                }
            })
            .collect();
        let ffr = severity_to_ffr(
            total_severity,
            params.severity_to_ffr_k,
            params.ffr_noise_sigma,
            &mut patient_rng,
        );
        (lesions, ffr)
    } else {
        let ffr = patient_rng.gen_range(0.80..=0.98);
        (Vec::new(), ffr)
    };

    // apply lesions; each has a private stream so in-sphere texture draws
    // cannot shift any other voxel
    for (li, lesion) in lesions.iter().enumerate() {
        let mut lesion_rng = rng::substream(seed, &format!("phantom-lesion-{li}"));
        apply_lesion(&mut volume, lesion, &mut lesion_rng);
    }

    Ok(PatientPhantom {
        id: id.to_string(),
        volume,
        mask,
        lesions,
        ffr,
    })
}

fn apply_lesion(volume: &mut Volume, lesion: &LesionSpec, rng: &mut impl Rng) {
    let dims = volume.dims;
    let (sx, sy, sz) = (
        volume.spacing.0 as f64,
        volume.spacing.1 as f64,
        volume.spacing.2 as f64,
    );
    let (cx, cy, cz) = lesion.center;
    let rx = (lesion.radius_mm / sx).ceil() as isize;
    let ry = (lesion.radius_mm / sy).ceil() as isize;
    let rz = (lesion.radius_mm / sz).ceil() as isize;
    for dz in -rz..=rz {
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let (x, y, z) = (cx as isize + dx, cy as isize + dy, cz as isize + dz);
                if !dims.contains(x, y, z) {
                    continue;
                }
                let d_mm = ((dx as f64 * sx).powi(2)
                    + (dy as f64 * sy).powi(2)
                    + (dz as f64 * sz).powi(2))
                .sqrt();
                if d_mm > lesion.radius_mm {
                    continue;
                }
                // smooth radial profile, 1 at the center, 0 at the rim
                let profile =
                    0.5 * (1.0 + (std::f64::consts::PI * d_mm / lesion.radius_mm).cos());
                let mut delta = lesion.contrast_delta as f64 * profile;
                if lesion.texture_sigma > 0.0 {
                    delta += lesion.texture_sigma as f64 * profile * rng::normal(rng);
                }
                let idx = dims.index(x as usize, y as usize, z as usize);
                volume.voxels[idx] += delta as f32;
            }
        }
    }
}
