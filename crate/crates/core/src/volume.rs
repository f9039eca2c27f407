//! 3D scalar volumes and binary label masks, with their on-disk formats.
//!
//! MYOV (volumes), all integers little-endian:
//!   magic "MYOV" | version u32 | nx,ny,nz u32 | sx,sy,sz f32 | nx*ny*nz f32
//! MYOM (masks), run-length encoded over the linear voxel index:
//!   magic "MYOV"-style header "MYOM" | version u32 | nx,ny,nz u32 |
//!   run count u64 | (start u64, len u64) per run, runs sorted and disjoint.
//!
//! Linear index order is x fastest: idx = x + nx*(y + ny*z).

use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const VOLUME_MAGIC: &[u8; 4] = b"MYOV";
pub const MASK_MAGIC: &[u8; 4] = b"MYOM";
pub const VOLUME_VERSION: u32 = 1;

/// Voxel grid extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn contains(&self, x: isize, y: isize, z: isize) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }
}

/// Scalar volume with physical voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: (f32, f32, f32),
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: (f32, f32, f32), fill: f32) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::Parameter("volume dims must be positive".into()));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::Parameter("volume spacing must be positive".into()));
        }
        Ok(Volume {
            dims,
            spacing,
            voxels: vec![fill; dims.count()],
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.dims.index(x, y, z);
        self.voxels[i] = v;
    }

    /// Sample with zero fill outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize, z: isize) -> f32 {
        if self.dims.contains(x, y, z) {
            self.voxels[self.dims.index(x as usize, y as usize, z as usize)]
        } else {
            0.0
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = crate::manifest::temp_sibling(path);
        {
            let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let werr = |e| Error::io(path, e);
            w.write_all(VOLUME_MAGIC).map_err(werr)?;
            w.write_all(&VOLUME_VERSION.to_le_bytes()).map_err(werr)?;
            for d in [self.dims.nx, self.dims.ny, self.dims.nz] {
                w.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
            }
            for s in [self.spacing.0, self.spacing.1, self.spacing.2] {
                w.write_all(&s.to_le_bytes()).map_err(werr)?;
            }
            for &v in &self.voxels {
                w.write_all(&v.to_le_bytes()).map_err(werr)?;
            }
            w.flush().map_err(werr)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        check_magic(&mut r, VOLUME_MAGIC, path)?;
        let dims = Dims::new(
            read_u32(&mut r, path)? as usize,
            read_u32(&mut r, path)? as usize,
            read_u32(&mut r, path)? as usize,
        );
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::Format(format!("{}: zero dims", path.display())));
        }
        let spacing = (
            read_f32(&mut r, path)?,
            read_f32(&mut r, path)?,
            read_f32(&mut r, path)?,
        );
        let count = dims.count();
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("{}: truncated volume data", path.display())))?;
        let mut tail = [0u8; 1];
        if r.read(&mut tail).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Format(format!(
                "{}: trailing bytes after volume data",
                path.display()
            )));
        }
        let voxels = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Volume {
            dims,
            spacing,
            voxels,
        })
    }
}

/// Binary voxel mask backed by a u64 bitset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub dims: Dims,
    words: Vec<u64>,
}

impl LabelMask {
    pub fn new(dims: Dims) -> Self {
        LabelMask {
            dims,
            words: vec![0; dims.count().div_ceil(64)],
        }
    }

    #[inline]
    pub fn get_idx(&self, idx: usize) -> bool {
        (self.words[idx / 64] >> (idx % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_idx(&mut self, idx: usize, value: bool) {
        if value {
            self.words[idx / 64] |= 1 << (idx % 64);
        } else {
            self.words[idx / 64] &= !(1 << (idx % 64));
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.get_idx(self.dims.index(x, y, z))
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        self.set_idx(self.dims.index(x, y, z), value)
    }

    /// Treats out-of-bounds coordinates as background.
    #[inline]
    pub fn get_or_false(&self, x: isize, y: isize, z: isize) -> bool {
        self.dims.contains(x, y, z) && self.get(x as usize, y as usize, z as usize)
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Linear indices of foreground voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.count());
        for (wi, &word) in self.words.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                let idx = wi * 64 + b;
                if idx < self.dims.count() {
                    out.push(idx);
                }
                bits &= bits - 1;
            }
        }
        out
    }

    /// Foreground voxels with at least one 6-neighbor that is background
    /// (out-of-bounds counts as background).
    pub fn surface_indices(&self) -> Vec<usize> {
        self.indices()
            .into_iter()
            .filter(|&idx| {
                let (x, y, z) = self.dims.coords(idx);
                NEIGHBORS_6.iter().any(|&(dx, dy, dz)| {
                    !self.get_or_false(x as isize + dx, y as isize + dy, z as isize + dz)
                })
            })
            .collect()
    }

    /// Background voxels 6-adjacent to the mask.
    pub fn outer_shell_indices(&self) -> Vec<usize> {
        let mut seen = LabelMask::new(self.dims);
        let mut out = Vec::new();
        for idx in self.indices() {
            let (x, y, z) = self.dims.coords(idx);
            for &(dx, dy, dz) in &NEIGHBORS_6 {
                let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if self.dims.contains(nx, ny, nz) {
                    let nidx = self.dims.index(nx as usize, ny as usize, nz as usize);
                    if !self.get_idx(nidx) && !seen.get_idx(nidx) {
                        seen.set_idx(nidx, true);
                        out.push(nidx);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// True when the foreground is a single 6-connected component.
    pub fn is_six_connected(&self) -> bool {
        let indices = self.indices();
        if indices.is_empty() {
            return true;
        }
        let mut visited = LabelMask::new(self.dims);
        let mut stack = vec![indices[0]];
        visited.set_idx(indices[0], true);
        let mut reached = 0usize;
        while let Some(idx) = stack.pop() {
            reached += 1;
            let (x, y, z) = self.dims.coords(idx);
            for &(dx, dy, dz) in &NEIGHBORS_6 {
                let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if self.get_or_false(nx, ny, nz) {
                    let nidx = self.dims.index(nx as usize, ny as usize, nz as usize);
                    if !visited.get_idx(nidx) {
                        visited.set_idx(nidx, true);
                        stack.push(nidx);
                    }
                }
            }
        }
        reached == indices.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = crate::manifest::temp_sibling(path);
        {
            let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let werr = |e| Error::io(path, e);
            w.write_all(MASK_MAGIC).map_err(werr)?;
            w.write_all(&VOLUME_VERSION.to_le_bytes()).map_err(werr)?;
            for d in [self.dims.nx, self.dims.ny, self.dims.nz] {
                w.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
            }
            let runs = self.runs();
            w.write_all(&(runs.len() as u64).to_le_bytes()).map_err(werr)?;
            for (start, len) in runs {
                w.write_all(&(start as u64).to_le_bytes()).map_err(werr)?;
                w.write_all(&(len as u64).to_le_bytes()).map_err(werr)?;
            }
            w.flush().map_err(werr)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        check_magic(&mut r, MASK_MAGIC, path)?;
        let dims = Dims::new(
            read_u32(&mut r, path)? as usize,
            read_u32(&mut r, path)? as usize,
            read_u32(&mut r, path)? as usize,
        );
        let n_runs = read_u64(&mut r, path)?;
        let mut mask = LabelMask::new(dims);
        let mut prev_end = 0usize;
        for _ in 0..n_runs {
            let start = read_u64(&mut r, path)? as usize;
            let len = read_u64(&mut r, path)? as usize;
            if len == 0 || start < prev_end || start + len > dims.count() {
                return Err(Error::Format(format!(
                    "{}: invalid run ({start}, {len})",
                    path.display()
                )));
            }
            for idx in start..start + len {
                mask.set_idx(idx, true);
            }
            prev_end = start + len;
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Format(format!(
                "{}: trailing bytes after mask runs",
                path.display()
            )));
        }
        Ok(mask)
    }

    fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut current: Option<(usize, usize)> = None;
        for idx in self.indices() {
            match current {
                Some((start, len)) if start + len == idx => current = Some((start, len + 1)),
                Some(run) => {
                    runs.push(run);
                    current = Some((idx, 1));
                }
                None => current = Some((idx, 1)),
            }
        }
        if let Some(run) = current {
            runs.push(run);
        }
        runs
    }
}

pub const NEIGHBORS_6: [(isize, isize, isize); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

/// Exact squared Euclidean distance transform (Felzenszwalb–Huttenlocher),
/// separable over the three axes with per-axis weights. Seeds are voxels
/// where `seed` is true; the result holds, for every voxel, the squared
/// weighted distance to the nearest seed (infinity if there are none).
pub fn squared_distance_transform(
    dims: Dims,
    weights: (f64, f64, f64),
    seed: impl Fn(usize) -> bool,
) -> Vec<f64> {
    let n = dims.count();
    let mut dist: Vec<f64> = (0..n)
        .map(|i| if seed(i) { 0.0 } else { f64::INFINITY })
        .collect();

    let mut line = Vec::new();
    let mut out_line = Vec::new();

    // x axis
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            line.clear();
            line.extend((0..dims.nx).map(|x| dist[dims.index(x, y, z)]));
            edt_1d(&line, weights.0, &mut out_line);
            for x in 0..dims.nx {
                dist[dims.index(x, y, z)] = out_line[x];
            }
        }
    }
    // y axis
    for z in 0..dims.nz {
        for x in 0..dims.nx {
            line.clear();
            line.extend((0..dims.ny).map(|y| dist[dims.index(x, y, z)]));
            edt_1d(&line, weights.1, &mut out_line);
            for y in 0..dims.ny {
                dist[dims.index(x, y, z)] = out_line[y];
            }
        }
    }
    // z axis
    for y in 0..dims.ny {
        for x in 0..dims.nx {
            line.clear();
            line.extend((0..dims.nz).map(|z| dist[dims.index(x, y, z)]));
            edt_1d(&line, weights.2, &mut out_line);
            for z in 0..dims.nz {
                dist[dims.index(x, y, z)] = out_line[z];
            }
        }
    }
    dist
}

/// 1D lower envelope of parabolas f[i] + w^2 (x - i)^2. Infinite entries
/// (no seed reachable yet) contribute no parabola.
fn edt_1d(f: &[f64], w: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let w2 = w * w;
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // envelope boundaries
    let mut k = usize::MAX; // no parabola yet
    let intersect = |q: usize, p: usize| -> f64 {
        (f[q] - f[p] + w2 * ((q * q) as f64 - (p * p) as f64))
            / (2.0 * w2 * (q as f64 - p as f64))
    };
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if k == usize::MAX {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        // s is finite and z[0] = -inf, so the pop loop stops at k = 0
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if k == usize::MAX {
        return; // no seeds on this line
    }
    let mut j = 0usize;
    for q in 0..n {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        out[q] = f[p] + w2 * d * d;
    }
}

fn check_magic(r: &mut impl Read, expected: &[u8; 4], path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &magic != expected {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected)
        )));
    }
    let version = read_u32(r, path)?;
    if version != VOLUME_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{}: truncated file", path.display())))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{}: truncated file", path.display())))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r, path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = Volume::new(Dims::new(5, 4, 3), (0.5, 0.5, 0.9), 0.0).unwrap();
        let mut rng = crate::rng::substream(3, "vol");
        for v in &mut vol.voxels {
            *v = crate::rng::normal(&mut rng) as f32 * 500.0;
        }
        let path = dir.path().join("v.myov");
        vol.save(&path).unwrap();
        let loaded = Volume::load(&path).unwrap();
        assert_eq!(vol, loaded);
    }

    #[test]
    fn degenerate_1x1x1_volume_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new(Dims::new(1, 1, 1), (1.0, 1.0, 1.0), 42.5).unwrap();
        let path = dir.path().join("v.myov");
        vol.save(&path).unwrap();
        assert_eq!(Volume::load(&path).unwrap(), vol);
    }

    #[test]
    fn truncated_volume_is_format_error_without_partial_result() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new(Dims::new(4, 4, 4), (1.0, 1.0, 1.0), 1.0).unwrap();
        let path = dir.path().join("v.myov");
        vol.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.myov");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Volume::load(&cut), Err(Error::Format(_))));
    }

    #[test]
    fn mask_round_trip_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = LabelMask::new(Dims::new(8, 8, 2));
        for idx in [0usize, 1, 2, 64, 66, 127] {
            mask.set_idx(idx, true);
        }
        let path = dir.path().join("m.myom");
        mask.save(&path).unwrap();
        let loaded = LabelMask::load(&path).unwrap();
        assert_eq!(mask, loaded);
        assert_eq!(loaded.count(), 6);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new(Dims::new(2, 2, 2), (1.0, 1.0, 1.0), 0.0).unwrap();
        let vpath = dir.path().join("v.myov");
        vol.save(&vpath).unwrap();
        assert!(matches!(LabelMask::load(&vpath), Err(Error::Format(_))));
    }

    #[test]
    fn surface_of_solid_cube_is_its_shell() {
        let dims = Dims::new(6, 6, 6);
        let mut mask = LabelMask::new(dims);
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    mask.set(x, y, z, true);
                }
            }
        }
        let surface = mask.surface_indices();
        // 4^3 cube minus its 2^3 interior
        assert_eq!(surface.len(), 64 - 8);
        assert!(mask.is_six_connected());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let dims = Dims::new(7, 6, 5);
        let mut rng = crate::rng::substream(9, "edt");
        use rand::Rng;
        let seeds: Vec<bool> = (0..dims.count()).map(|_| rng.gen::<f64>() < 0.1).collect();
        if !seeds.iter().any(|&s| s) {
            return;
        }
        let weights = (0.5f64, 0.7, 0.9);
        let got = squared_distance_transform(dims, weights, |i| seeds[i]);
        for idx in 0..dims.count() {
            let (x, y, z) = dims.coords(idx);
            let mut best = f64::INFINITY;
            for (sidx, &s) in seeds.iter().enumerate() {
                if !s {
                    continue;
                }
                let (sx, sy, sz) = dims.coords(sidx);
                let dx = (x as f64 - sx as f64) * weights.0;
                let dy = (y as f64 - sy as f64) * weights.1;
                let dz = (z as f64 - sz as f64) * weights.2;
                best = best.min(dx * dx + dy * dy + dz * dz);
            }
            assert!(
                (got[idx] - best).abs() < 1e-9,
                "idx {idx}: {} vs {}",
                got[idx],
                best
            );
        }
    }
}
