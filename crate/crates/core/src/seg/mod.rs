//! Voxel classification of the ring structure: multiscale triplanar CNN,
//! three-stage segmentation (sparse grid, Gaussian rough mask, iterative
//! surface refinement), and the training sampler behind it.

mod infer;
mod sampler;
mod train;

pub use infer::{classify_sparse_grid, classify_voxels, refine_surface, rough_segmentation, RefineResult, RefineStatus};
pub use sampler::TrainingSampler;
pub use train::{train_segmentation_cnn, SegTrainHyper};

use crate::error::{Error, Result};
use crate::net::{LayerSpec, Mode, Network, NetworkBuilder, NetworkSpec};
use crate::tensor::Tensor;
use crate::volume::Volume;
use std::path::Path;

pub const SMALL_PATCH: usize = 49;
pub const LARGE_PATCH: usize = 147;
const HALF_SMALL: isize = (SMALL_PATCH as isize - 1) / 2;
const HALF_LARGE: isize = (LARGE_PATCH as isize - 1) / 2;

/// Intensity window mapped affinely onto [0, 1]; values outside are clamped.
pub const NORM_CLAMP: (f32, f32) = (-400.0, 1200.0);

#[inline]
pub fn normalize_intensity(v: f32) -> f32 {
    (v.clamp(NORM_CLAMP.0, NORM_CLAMP.1) - NORM_CLAMP.0) / (NORM_CLAMP.1 - NORM_CLAMP.0)
}

/// The six orthogonal patches around one voxel: three 49x49 at full
/// resolution and three 147x147 at the same centers. The large set reduces
/// to 49x49 inside the network through a 3x3 max-pool.
#[derive(Debug, Clone)]
pub struct TriplanarPatchSet {
    /// axial, coronal, sagittal; each SMALL_PATCH^2, row-major.
    pub small: [Vec<f32>; 3],
    /// axial, coronal, sagittal; each LARGE_PATCH^2, row-major.
    pub large: [Vec<f32>; 3],
}

/// Extract normalized triplanar patches centered on `voxel`. Samples
/// outside the volume are zero-filled.
///
/// Plane conventions (row, column): axial = (y, x) at fixed z,
/// coronal = (z, x) at fixed y, sagittal = (z, y) at fixed x.
pub fn extract_triplanar_patches(
    volume: &Volume,
    voxel: (usize, usize, usize),
) -> Result<TriplanarPatchSet> {
    let (x, y, z) = voxel;
    let dims = volume.dims;
    if x >= dims.nx || y >= dims.ny || z >= dims.nz {
        return Err(Error::Parameter(format!(
            "voxel ({x}, {y}, {z}) outside volume {}x{}x{}",
            dims.nx, dims.ny, dims.nz
        )));
    }
    // out-of-bounds samples are zeros in the normalized input space; rows
    // copy as contiguous segments where the memory layout allows
    let grab = |half: isize, side: usize| -> [Vec<f32>; 3] {
        let mut axial = vec![0.0f32; side * side];
        let mut coronal = vec![0.0f32; side * side];
        let mut sagittal = vec![0.0f32; side * side];
        // valid column span when the column axis is x: dc in [-x, nx - x)
        let x_lo = ((half - x as isize).max(0) as usize).min(side);
        let x_hi = ((dims.nx as isize - x as isize + half).max(0) as usize).min(side);
        let y_lo = ((half - y as isize).max(0) as usize).min(side);
        let y_hi = ((dims.ny as isize - y as isize + half).max(0) as usize).min(side);
        for r in 0..side {
            let dr = r as isize - half;
            // axial: row = y + dr at fixed z, columns over x (contiguous)
            let ys = y as isize + dr;
            if ys >= 0 && (ys as usize) < dims.ny {
                let base = dims.index(0, ys as usize, z);
                let row = &volume.voxels[base..base + dims.nx];
                let dst = &mut axial[r * side..(r + 1) * side];
                for c in x_lo..x_hi {
                    dst[c] =
                        normalize_intensity(row[(x as isize + c as isize - half) as usize]);
                }
            }
            // coronal: row = z + dr at fixed y, columns over x (contiguous)
            let zs = z as isize + dr;
            if zs >= 0 && (zs as usize) < dims.nz {
                let base = dims.index(0, y, zs as usize);
                let row = &volume.voxels[base..base + dims.nx];
                let dst = &mut coronal[r * side..(r + 1) * side];
                for c in x_lo..x_hi {
                    dst[c] =
                        normalize_intensity(row[(x as isize + c as isize - half) as usize]);
                }
                // sagittal: row = z + dr at fixed x, columns over y (stride nx)
                let dst = &mut sagittal[r * side..(r + 1) * side];
                for c in y_lo..y_hi {
                    let sy = (y as isize + c as isize - half) as usize;
                    dst[c] = normalize_intensity(volume.voxels[dims.index(x, sy, zs as usize)]);
                }
            }
        }
        [axial, coronal, sagittal]
    };
    Ok(TriplanarPatchSet {
        small: grab(HALF_SMALL, SMALL_PATCH),
        large: grab(HALF_LARGE, LARGE_PATCH),
    })
}

pub const PLANES: [&str; 3] = ["axial", "coronal", "sagittal"];
pub const SCALES: [&str; 2] = ["small", "large"];

/// Build the multiscale classifier graph: two identical subnetworks (one
/// per patch scale), each with three plane streams fused by a 256-unit
/// fully-connected layer; the subnetworks fuse into another 256-unit layer
/// followed by the 2-unit softmax head. Dropout sits after each fusion
/// layer's activation.
pub fn build_segmentation_spec(dropout_rate: f64) -> NetworkSpec {
    let mut b = NetworkBuilder::new();
    let mut subnet_outputs = Vec::new();
    for scale in SCALES {
        let mut stream_outputs = Vec::new();
        for plane in PLANES {
            let name = |layer: &str| format!("{scale}.{plane}.{layer}");
            let side = if scale == "small" { SMALL_PATCH } else { LARGE_PATCH };
            let input = b.input(&format!("{scale}.{plane}"), [1, side, side]);
            let mut cursor = input;
            if scale == "large" {
                cursor = b.node(
                    &name("downsample"),
                    LayerSpec::MaxPool2d {
                        kernel: (3, 3),
                        stride: (3, 3),
                    },
                    &[cursor],
                );
            }
            let ladder: [(usize, usize); 6] =
                [(16, 5), (16, 5), (32, 3), (32, 3), (64, 3), (64, 3)];
            for (ci, &(filters, kernel)) in ladder.iter().enumerate() {
                cursor = b.node(
                    &name(&format!("conv{}", ci + 1)),
                    LayerSpec::Conv2d {
                        filters,
                        kernel: (kernel, kernel),
                        stride: (1, 1),
                        padding: (0, 0),
                    },
                    &[cursor],
                );
                cursor = b.node(&name(&format!("bn{}", ci + 1)), LayerSpec::BatchNorm, &[cursor]);
                cursor = b.node(
                    &name(&format!("elu{}", ci + 1)),
                    LayerSpec::Elu { alpha: 1.0 },
                    &[cursor],
                );
                if ci == 1 || ci == 3 {
                    cursor = b.node(
                        &name(&format!("pool{}", ci / 2 + 1)),
                        LayerSpec::MaxPool2d {
                            kernel: (2, 2),
                            stride: (2, 2),
                        },
                        &[cursor],
                    );
                }
            }
            stream_outputs.push(cursor);
        }
        let fuse = b.node(
            &format!("{scale}.fuse"),
            LayerSpec::FullyConnected { units: 256 },
            &stream_outputs,
        );
        let fuse_elu = b.node(&format!("{scale}.fuse_elu"), LayerSpec::Elu { alpha: 1.0 }, &[fuse]);
        let fuse_drop = b.node(
            &format!("{scale}.fuse_drop"),
            LayerSpec::Dropout { rate: dropout_rate },
            &[fuse_elu],
        );
        subnet_outputs.push(fuse_drop);
    }
    let fuse = b.node("fuse", LayerSpec::FullyConnected { units: 256 }, &subnet_outputs);
    let fuse_elu = b.node("fuse_elu", LayerSpec::Elu { alpha: 1.0 }, &[fuse]);
    let fuse_drop = b.node(
        "fuse_drop",
        LayerSpec::Dropout { rate: dropout_rate },
        &[fuse_elu],
    );
    let head = b.node("head", LayerSpec::FullyConnected { units: 2 }, &[fuse_drop]);
    let softmax = b.node("softmax", LayerSpec::Softmax, &[head]);
    b.finish(softmax).expect("segmentation graph is well-formed")
}

/// Verify the stream ladder against the published layer table: per stream
/// conv16 5x5 twice, 2x2 max-pool, conv32 3x3 twice, 2x2 max-pool,
/// conv64 3x3 twice; every fusion layer 256 units; 2-unit softmax head.
pub fn verify_stream_ladder(spec: &NetworkSpec) -> Result<()> {
    let find = |name: &str| -> Result<&LayerSpec> {
        spec.nodes
            .iter()
            .find(|n| n.name == name)
            .map(|n| &n.layer)
            .ok_or_else(|| Error::State(format!("missing node `{name}`")))
    };
    let expect_conv = |name: &str, filters: usize, k: usize| -> Result<()> {
        match find(name)? {
            LayerSpec::Conv2d {
                filters: f,
                kernel,
                stride,
                ..
            } if *f == filters && *kernel == (k, k) && *stride == (1, 1) => Ok(()),
            other => Err(Error::State(format!(
                "node `{name}` is {other:?}, expected conv {filters} @ {k}x{k}"
            ))),
        }
    };
    let expect_pool = |name: &str, k: usize| -> Result<()> {
        match find(name)? {
            LayerSpec::MaxPool2d { kernel, stride } if *kernel == (k, k) && *stride == (k, k) => {
                Ok(())
            }
            other => Err(Error::State(format!(
                "node `{name}` is {other:?}, expected {k}x{k} max-pool"
            ))),
        }
    };
    let expect_fc = |name: &str, units: usize| -> Result<()> {
        match find(name)? {
            LayerSpec::FullyConnected { units: u } if *u == units => Ok(()),
            other => Err(Error::State(format!(
                "node `{name}` is {other:?}, expected fully_connected {units}"
            ))),
        }
    };
    for scale in SCALES {
        for plane in PLANES {
            let p = |l: &str| format!("{scale}.{plane}.{l}");
            expect_conv(&p("conv1"), 16, 5)?;
            expect_conv(&p("conv2"), 16, 5)?;
            expect_pool(&p("pool1"), 2)?;
            expect_conv(&p("conv3"), 32, 3)?;
            expect_conv(&p("conv4"), 32, 3)?;
            expect_pool(&p("pool2"), 2)?;
            expect_conv(&p("conv5"), 64, 3)?;
            expect_conv(&p("conv6"), 64, 3)?;
            for ci in 1..=6 {
                match find(&p(&format!("bn{ci}")))? {
                    LayerSpec::BatchNorm => {}
                    other => {
                        return Err(Error::State(format!(
                            "expected batch_norm after conv{ci}, found {other:?}"
                        )))
                    }
                }
            }
            if scale == "large" {
                expect_pool(&p("downsample"), 3)?;
            }
        }
        expect_fc(&format!("{scale}.fuse"), 256)?;
    }
    expect_fc("fuse", 256)?;
    expect_fc("head", 2)?;
    match find("softmax")? {
        LayerSpec::Softmax => Ok(()),
        other => Err(Error::State(format!("head output is {other:?}, expected softmax"))),
    }
}

/// The trained voxel classifier. Output class 1 is foreground.
pub struct SegmentationModel {
    net: Network<f32>,
}

impl SegmentationModel {
    pub fn new(seed: u64, dropout_rate: f64) -> Result<Self> {
        let spec = build_segmentation_spec(dropout_rate);
        verify_stream_ladder(&spec)?;
        let net = Network::build(spec, seed)?;
        Ok(SegmentationModel { net })
    }

    pub fn net(&self) -> &Network<f32> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.net.set_mode(mode);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::weights::save_weights(path, &self.net.named_tensors())
    }

    pub fn load(path: &Path, dropout_rate: f64) -> Result<Self> {
        let mut model = SegmentationModel::new(0, dropout_rate)?;
        let tensors = crate::weights::load_weights(path)?;
        model.net.load_named_tensors(&tensors)?;
        model.net.set_mode(Mode::Eval);
        Ok(model)
    }

    /// Assemble the six network inputs for a batch of patch sets.
    pub fn batch_inputs(patches: &[TriplanarPatchSet]) -> Vec<Tensor<f32>> {
        let b = patches.len();
        let mut inputs = Vec::with_capacity(6);
        for (scale_idx, side) in [(0usize, SMALL_PATCH), (1, LARGE_PATCH)] {
            for plane in 0..3 {
                let mut data = vec![0.0f32; b * side * side];
                for (bi, p) in patches.iter().enumerate() {
                    let src = if scale_idx == 0 { &p.small[plane] } else { &p.large[plane] };
                    data[bi * side * side..(bi + 1) * side * side].copy_from_slice(src);
                }
                inputs.push(Tensor::from_vec(&[b, 1, side, side], data).expect("patch shapes"));
            }
        }
        inputs
    }

    /// Foreground probability per patch set; eval mode, immutable, callable
    /// in parallel on a shared model.
    pub fn classify_batch(&self, patches: &[TriplanarPatchSet]) -> Result<Vec<f32>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let inputs = Self::batch_inputs(patches);
        let out = self.net.forward_eval(&inputs)?;
        let b = patches.len();
        Ok((0..b).map(|i| out.data()[i * 2 + 1]).collect())
    }
}
