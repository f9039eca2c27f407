//! Texture-based patient classification on synthetic cardiac phantoms.
//!
//! The pipeline mirrors a myocardium-analysis study end to end at desk
//! scale: a multiscale triplanar CNN segments a ring-shaped target structure
//! in 3D volumes, a convolutional autoencoder turns local patches into
//! d-dimensional encodings, the segmented voxels are spatially clustered and
//! per-cluster encoding statistics become one feature vector per patient,
//! and an RBF-kernel SVM with repeated cross-validation separates patients
//! with functionally significant lesions from those without.
//!
//! Modules:
//! - [`tensor`], [`net`], [`optim`], [`weights`]: the minimal reverse-mode
//!   engine with exactly the layer zoo the two architectures need.
//! - [`volume`], [`phantom`]: 3D scalar volumes, binary masks, file formats,
//!   and the synthetic patient generator.
//! - [`seg`], [`metrics`]: sparse-grid + surface-refinement segmentation and
//!   Dice / surface-distance metrics.
//! - [`cae`]: the patch autoencoder and per-voxel encoding maps.
//! - [`cluster`], [`features`]: mini-batch k-means over voxel coordinates
//!   and std/max feature aggregation.
//! - [`svm`], [`roc`], [`cv`]: SMO-trained RBF SVM, ROC/AUC, grid search and
//!   repeated stratified cross-validation.
//! - [`config`], [`manifest`], [`pipeline`], [`svgplot`]: experiment
//!   configuration, reproducible run manifests, CLI command bodies, plots.

pub mod cae;
pub mod cluster;
pub mod config;
pub mod cv;
pub mod error;
pub mod features;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod roc;
pub mod seg;
pub mod svgplot;
pub mod svm;
pub mod tensor;
pub mod volume;
pub mod weights;

pub use error::{Error, Result};
