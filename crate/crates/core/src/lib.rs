//! Deformation-reconstruction pretext tasks and point cloud mixup for
//! unsupervised domain adaptation on 3D point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`cloud`] and [`spatial`]: point cloud types, normalisation, sampling,
//!   normal estimation and an exact kd-tree.
//! - [`chamfer`]: region-restricted symmetric Chamfer loss with its gradient.
//! - [`deform`]: the deformation family that produces `(x̂, x, I)` pairs.
//! - [`pcm`]: point cloud mixup for classification and segmentation.
//! - [`network`]: a shared-MLP point encoder with supervised and
//!   reconstruction heads, hand-written backward pass.
//! - [`train`]: the alternating two-task optimisation loop.
//! - [`eval`]: accuracy, mean IoU and Gaussian log-perplexity.
//! - [`io`], [`synth`], [`config`], [`run`]: file formats, the synthetic
//!   benchmark, run configuration and the on-disk run orchestration used by
//!   the command-line tool.

pub mod chamfer;
pub mod cloud;
pub mod config;
pub mod deform;
pub mod eval;
pub mod error;
pub mod io;
mod linalg;
pub mod network;
pub mod optim;
pub mod pcm;
pub mod run;
pub mod seed;
pub mod selftest;
pub mod spatial;
pub mod synth;
pub mod train;

pub use chamfer::{chamfer_distance, chamfer_loss_region, ChamferResult};
pub use cloud::{LabeledCloud, Point3, PointCloud, SegLabeledCloud};
pub use deform::{DeformKind, DeformSpec, DeformedPair};
pub use error::{Error, Result};
pub use network::{Gradients, Mode, ModelParams, NetworkConfig};
pub use pcm::MixedSample;
pub use spatial::NeighborIndex;
pub use eval::GaussianClassModel;
pub use train::{EpochReport, Task, TrainConfig, TrainOutcome};
