//! Human-topology-aware 2D-to-3D pose lifting.
//!
//! The crate is organised bottom-up:
//!
//! - [`skeleton`]: joint graph, part degree-of-freedom (PDoF) labels, limb groups and
//!   the normalized adjacency used by the joint-level graph convolution.
//! - [`numerics`]: a small dense tensor type and a reverse-mode tape ([`numerics::Graph`]).
//! - [`model`]: the hierarchical mixer network (joint-, part- and body-level blocks),
//!   parameter initialisation and the checkpoint format.
//! - [`train`]: L2 loss and the Adam training loop.
//! - [`metrics`]: MPJPE, Procrustes-aligned MPJPE, PCK, AUC and per-PDoF breakdowns.
//! - [`data`]: the PoseSet file format, 2D normalization and a synthetic
//!   forward-kinematics generator.
//! - [`gradcheck`]: finite-difference checks of every differentiable op and of the
//!   full model.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod skeleton;
pub mod train;

pub use data::{PoseSample, PoseSet};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{BlockSet, ModelConfig, ModelParams, Structure};
pub use numerics::{Graph, Tensor, Var};
pub use skeleton::{AdjacencyMatrix, Skeleton};
pub use train::{TrainConfig, TrainOutcome};
