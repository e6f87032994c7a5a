// SPDX-License-Identifier: Apache-2.0

//! Minimal differentiable layer: tensors, a reverse-mode tape, the toy LiDAR
//! and camera BEV encoders, MLP projectors, checkpoints and a
//! finite-difference gradient checker.

mod camera;
pub mod checkpoint;
pub mod gradcheck;
mod grid;
mod lidar;
pub mod optim;
mod params;
mod projector;
mod tape;
mod tensor;

pub use camera::{occupancy_raster, CameraEncoder};
pub use checkpoint::Checkpoint;
pub use grid::{FeatureMap, GridSpec, MapVar};
pub use lidar::{LidarEncoder, LidarOutput};
pub use optim::{clip_gradients, global_norm, Groups, Optimizer, OptimizerKind};
pub use params::{he_normal, Bound, ParamSet};
pub use projector::{Mode, Projector, RunningStats, BN_EPS, BN_MOMENTUM};
pub use tape::{BatchStats, BilinearTap, Gradients, InfoNceAnchor, Tape, Var};
pub use tensor::{dot, Tensor};
