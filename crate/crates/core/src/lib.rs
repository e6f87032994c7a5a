// SPDX-License-Identifier: Apache-2.0

//! Two-stage self-supervised pretraining for toy bird's-eye-view encoders.
//!
//! Stage one pools a LiDAR-like point cloud into object-like regions without
//! labels and trains a pillar encoder with a blend of region-level and
//! region-aware point contrast. Stage two freezes that encoder and distills
//! its BEV features into a camera-like encoder with a region-weighted
//! contrastive loss.
//!
//! Every loss is differentiated by a small reverse-mode tape ([`nnet::Tape`])
//! and verified against central finite differences ([`nnet::gradcheck`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checks;
pub mod contrast;
pub mod distill;
pub mod error;
pub mod nnet;
pub mod pipeline;
pub mod pooling;
pub mod scenegen;

pub use error::{Error, Result};
