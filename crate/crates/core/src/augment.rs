// SPDX-License-Identifier: Apache-2.0

//! Spatial view augmentation for tagged clouds.
//!
//! A view is produced by flipping (negating x and/or y), rotating about the
//! z axis, then scaling all three coordinates by one factor. Tags, region
//! membership and point order are untouched, so index `i` in two augmented
//! views of the same cloud is the same physical point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pooling::TaggedPointCloud;
use crate::scenegen::Point3;
use crate::{Error, Result};

pub const ROTATION_RANGE_DEG: (f64, f64) = (-90.0, 90.0);
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Negate x.
    pub flip_x: bool,
    /// Negate y.
    pub flip_y: bool,
}

impl AugmentationSpec {
    pub const IDENTITY: AugmentationSpec = AugmentationSpec {
        rotation_deg: 0.0,
        scale: 1.0,
        flip_x: false,
        flip_y: false,
    };

    pub fn validate(&self) -> Result<()> {
        let (rlo, rhi) = ROTATION_RANGE_DEG;
        if !(rlo..=rhi).contains(&self.rotation_deg) {
            return Err(Error::config("rotation_deg", format!("{} outside [{rlo}, {rhi}]", self.rotation_deg)));
        }
        let (slo, shi) = SCALE_RANGE;
        if !(slo..=shi).contains(&self.scale) {
            return Err(Error::config("scale", format!("{} outside [{slo}, {shi}]", self.scale)));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        let x = if self.flip_x { -p.x } else { p.x };
        let y = if self.flip_y { -p.y } else { p.y };
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let rx = c * x - s * y;
        let ry = s * x + c * y;
        Point3::new(rx * self.scale, ry * self.scale, p.z * self.scale)
    }

    /// The map undoing `self`, expressed in the same flip, rotate, scale
    /// order. The result is generally outside the sampling ranges.
    pub fn inverse(&self) -> AugmentationSpec {
        // A single reflection conjugates a rotation into its inverse.
        let one_flip = self.flip_x != self.flip_y;
        AugmentationSpec {
            rotation_deg: if one_flip { self.rotation_deg } else { -self.rotation_deg },
            scale: 1.0 / self.scale,
            flip_x: self.flip_x,
            flip_y: self.flip_y,
        }
    }
}

pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R) -> AugmentationSpec {
    let (rlo, rhi) = ROTATION_RANGE_DEG;
    let (slo, shi) = SCALE_RANGE;
    AugmentationSpec {
        rotation_deg: rng.random_range(rlo..=rhi),
        scale: rng.random_range(slo..=shi),
        flip_x: rng.random_bool(0.5),
        flip_y: rng.random_bool(0.5),
    }
}

pub fn apply_augmentation(tpc: &TaggedPointCloud, spec: &AugmentationSpec) -> TaggedPointCloud {
    TaggedPointCloud {
        points: tpc.points.iter().map(|p| spec.apply_point(p)).collect(),
        tags: tpc.tags.clone(),
        region_index: tpc.region_index.clone(),
    }
}
