// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::tape::{BilinearTap, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Square BEV grid centred on the ego vehicle.
///
/// Cell `(row, col)` covers `x in [-e + col*s, -e + (col+1)*s)` and
/// `y in [-e + row*s, -e + (row+1)*s)` with `s = 2e / H`. Feature maps store
/// cell `(row, col)` at tensor row `row * W + col`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extent_xy: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridSpec {
    pub fn square(extent_xy: f64, size: usize, channels: usize) -> Self {
        Self {
            extent_xy,
            height: size,
            width: size,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent_xy > 0.0 && self.extent_xy.is_finite()) {
            return Err(Error::config("extent_xy", "grid extent must be positive"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("grid_size", "grid needs at least 2x2 cells"));
        }
        if self.height != self.width {
            return Err(Error::config("grid_size", "grid must be square"));
        }
        if self.channels < 1 {
            return Err(Error::config("channels", "need at least one channel"));
        }
        Ok(())
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent_xy / self.height as f64
    }

    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    /// Pillar containing `(x, y)`, or `None` outside `[-e, e)^2`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let s = self.cell_size();
        let col = ((x + self.extent_xy) / s).floor();
        let row = ((y + self.extent_xy) / s).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.cell_size();
        (
            -self.extent_xy + (col as f64 + 0.5) * s,
            -self.extent_xy + (row as f64 + 0.5) * s,
        )
    }

    /// Bilinear stencil over the four surrounding cell centres. Queries
    /// beyond the outermost centres are clamped onto them; the flag reports it.
    pub fn bilinear_tap(&self, x: f64, y: f64) -> (BilinearTap, bool) {
        let s = self.cell_size();
        let u = (x + self.extent_xy) / s - 0.5;
        let v = (y + self.extent_xy) / s - 0.5;
        let umax = (self.width - 1) as f64;
        let vmax = (self.height - 1) as f64;
        let clamped = !(0.0..=umax).contains(&u) || !(0.0..=vmax).contains(&v);
        let u = u.clamp(0.0, umax);
        let v = v.clamp(0.0, vmax);
        let c0 = (u.floor() as usize).min(self.width - 2);
        let r0 = (v.floor() as usize).min(self.height - 2);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let w = self.width;
        let tap = BilinearTap {
            cells: [r0 * w + c0, r0 * w + c0 + 1, (r0 + 1) * w + c0, (r0 + 1) * w + c0 + 1],
            weights: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        };
        (tap, clamped)
    }
}

/// `H x W x C` values stored as an `(H*W) x C` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub grid: GridSpec,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(grid: GridSpec, values: Tensor) -> Self {
        assert_eq!(values.shape(), (grid.n_cells(), grid.channels), "feature map shape");
        Self { grid, values }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        self.values.row(row * self.grid.width + col)
    }

    pub fn all_finite(&self) -> bool {
        self.values.all_finite()
    }
}

/// A feature map living on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapVar {
    pub grid: GridSpec,
    pub var: Var,
}
