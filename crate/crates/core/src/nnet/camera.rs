// SPDX-License-Identifier: Apache-2.0

//! Camera-like encoder over a degraded BEV occupancy raster.

use rand::Rng;

use super::grid::{GridSpec, MapVar};
use super::params::{he_normal, Bound, ParamSet};
use super::tape::Tape;
use super::tensor::Tensor;
use crate::scenegen::Point3;
use crate::{Error, Result};

/// Two 3x3 convolution + ReLU stages, 1 input channel to `grid.channels`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraEncoder {
    pub grid: GridSpec,
}

impl CameraEncoder {
    pub fn new(grid: GridSpec) -> Self {
        Self { grid }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let c = self.grid.channels;
        let mut p = ParamSet::new();
        p.insert("k1", he_normal(rng, 9, c, 9, 2.0));
        p.insert("b1", Tensor::zeros(1, c));
        p.insert("k2", he_normal(rng, 9 * c, c, 9 * c, 2.0));
        p.insert("b2", Tensor::zeros(1, c));
        p
    }

    /// `raster` is `(H*W) x 1`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, raster: &Tensor) -> Result<MapVar> {
        let g = self.grid;
        if raster.shape() != (g.n_cells(), 1) {
            return Err(Error::Contract(format!(
                "camera raster is {:?}, grid needs ({}, 1)",
                raster.shape(),
                g.n_cells()
            )));
        }
        let x = tape.constant(raster.clone());
        let h = tape.conv3x3(x, params.var("k1"), params.var("b1"), g.height, g.width);
        let h = tape.relu(h);
        let h = tape.conv3x3(h, params.var("k2"), params.var("b2"), g.height, g.width);
        let h = tape.relu(h);
        Ok(MapVar { grid: g, var: h })
    }
}

/// Occupancy raster with sensor-like corruption: each occupied cell is
/// cleared with probability `dropout`, then every cell is flipped with
/// probability `flip_noise`.
pub fn occupancy_raster<R: Rng + ?Sized>(
    points: &[Point3],
    grid: &GridSpec,
    flip_noise: f64,
    dropout: f64,
    rng: &mut R,
) -> Tensor {
    let mut occ = vec![false; grid.n_cells()];
    for p in points {
        if let Some((r, c)) = grid.cell_of(p.x, p.y) {
            occ[r * grid.width + c] = true;
        }
    }
    for cell in &mut occ {
        if *cell && rng.random_bool(dropout) {
            *cell = false;
        }
        if rng.random_bool(flip_noise) {
            *cell = !*cell;
        }
    }
    Tensor::new(grid.n_cells(), 1, occ.into_iter().map(|o| if o { 1.0 } else { 0.0 }).collect())
}
