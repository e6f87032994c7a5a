// SPDX-License-Identifier: Apache-2.0

//! Pillar-style LiDAR BEV encoder.
//!
//! Each in-extent point is encoded from `(x - x_c, y - y_c, z)`, its offset
//! to the centre of its pillar plus height, by a two-layer ReLU MLP. Point
//! features are max-pooled per pillar (empty pillars are zero), scattered
//! onto the grid, and mixed by one 3x3 convolution.

use rand::Rng;

use super::grid::{GridSpec, MapVar};
use super::params::{he_normal, Bound, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::scenegen::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarEncoder {
    /// `channels` is the output width C.
    pub grid: GridSpec,
    pub hidden: usize,
}

pub struct LidarOutput {
    pub map: MapVar,
    /// Pillar-pooled map before the convolution.
    pub scattered: Var,
    pub n_in_extent: usize,
}

impl LidarEncoder {
    pub fn new(grid: GridSpec, hidden: usize) -> Self {
        Self { grid, hidden }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let (h, c) = (self.hidden, self.grid.channels);
        let mut p = ParamSet::new();
        p.insert("w1", he_normal(rng, 3, h, 3, 2.0));
        p.insert("b1", Tensor::zeros(1, h));
        p.insert("w2", he_normal(rng, h, c, h, 2.0));
        p.insert("b2", Tensor::zeros(1, c));
        p.insert("conv_k", he_normal(rng, 9 * c, c, 9 * c, 1.0));
        p
    }

    /// Per-point encoder input and pillar index, in-extent points only.
    pub fn point_inputs(&self, points: &[Point3]) -> (Tensor, Vec<usize>) {
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for p in points {
            if let Some((r, c)) = self.grid.cell_of(p.x, p.y) {
                let (xc, yc) = self.grid.cell_center(r, c);
                rows.push(vec![p.x - xc, p.y - yc, p.z]);
                cells.push(r * self.grid.width + c);
            }
        }
        let t = if rows.is_empty() {
            Tensor::zeros(0, 3)
        } else {
            Tensor::from_rows(&rows)
        };
        (t, cells)
    }

    /// Points outside `[-e, e)^2` are dropped. With no point left the map is
    /// an all-zero constant.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, points: &[Point3]) -> LidarOutput {
        let g = self.grid;
        let (inputs, cells) = self.point_inputs(points);
        if cells.is_empty() {
            log::warn!("lidar encoder: no points inside the grid extent");
            let zeros = tape.constant(Tensor::zeros(g.n_cells(), g.channels));
            return LidarOutput {
                map: MapVar { grid: g, var: zeros },
                scattered: zeros,
                n_in_extent: 0,
            };
        }
        let x = tape.constant(inputs);
        let h = tape.linear(x, params.var("w1"), params.var("b1"));
        let h = tape.relu(h);
        let f = tape.linear(h, params.var("w2"), params.var("b2"));
        let f = tape.relu(f);
        let group_of: Vec<Option<usize>> = cells.iter().map(|&c| Some(c)).collect();
        let scattered = tape.scatter_max(f, &group_of, g.n_cells());
        // Bias-free; downstream batch norm cancels per-channel offsets.
        let no_bias = tape.constant(Tensor::zeros(1, g.channels));
        let map = tape.conv3x3(scattered, params.var("conv_k"), no_bias, g.height, g.width);
        LidarOutput {
            map: MapVar { grid: g, var: map },
            scattered,
            n_in_extent: cells.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> LidarEncoder {
        LidarEncoder::new(GridSpec::square(4.0, 4, 3), 5)
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let enc = encoder();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let pts = [Point3::new(0.3, -1.2, 0.5), Point3::new(1.1, 2.0, 1.0)];
        let out = enc.forward(&mut tape, &b, &pts);
        assert!(tape.value(out.map.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn moving_within_a_pillar_keeps_the_occupied_cell() {
        let enc = encoder();
        let (_, a) = enc.point_inputs(&[Point3::new(0.2, 0.3, 1.0)]);
        let (_, b) = enc.point_inputs(&[Point3::new(1.7, 1.9, 1.0)]);
        assert_eq!(a, b);
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = enc.forward(&mut tape, &bound, &[Point3::new(0.2, 0.3, 1.0), Point3::new(-3.5, -3.5, 0.5)]);
        let v = tape.value(out.scattered);
        let touched: Vec<usize> = (0..v.rows()).filter(|&r| v.row(r).iter().any(|&x| x != 0.0)).collect();
        assert!(touched.iter().all(|r| *r == a[0] || *r == 0), "{touched:?}");
    }

    #[test]
    fn out_of_extent_points_are_dropped() {
        let enc = encoder();
        let (inputs, cells) = enc.point_inputs(&[
            Point3::new(4.0, 0.0, 0.0),
            Point3::new(-4.0, 0.0, 0.0),
            Point3::new(0.0, -4.01, 0.0),
        ]);
        assert_eq!(inputs.rows(), 1);
        assert_eq!(cells, vec![2 * 4]);
    }

    #[test]
    fn no_points_all_zero_map() {
        let enc = encoder();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = enc.forward(&mut tape, &b, &[Point3::new(100.0, 0.0, 0.0)]);
        assert_eq!(out.n_in_extent, 0);
        assert!(tape.value(out.map.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn order_within_pillar_is_irrelevant() {
        let enc = encoder();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(3));
        let pts = vec![
            Point3::new(0.2, 0.3, 1.0),
            Point3::new(0.8, 0.1, 0.4),
            Point3::new(0.5, 1.5, 1.6),
            Point3::new(-3.0, -3.0, 0.2),
        ];
        let run = |pts: &[Point3]| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let out = enc.forward(&mut tape, &b, pts);
            tape.value(out.map.var).clone()
        };
        let mut swapped = pts.clone();
        swapped.swap(0, 2);
        assert_eq!(run(&pts), run(&swapped));
    }
}
