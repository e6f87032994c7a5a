// SPDX-License-Identifier: Apache-2.0

//! Density-based clustering over 3D Euclidean distance.
//!
//! A point is core when at least `min_pts` points (itself included) lie
//! within `eps`, inclusive. Points are scanned in ascending index order and
//! each new cluster is expanded completely before the scan continues, so a
//! border point reachable from two clusters belongs to the one created first.

use std::collections::{HashMap, VecDeque};

use crate::scenegen::Point3;

pub const NOISE: i64 = -1;

/// Uniform grid with cell side `eps` for radius queries.
struct Grid<'a> {
    points: &'a [Point3],
    eps: f64,
    eps2: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Point3], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, eps)).or_default().push(i);
        }
        Self {
            points,
            eps,
            eps2: eps * eps,
            cells,
        }
    }

    fn key(p: &Point3, eps: f64) -> (i64, i64, i64) {
        (
            (p.x / eps).floor() as i64,
            (p.y / eps).floor() as i64,
            (p.z / eps).floor() as i64,
        )
    }

    /// Indices within `eps` of point `i`, ascending, including `i`.
    fn neighbors(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let p = &self.points[i];
        let (kx, ky, kz) = Self::key(p, self.eps);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        out.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&j| p.dist2(&self.points[j]) <= self.eps2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Returns one label per point: [`NOISE`] or a dense cluster id from 0.
pub fn dbscan(points: &[Point3], eps: f64, min_pts: usize) -> Vec<i64> {
    assert!(eps > 0.0, "dbscan eps must be positive");
    assert!(min_pts >= 1, "dbscan min_pts must be at least 1");
    const UNVISITED: i64 = -2;

    let n = points.len();
    let grid = Grid::new(points, eps);
    let mut labels = vec![UNVISITED; n];
    let mut scratch = Vec::new();
    let mut queue = VecDeque::new();
    let mut next_id = 0i64;

    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        grid.neighbors(i, &mut scratch);
        if scratch.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        let id = next_id;
        next_id += 1;
        labels[i] = id;
        queue.extend(scratch.iter().copied());
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                NOISE => labels[q] = id,
                UNVISITED => {
                    labels[q] = id;
                    grid.neighbors(q, &mut scratch);
                    if scratch.len() >= min_pts {
                        queue.extend(scratch.iter().copied());
                    }
                }
                _ => {}
            }
        }
    }
    labels
}
