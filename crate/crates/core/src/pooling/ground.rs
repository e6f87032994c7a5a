// SPDX-License-Identifier: Apache-2.0

//! Single-plane random-sample consensus ground removal.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PoolingConfig;
use crate::scenegen::Point3;

/// Unit-normal plane `normal · p + offset = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    fn through(a: &Point3, b: &Point3, c: &Point3) -> Option<Plane> {
        let u = [b.x - a.x, b.y - a.y, b.z - a.z];
        let v = [c.x - a.x, c.y - a.y, c.z - a.z];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if !(len > 1e-12) {
            return None;
        }
        let normal = [n[0] / len, n[1] / len, n[2] / len];
        let offset = -(normal[0] * a.x + normal[1] * a.y + normal[2] * a.z);
        Some(Plane { normal, offset })
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        (self.normal[0] * p.x + self.normal[1] * p.y + self.normal[2] * p.z + self.offset).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundFit {
    /// `true` for inliers of the winning plane.
    pub mask: Vec<bool>,
    /// `None` when no plane could be fit (fewer than three points or all
    /// sampled triples degenerate).
    pub plane: Option<Plane>,
}

/// Lexicographic order of points, used so results do not depend on input order.
pub(crate) fn canonical_order(points: &[Point3]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.x.total_cmp(&q.x)
            .then(p.y.total_cmp(&q.y))
            .then(p.z.total_cmp(&q.z))
            .then(Ordering::Equal)
    });
    order
}

/// Fits the dominant plane and marks its inliers as ground.
///
/// Triples are drawn from the points in lexicographic coordinate order, so
/// the mask is a function of the point set and the seed only. The plane with
/// the most inliers within `ground_inlier_threshold` wins; ties keep the
/// earlier plane.
pub fn remove_ground(points: &[Point3], config: &PoolingConfig, seed: u64) -> GroundFit {
    let n = points.len();
    if n < 3 {
        log::warn!("ground removal needs at least 3 points, got {n}; no plane fit");
        return GroundFit {
            mask: vec![false; n],
            plane: None,
        };
    }
    let order = canonical_order(points);
    let sorted: Vec<&Point3> = order.iter().map(|&i| &points[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threshold = config.ground_inlier_threshold;

    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..config.ground_ransac_iters {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let c = rng.random_range(0..n);
        if a == b || b == c || a == c {
            continue;
        }
        let Some(plane) = Plane::through(sorted[a], sorted[b], sorted[c]) else {
            continue;
        };
        let inliers = points.iter().filter(|p| plane.distance(p) <= threshold).count();
        if best.is_none_or(|(count, _)| inliers > count) {
            best = Some((inliers, plane));
        }
    }

    match best {
        Some((_, plane)) => GroundFit {
            mask: points.iter().map(|p| plane.distance(p) <= threshold).collect(),
            plane: Some(plane),
        },
        None => {
            log::warn!("ground removal found no non-degenerate plane among {n} points");
            GroundFit {
                mask: vec![false; n],
                plane: None,
            }
        }
    }
}
