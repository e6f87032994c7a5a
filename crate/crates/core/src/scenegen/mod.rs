// SPDX-License-Identifier: Apache-2.0

//! Synthetic driving-like scenes with known object membership.
//!
//! A scene is a noisy ground plane, a handful of compact box-shaped objects
//! floating a small clearance above it, sparse elevated clutter, and
//! optionally one long wall that pooling is expected to reject.

mod io;

pub use io::{load_labeled_scene, load_labels, load_point_cloud, save_labels, save_point_cloud, CsvOptions, PointCloudFile};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ground-truth label for ground, clutter and the oversized structure.
pub const BACKGROUND: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dist2(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Half-width of the square scene in meters.
    pub extent_xy: f64,
    pub n_objects: usize,
    /// Inclusive range of points per object.
    pub object_points_range: (usize, usize),
    /// Range of object box side lengths in meters.
    pub object_size_range: (f64, f64),
    /// Ground points per square meter.
    pub ground_point_density: f64,
    pub ground_noise_sigma: f64,
    pub clutter_points: usize,
    /// Add one long wall that is far too large to be an object.
    pub large_structure: bool,
    /// Height of the lowest object point above the ground plane.
    pub object_clearance: f64,
    /// Object centres lie within this fraction of `extent_xy` from the
    /// origin, so rotated and scaled copies stay inside the square.
    pub placement_radius_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent_xy: 16.0,
            n_objects: 5,
            object_points_range: (20, 40),
            object_size_range: (0.8, 1.6),
            ground_point_density: 0.4,
            ground_noise_sigma: 0.03,
            clutter_points: 60,
            large_structure: false,
            object_clearance: 0.3,
            placement_radius_fraction: 0.8,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent_xy.is_finite() && self.extent_xy > 0.0) {
            return Err(Error::config("extent_xy", "must be positive"));
        }
        let (pmin, pmax) = self.object_points_range;
        if pmin == 0 || pmin > pmax {
            return Err(Error::config(
                "object_points_range",
                format!("need 0 < min <= max, got [{pmin}, {pmax}]"),
            ));
        }
        let (smin, smax) = self.object_size_range;
        if !(smin > 0.0 && smin <= smax && smax.is_finite()) {
            return Err(Error::config(
                "object_size_range",
                format!("need 0 < min <= max, got [{smin}, {smax}]"),
            ));
        }
        if !(self.ground_point_density.is_finite() && self.ground_point_density >= 0.0) {
            return Err(Error::config("ground_point_density", "must be non-negative"));
        }
        if !(self.ground_noise_sigma.is_finite() && self.ground_noise_sigma >= 0.0) {
            return Err(Error::config("ground_noise_sigma", "must be non-negative"));
        }
        if !(self.object_clearance.is_finite() && self.object_clearance >= 0.0) {
            return Err(Error::config("object_clearance", "must be non-negative"));
        }
        if !(self.placement_radius_fraction > 0.0 && self.placement_radius_fraction <= 1.0) {
            return Err(Error::config("placement_radius_fraction", "must lie in (0, 1]"));
        }
        if self.n_objects > 0 && self.extent_xy <= smax {
            return Err(Error::config(
                "extent_xy",
                "scene too small to hold an object of the maximum size",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScene {
    pub points: Vec<Point3>,
    /// `-1` for ground, clutter and large structure; object id otherwise.
    pub true_membership: Vec<i64>,
    pub object_centers: Vec<Point3>,
}

impl LabeledScene {
    pub fn n_objects(&self) -> usize {
        self.object_centers.len()
    }

    /// XY bounding box `(min_x, min_y, max_x, max_y)` of each object's points.
    pub fn object_footprints(&self) -> Vec<[f64; 4]> {
        let mut boxes = vec![
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            self.n_objects()
        ];
        for (p, &label) in self.points.iter().zip(&self.true_membership) {
            if label >= 0 {
                let b = &mut boxes[label as usize];
                b[0] = b[0].min(p.x);
                b[1] = b[1].min(p.y);
                b[2] = b[2].max(p.x);
                b[3] = b[3].max(p.y);
            }
        }
        boxes
    }
}

struct Wall {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Wall {
    /// Distance in XY from a point to the wall rectangle.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x_lo - x).max(0.0).max(x - self.x_hi);
        let dy = (self.y_lo - y).max(0.0).max(y - self.y_hi);
        (dx * dx + dy * dy).sqrt()
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Wall points sit on a jittered lattice so the face stays one connected
/// cluster at the default pooling radius without outnumbering the ground.
const WALL_SPACING: f64 = 0.35;
const WALL_JITTER: f64 = 0.05;

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabeledScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = spec.extent_xy;
    let (smin, smax) = spec.object_size_range;
    let (pmin, pmax) = spec.object_points_range;

    let mut points = Vec::new();
    let mut labels = Vec::new();

    let area = (2.0 * e) * (2.0 * e);
    let n_ground = (spec.ground_point_density * area).round() as usize;
    let ground_noise = Normal::new(0.0, spec.ground_noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|err| Error::config("ground_noise_sigma", err.to_string()))?;
    for _ in 0..n_ground {
        let x = rng.random_range(-e..e);
        let y = rng.random_range(-e..e);
        let z = if spec.ground_noise_sigma > 0.0 {
            // Gaussian tails are clipped to the stated noise band.
            ground_noise
                .sample(&mut rng)
                .clamp(-spec.ground_noise_sigma, spec.ground_noise_sigma)
        } else {
            0.0
        };
        points.push(Point3::new(x, y, z));
        labels.push(BACKGROUND);
    }

    let wall = spec.large_structure.then(|| {
        let length = rng.random_range(14.0f64..18.0).min(2.0 * e - 1.0);
        let x_hi = e - 0.5;
        Wall {
            x_lo: x_hi - 0.3,
            x_hi,
            y_lo: -length / 2.0,
            y_hi: length / 2.0,
        }
    });

    let spacing = 2.0 * smax;
    let margin = smax;
    let mut centers: Vec<(f64, f64, f64)> = Vec::with_capacity(spec.n_objects);
    let mut attempts = 0;
    while centers.len() < spec.n_objects {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::config(
                "n_objects",
                format!(
                    "could not place {} objects {spacing:.2} m apart in a {:.1} m scene",
                    spec.n_objects,
                    2.0 * e
                ),
            ));
        }
        let cx = rng.random_range(-(e - margin)..(e - margin));
        let cy = rng.random_range(-(e - margin)..(e - margin));
        if cx.hypot(cy) > spec.placement_radius_fraction * e {
            continue;
        }
        let clear_of_objects = centers
            .iter()
            .all(|&(ox, oy, _)| ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() > spacing);
        let clear_of_wall = wall.as_ref().is_none_or(|w| w.distance(cx, cy) > spacing);
        if clear_of_objects && clear_of_wall {
            let side = if smax > smin { rng.random_range(smin..=smax) } else { smin };
            centers.push((cx, cy, side));
        }
    }

    let mut object_centers = Vec::with_capacity(centers.len());
    for (id, &(cx, cy, side)) in centers.iter().enumerate() {
        let n = rng.random_range(pmin..=pmax);
        let half = side / 2.0;
        for _ in 0..n {
            let x = cx + rng.random_range(-half..half);
            let y = cy + rng.random_range(-half..half);
            let z = spec.object_clearance + rng.random_range(0.0..side);
            points.push(Point3::new(x, y, z));
            labels.push(id as i64);
        }
        object_centers.push(Point3::new(cx, cy, spec.object_clearance + half));
    }

    for _ in 0..spec.clutter_points {
        let x = rng.random_range(-e..e);
        let y = rng.random_range(-e..e);
        let z = rng.random_range(spec.object_clearance..spec.object_clearance + 2.2);
        points.push(Point3::new(x, y, z));
        labels.push(BACKGROUND);
    }

    if let Some(w) = &wall {
        let height = rng.random_range(1.5..2.5);
        let rows = (height / WALL_SPACING).floor() as usize + 1;
        let cols = ((w.y_hi - w.y_lo) / WALL_SPACING).floor() as usize + 1;
        for r in 0..rows {
            for c in 0..cols {
                let x = rng.random_range(w.x_lo..w.x_hi);
                let y = w.y_lo + c as f64 * WALL_SPACING + rng.random_range(-WALL_JITTER..WALL_JITTER);
                let z = spec.object_clearance + r as f64 * WALL_SPACING + rng.random_range(0.0..WALL_JITTER);
                points.push(Point3::new(x, y, z));
                labels.push(BACKGROUND);
            }
        }
    }

    Ok(LabeledScene {
        points,
        true_membership: labels,
        object_centers,
    })
}

/// Per-scene seeds derived from a master seed; distinct for distinct indices.
pub fn scene_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut seeds = Vec::with_capacity(n);
    while seeds.len() < n {
        let s: u64 = rng.random();
        if seen.insert(s) {
            seeds.push(s);
        }
    }
    seeds
}
