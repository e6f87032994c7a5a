// SPDX-License-Identifier: Apache-2.0

//! Unsupervised semantic pooling: ground removal, clustering, heuristic
//! filtering, and tagging of every point as region member (`>= 0`) or
//! semantic-less (`-1`).

mod dbscan;
mod filter;
mod ground;

pub use dbscan::{dbscan, NOISE};
pub use filter::{filter_clusters, summarize_clusters, ClusterSummary};
pub use ground::{remove_ground, GroundFit, Plane};

use serde::{Deserialize, Serialize};

use crate::scenegen::Point3;
use crate::{Error, Result};

/// Tag of a point that belongs to no region.
pub const SEMANTIC_LESS: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub ground_inlier_threshold: f64,
    pub ground_ransac_iters: usize,
    pub max_cluster_extent_xy: f64,
    pub max_cluster_base_z: f64,
    pub max_cluster_points_fraction: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            dbscan_eps: 0.75,
            dbscan_min_pts: 5,
            ground_inlier_threshold: 0.15,
            ground_ransac_iters: 200,
            max_cluster_extent_xy: 12.0,
            max_cluster_base_z: 2.0,
            max_cluster_points_fraction: 0.25,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dbscan_eps > 0.0 && self.dbscan_eps.is_finite()) {
            return Err(Error::config("dbscan_eps", "must be positive"));
        }
        if self.dbscan_min_pts < 1 {
            return Err(Error::config("dbscan_min_pts", "must be at least 1"));
        }
        if !(self.ground_inlier_threshold > 0.0) {
            return Err(Error::config("ground_inlier_threshold", "must be positive"));
        }
        if self.ground_ransac_iters < 1 {
            return Err(Error::config("ground_ransac_iters", "must be at least 1"));
        }
        if !(self.max_cluster_extent_xy > 0.0) {
            return Err(Error::config("max_cluster_extent_xy", "must be positive"));
        }
        if !(self.max_cluster_base_z > 0.0) {
            return Err(Error::config("max_cluster_base_z", "must be positive"));
        }
        if !(self.max_cluster_points_fraction > 0.0 && self.max_cluster_points_fraction <= 1.0) {
            return Err(Error::config("max_cluster_points_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// A point cloud where each point carries a region tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedPointCloud {
    pub points: Vec<Point3>,
    pub tags: Vec<i64>,
    /// Point indices of each region, ascending.
    pub region_index: Vec<Vec<usize>>,
}

impl TaggedPointCloud {
    /// Builds the region index from tags. Tags must be `-1` or dense `0..N_R`.
    pub fn from_tags(points: Vec<Point3>, tags: Vec<i64>) -> Result<Self> {
        if points.len() != tags.len() {
            return Err(Error::Contract(format!(
                "{} tags for {} points",
                tags.len(),
                points.len()
            )));
        }
        let n_regions = tags.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        let mut region_index = vec![Vec::new(); n_regions];
        for (i, &t) in tags.iter().enumerate() {
            match t {
                SEMANTIC_LESS => {}
                t if t >= 0 => region_index[t as usize].push(i),
                t => return Err(Error::Contract(format!("invalid tag {t} at point {i}"))),
            }
        }
        if let Some(r) = region_index.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("region ids not dense: region {r} is empty")));
        }
        Ok(Self {
            points,
            tags,
            region_index,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.region_index.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn semantic_less(&self) -> Vec<usize> {
        (0..self.tags.len()).filter(|&i| self.tags[i] == SEMANTIC_LESS).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub n_regions: usize,
    pub points_per_region: Vec<usize>,
    pub n_ground: usize,
}

impl RegionStats {
    pub fn ground_fraction(&self, n_points: usize) -> f64 {
        if n_points == 0 {
            0.0
        } else {
            self.n_ground as f64 / n_points as f64
        }
    }
}

/// Ground removal, clustering of the remainder, filtering, and tagging.
///
/// Clustering runs on the non-ground points in lexicographic coordinate
/// order, so the resulting partition does not depend on the order of the
/// input. Zero surviving regions is a valid outcome.
pub fn pool_semantics(
    points: &[Point3],
    config: &PoolingConfig,
    seed: u64,
) -> Result<(TaggedPointCloud, RegionStats)> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::Contract("cannot pool an empty point cloud".into()));
    }
    let ground = remove_ground(points, config, seed);
    let order = ground::canonical_order(points);
    let remainder: Vec<usize> = order.into_iter().filter(|&i| !ground.mask[i]).collect();
    let rest: Vec<Point3> = remainder.iter().map(|&i| points[i]).collect();
    let labels = dbscan(&rest, config.dbscan_eps, config.dbscan_min_pts);
    let kept = filter_clusters(&rest, &labels, config);

    let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut remap = vec![SEMANTIC_LESS; n_clusters];
    for (new_id, &old) in kept.iter().enumerate() {
        remap[old] = new_id as i64;
    }
    let mut tags = vec![SEMANTIC_LESS; points.len()];
    for (k, &i) in remainder.iter().enumerate() {
        if labels[k] >= 0 {
            tags[i] = remap[labels[k] as usize];
        }
    }
    let tpc = TaggedPointCloud::from_tags(points.to_vec(), tags)?;
    let stats = RegionStats {
        n_regions: tpc.n_regions(),
        points_per_region: tpc.region_index.iter().map(Vec::len).collect(),
        n_ground: ground.mask.iter().filter(|&&g| g).count(),
    };
    Ok((tpc, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneSpec};

    #[test]
    fn all_ground_has_no_regions() {
        let spec = SceneSpec {
            n_objects: 0,
            clutter_points: 0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, 1).unwrap();
        let (tpc, stats) = pool_semantics(&scene.points, &PoolingConfig::default(), 0).unwrap();
        assert_eq!(stats.n_regions, 0);
        assert!(tpc.tags.iter().all(|&t| t == SEMANTIC_LESS));
    }

    #[test]
    fn regions_meet_min_points_and_exclude_ground() {
        let cfg = PoolingConfig::default();
        for seed in 0..5 {
            let scene = generate_scene(&SceneSpec::default(), seed).unwrap();
            let (tpc, stats) = pool_semantics(&scene.points, &cfg, seed).unwrap();
            assert!(stats.points_per_region.iter().all(|&c| c >= cfg.dbscan_min_pts));
            assert_eq!(stats.points_per_region.len(), stats.n_regions);
            let ground = remove_ground(&scene.points, &cfg, seed);
            for (&g, &t) in ground.mask.iter().zip(&tpc.tags) {
                assert!(!(g && t >= 0));
            }
        }
    }

    #[test]
    fn deterministic() {
        let scene = generate_scene(&SceneSpec::default(), 8).unwrap();
        let cfg = PoolingConfig::default();
        assert_eq!(
            pool_semantics(&scene.points, &cfg, 2).unwrap(),
            pool_semantics(&scene.points, &cfg, 2).unwrap()
        );
    }

    #[test]
    fn from_tags_rejects_sparse_ids() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0); 2];
        assert!(TaggedPointCloud::from_tags(pts.clone(), vec![0, 2]).is_err());
        assert!(TaggedPointCloud::from_tags(pts, vec![-3, 0]).is_err());
    }

    #[test]
    fn empty_cloud_is_contract_error() {
        assert!(pool_semantics(&[], &PoolingConfig::default(), 0).is_err());
    }
}
