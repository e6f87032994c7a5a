// SPDX-License-Identifier: Apache-2.0

use super::PoolingConfig;
use crate::scenegen::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSummary {
    pub id: usize,
    pub count: usize,
    pub xy_diagonal: f64,
    pub min_z: f64,
}

pub fn summarize_clusters(points: &[Point3], labels: &[i64]) -> Vec<ClusterSummary> {
    let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut bounds = vec![[f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]; n_clusters];
    let mut min_z = vec![f64::INFINITY; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for (p, &l) in points.iter().zip(labels) {
        if l < 0 {
            continue;
        }
        let c = l as usize;
        counts[c] += 1;
        let b = &mut bounds[c];
        b[0] = b[0].min(p.x);
        b[1] = b[1].min(p.y);
        b[2] = b[2].max(p.x);
        b[3] = b[3].max(p.y);
        min_z[c] = min_z[c].min(p.z);
    }
    (0..n_clusters)
        .filter(|&c| counts[c] > 0)
        .map(|c| {
            let b = bounds[c];
            ClusterSummary {
                id: c,
                count: counts[c],
                xy_diagonal: (b[2] - b[0]).hypot(b[3] - b[1]),
                min_z: min_z[c],
            }
        })
        .collect()
}

/// Keeps clusters that look like objects; returns the original ids of the
/// kept clusters in ascending order (position = new dense region id).
///
/// A cluster is rejected when its XY bounding-box diagonal exceeds
/// `max_cluster_extent_xy`, its lowest point is above `max_cluster_base_z`,
/// it holds more than `max_cluster_points_fraction` of `points`, or it has
/// fewer than `dbscan_min_pts` points. The point-share cap is only applied
/// when there are at least two clusters.
pub fn filter_clusters(points: &[Point3], labels: &[i64], config: &PoolingConfig) -> Vec<usize> {
    let summaries = summarize_clusters(points, labels);
    let total = points.len() as f64;
    let apply_share_cap = summaries.len() >= 2;
    summaries
        .iter()
        .filter(|s| {
            let too_wide = s.xy_diagonal > config.max_cluster_extent_xy;
            let too_high = s.min_z > config.max_cluster_base_z;
            let too_many = apply_share_cap && s.count as f64 > config.max_cluster_points_fraction * total;
            let too_small = s.count < config.dbscan_min_pts;
            !(too_wide || too_high || too_many || too_small)
        })
        .map(|s| s.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, from: Point3, to: Point3) -> Vec<Point3> {
        (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                Point3::new(
                    from.x + t * (to.x - from.x),
                    from.y + t * (to.y - from.y),
                    from.z + t * (to.z - from.z),
                )
            })
            .collect()
    }

    #[test]
    fn wide_cluster_rejected() {
        let pts = line(50, Point3::new(0.0, 0.0, 0.5), Point3::new(12.0, 16.0, 0.5));
        let labels = vec![0; pts.len()];
        assert!(filter_clusters(&pts, &labels, &PoolingConfig::default()).is_empty());
    }

    #[test]
    fn compact_cluster_kept() {
        let pts: Vec<Point3> = (0..30)
            .map(|i| Point3::new((i % 5) as f64 * 0.2, (i / 5) as f64 * 0.2, 0.3 + (i % 3) as f64 * 0.2))
            .collect();
        let labels = vec![0; 30];
        assert_eq!(filter_clusters(&pts, &labels, &PoolingConfig::default()), vec![0]);
    }

    #[test]
    fn floating_cluster_rejected() {
        let pts = line(10, Point3::new(0.0, 0.0, 2.5), Point3::new(1.0, 0.0, 3.0));
        let labels = vec![0; 10];
        assert!(filter_clusters(&pts, &labels, &PoolingConfig::default()).is_empty());
    }

    #[test]
    fn dominant_cluster_rejected_and_ids_redensified() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        // Cluster 0: 10 points, cluster 1: 100 points (> 25 % share), cluster 2: 10 points.
        for (id, n, x0) in [(0, 10, 0.0), (1, 100, 20.0), (2, 10, 40.0)] {
            for i in 0..n {
                pts.push(Point3::new(x0 + (i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.5));
                labels.push(id);
            }
        }
        for i in 0..20 {
            pts.push(Point3::new(60.0 + i as f64 * 3.0, 0.0, 0.5));
            labels.push(-1);
        }
        assert_eq!(filter_clusters(&pts, &labels, &PoolingConfig::default()), vec![0, 2]);
    }
}
