// SPDX-License-Identifier: Apache-2.0

//! Fixtures built from library types, shared by several test targets.

#![allow(dead_code)]

use bevpretrain::augment::{apply_augmentation, sample_augmentation};
use bevpretrain::contrast::{interpolate_rows, prc_loss, rapc_rows, sample_points, Branch, ContrastConfig, EmbeddingBatch, SampledSet};
use bevpretrain::nnet::{GridSpec, LidarEncoder, Mode, ParamSet, Projector, Tape, Tensor};
use bevpretrain::pooling::TaggedPointCloud;
use bevpretrain::scenegen::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::common::{self, Rows};

pub const TAU: f64 = 0.07;

pub fn tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows)
}

pub fn batch(rows: &Rows, name: &str) -> EmbeddingBatch {
    EmbeddingBatch::new(tensor(rows), name).unwrap()
}

pub fn rows_of(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Sample layout only; coordinates are unused by the embedding-level losses.
pub fn sample(region_of: Vec<i64>, n_rich: usize) -> SampledSet {
    let k = region_of.len();
    SampledSet {
        indices: (0..k).collect(),
        region_of,
        n_rich,
        coords_view1: vec![(0.0, 0.0); k],
        coords_view2: vec![(0.0, 0.0); k],
        rich_with_replacement: false,
        less_with_replacement: false,
    }
}

pub fn constant_rows(k: usize, d: usize) -> Rows {
    let v = common::normalize(&(0..d).map(|c| 1.0 + c as f64).collect::<Vec<_>>());
    vec![v; k]
}

/// Gaussian blobs, uniform scatter and a few exact duplicates.
pub fn mixed_cloud(rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let n_total = rng.random_range(1..=500);
    let n_blobs = rng.random_range(0..=5);
    let centres: Vec<[f64; 3]> = (0..n_blobs)
        .map(|_| [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(0.0..3.0)])
        .collect();
    let spread = Normal::new(0.0, rng.random_range(0.1..0.6)).unwrap();
    let mut pts = Vec::with_capacity(n_total);
    while pts.len() < n_total {
        let roll: f64 = rng.random();
        if !centres.is_empty() && roll < 0.7 {
            let c = centres[rng.random_range(0..centres.len())];
            pts.push(Point3::new(c[0] + spread.sample(rng), c[1] + spread.sample(rng), c[2] + spread.sample(rng)));
        } else if !pts.is_empty() && roll < 0.75 {
            let p = pts[rng.random_range(0..pts.len())];
            pts.push(p);
        } else {
            pts.push(Point3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..4.0)));
        }
    }
    pts
}

/// A three-region toy cloud inside a 2 m grid, its two augmented views and
/// small encoder/projectors, shared by the blend tests.
pub struct BlendSetup {
    pub enc: LidarEncoder,
    pub plrc: Projector,
    pub rapc: Projector,
    pub params: [ParamSet; 3],
    pub views: [Vec<Point3>; 2],
    pub sample: SampledSet,
}

pub fn blend_setup(seed: u64) -> BlendSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pts, mut tags) = (Vec::new(), Vec::new());
    for (r, (cx, cy)) in [(-0.9, -0.7), (0.8, -0.4), (0.0, 0.9)].into_iter().enumerate() {
        for _ in 0..8 {
            pts.push(Point3::new(cx + rng.random_range(-0.3..0.3), cy + rng.random_range(-0.3..0.3), rng.random_range(0.3..1.5)));
            tags.push(r as i64);
        }
    }
    for _ in 0..12 {
        pts.push(Point3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.0..0.1)));
        tags.push(-1);
    }
    let cloud = TaggedPointCloud::from_tags(pts, tags).unwrap();
    let v1 = apply_augmentation(&cloud, &sample_augmentation(&mut rng)).points;
    let v2 = apply_augmentation(&cloud, &sample_augmentation(&mut rng)).points;
    let sample = sample_points(&cloud, [&v1, &v2], 8, 6, &mut rng).unwrap();
    let enc = LidarEncoder::new(GridSpec::square(2.0, 4, 4), 6);
    let (plrc, rapc) = (Projector::new(4, 32, 5), Projector::new(4, 32, 5));
    let params = [enc.init(&mut rng), plrc.init(&mut rng), rapc.init(&mut rng)];
    BlendSetup {
        enc,
        plrc,
        rapc,
        params,
        views: [v1, v2],
        sample,
    }
}

pub struct BlendValues {
    pub loss: f64,
    pub plrc: f64,
    pub rapc: f64,
    /// Projected embeddings the two branches consumed, as plain batches.
    pub z: [Tensor; 2],
    pub p: [Tensor; 2],
}

pub fn blend(setup: &BlendSetup, alpha: f64) -> BlendValues {
    let cfg = ContrastConfig {
        alpha,
        n_rich: 8,
        n_less: 6,
        ..ContrastConfig::default()
    };
    let running = setup.plrc.running_stats();
    let mut tape = Tape::new();
    let [lb, pb, rb] = setup.params.each_ref().map(|p| p.bind(&mut tape));
    let m1 = setup.enc.forward(&mut tape, &lb, &setup.views[0]).map;
    let m2 = setup.enc.forward(&mut tape, &lb, &setup.views[1]).map;
    let out = prc_loss(
        &mut tape,
        [&m1, &m2],
        &setup.sample,
        Branch { projector: &setup.plrc, params: &pb, running: &running },
        Branch { projector: &setup.rapc, params: &rb, running: &running },
        &cfg,
    )
    .unwrap();

    // The same embeddings rebuilt through the public building blocks.
    let (f1, _) = interpolate_rows(&mut tape, &m1, &setup.sample.coords_view1);
    let (f2, _) = interpolate_rows(&mut tape, &m2, &setup.sample.coords_view2);
    let mut project = |proj: &Projector, b, x| proj.forward(&mut tape, b, x, Mode::Train, &running, true).unwrap().0;
    let (z1, z2) = (project(&setup.plrc, &pb, f1), project(&setup.plrc, &pb, f2));
    let (q1, q2) = (project(&setup.rapc, &rb, f1), project(&setup.rapc, &rb, f2));
    let p1 = rapc_rows(&mut tape, q1, &setup.sample.region_of, true);
    let p2 = rapc_rows(&mut tape, q2, &setup.sample.region_of, true);
    BlendValues {
        loss: tape.scalar(out.loss),
        plrc: tape.scalar(out.plrc),
        rapc: tape.scalar(out.rapc),
        z: [tape.value(z1).clone(), tape.value(z2).clone()],
        p: [tape.value(p1).clone(), tape.value(p2).clone()],
    }
}

