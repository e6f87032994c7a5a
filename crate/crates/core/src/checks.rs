// SPDX-License-Identifier: Apache-2.0

//! Small, seeded instances of every differentiable graph in the crate, for
//! finite-difference verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_augmentation, sample_augmentation};
use crate::contrast::{plrc_term, prc_loss, rapc_rows, rapc_term, sample_points, Branch, ContrastConfig};
use crate::distill::{build_distill_batch, rad_loss, DistillScene, RadConfig};
use crate::nnet::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use crate::nnet::{
    occupancy_raster, CameraEncoder, GridSpec, Groups, LidarEncoder, Mode, ParamSet, Projector, Tensor,
};
use crate::pooling::TaggedPointCloud;
use crate::scenegen::Point3;
use crate::Result;

pub const GRAPHS: [&str; 7] = [
    "lidar_forward",
    "camera_forward",
    "project",
    "plrc_loss",
    "rapc_loss",
    "prc_loss",
    "rad_loss",
];

const TAU: f64 = 0.07;

#[derive(Debug, Clone)]
pub struct GraphReport {
    pub graph: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn jitter_biases(p: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for (name, t) in p.iter_mut() {
        if name.starts_with('b') || name == "beta" {
            for v in t.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

fn small_grid(channels: usize) -> GridSpec {
    GridSpec::square(2.0, 4, channels)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-radius..radius),
                rng.random_range(-radius..radius),
                rng.random_range(0.0..2.0),
            )
        })
        .collect()
}

/// Three compact tagged clusters plus untagged scatter, inside a 2 m grid.
fn toy_cloud(rng: &mut ChaCha8Rng) -> TaggedPointCloud {
    let centres = [(-0.8, -0.6), (0.7, -0.5), (0.1, 0.8)];
    let (mut pts, mut tags) = (Vec::new(), Vec::new());
    for (r, &(cx, cy)) in centres.iter().enumerate() {
        for _ in 0..6 {
            pts.push(Point3::new(
                cx + rng.random_range(-0.25..0.25),
                cy + rng.random_range(-0.25..0.25),
                rng.random_range(0.3..1.5),
            ));
            tags.push(r as i64);
        }
    }
    for p in random_points(rng, 12, 1.2) {
        pts.push(Point3::new(p.x, p.y, 0.1 * p.z));
        tags.push(-1);
    }
    TaggedPointCloud::from_tags(pts, tags).expect("dense toy tags")
}

fn small_projector(c_in: usize) -> Projector {
    Projector::new(c_in, 8, 5)
}

fn check_lidar(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = LidarEncoder::new(small_grid(3), 4);
    let mut params = enc.init(&mut rng);
    jitter_biases(&mut params, &mut rng);
    let points = random_points(&mut rng, 14, 2.0);
    let w = gaussian(&mut rng, 16, 3);
    grad_check(
        &params,
        |tape, b| {
            let out = enc.forward(tape, b, &points);
            Ok(tape.readout(out.map.var, w.clone()))
        },
        DEFAULT_STEP,
    )
}

fn check_camera(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = CameraEncoder::new(small_grid(3));
    let mut params = enc.init(&mut rng);
    jitter_biases(&mut params, &mut rng);
    let raster = Tensor::from_fn(16, 1, |_, _| f64::from(u8::from(rng.random_bool(0.5))));
    let w = gaussian(&mut rng, 16, 3);
    grad_check(
        &params,
        |tape, b| {
            let m = enc.forward(tape, b, &raster)?;
            Ok(tape.readout(m.var, w.clone()))
        },
        DEFAULT_STEP,
    )
}

fn check_project(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = small_projector(4);
    let mut params = proj.init(&mut rng);
    jitter_biases(&mut params, &mut rng);
    let running = proj.running_stats();
    let x = gaussian(&mut rng, 6, 4);
    let w = gaussian(&mut rng, 6, 5);
    grad_check(
        &params,
        |tape, b| {
            let xv = tape.constant(x.clone());
            let (y, _) = proj.forward(tape, b, xv, Mode::Train, &running, true)?;
            Ok(tape.readout(y, w.clone()))
        },
        DEFAULT_STEP,
    )
}

fn toy_regions() -> Vec<i64> {
    let mut r = vec![0, 0, 0, 1, 1, 2, 2, 2];
    r.extend([-1; 8]);
    r
}

fn check_plrc(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert("z1", gaussian(&mut rng, 16, 6));
    params.insert("z2", gaussian(&mut rng, 16, 6));
    let regions = toy_regions();
    grad_check(
        &params,
        |tape, b| {
            let z1 = tape.l2_normalize_rows(b.var("z1"));
            let z2 = tape.l2_normalize_rows(b.var("z2"));
            plrc_term(tape, z1, z2, &regions, 8, TAU)
        },
        DEFAULT_STEP,
    )
}

fn check_rapc(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert("p1", gaussian(&mut rng, 16, 4));
    params.insert("p2", gaussian(&mut rng, 16, 4));
    let regions = toy_regions();
    grad_check(
        &params,
        |tape, b| {
            let p1 = tape.l2_normalize_rows(b.var("p1"));
            let p2 = tape.l2_normalize_rows(b.var("p2"));
            let r1 = rapc_rows(tape, p1, &regions, true);
            let r2 = rapc_rows(tape, p2, &regions, true);
            rapc_term(tape, r1, r2, 8, TAU)
        },
        DEFAULT_STEP,
    )
}

fn check_prc(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = toy_cloud(&mut rng);
    let v1 = apply_augmentation(&cloud, &sample_augmentation(&mut rng));
    let v2 = apply_augmentation(&cloud, &sample_augmentation(&mut rng));
    let sample = sample_points(&cloud, [&v1.points, &v2.points], 8, 8, &mut rng)?;
    let enc = LidarEncoder::new(small_grid(3), 4);
    let (plrc, rapc) = (small_projector(3), small_projector(3));
    let mut groups = Groups::new();
    groups.insert("lidar".into(), enc.init(&mut rng));
    groups.insert("plrc".into(), plrc.init(&mut rng));
    groups.insert("rapc".into(), rapc.init(&mut rng));
    for set in groups.values_mut() {
        jitter_biases(set, &mut rng);
    }
    let params = ParamSet::flatten(&groups);
    let running = plrc.running_stats();
    let cfg = ContrastConfig {
        n_rich: 8,
        n_less: 8,
        ..ContrastConfig::default()
    };
    grad_check(
        &params,
        |tape, b| {
            let lb = b.group("lidar");
            let (pb, rb) = (b.group("plrc"), b.group("rapc"));
            let m1 = enc.forward(tape, &lb, &v1.points).map;
            let m2 = enc.forward(tape, &lb, &v2.points).map;
            let out = prc_loss(
                tape,
                [&m1, &m2],
                &sample,
                Branch {
                    projector: &plrc,
                    params: &pb,
                    running: &running,
                },
                Branch {
                    projector: &rapc,
                    params: &rb,
                    running: &running,
                },
                &cfg,
            )?;
            Ok(out.loss)
        },
        DEFAULT_STEP,
    )
}

fn check_rad(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = toy_cloud(&mut rng);
    let lidar = LidarEncoder::new(small_grid(3), 4);
    let lidar_params = lidar.init(&mut rng);
    let camera = CameraEncoder::new(small_grid(2));
    let rad = Projector::new(2, 8, 3);
    let mut groups = Groups::new();
    groups.insert("camera".into(), camera.init(&mut rng));
    groups.insert("rad".into(), rad.init(&mut rng));
    for set in groups.values_mut() {
        jitter_biases(set, &mut rng);
    }
    let params = ParamSet::flatten(&groups);
    let raster = occupancy_raster(&cloud.points, &camera.grid, 0.05, 0.1, &mut rng);
    let running = rad.running_stats();
    let cfg = RadConfig {
        sample_per_region: 4,
        ..RadConfig::default()
    };
    let batch_seed: u64 = rng.random();
    grad_check(
        &params,
        |tape, b| {
            let lb = lidar_params.bind(tape);
            let (cb, rb) = (b.group("camera"), b.group("rad"));
            let batch = build_distill_batch(
                tape,
                DistillScene {
                    cloud: &cloud,
                    raster: &raster,
                },
                (&lidar, &lb),
                None,
                (&camera, &cb),
                Branch {
                    projector: &rad,
                    params: &rb,
                    running: &running,
                },
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(batch_seed),
            )?;
            rad_loss(tape, &batch, &cfg)
        },
        DEFAULT_STEP,
    )
}

pub fn check_graph(graph: &str, seed: u64) -> Option<Result<GradCheckReport>> {
    Some(match graph {
        "lidar_forward" => check_lidar(seed),
        "camera_forward" => check_camera(seed),
        "project" => check_project(seed),
        "plrc_loss" => check_plrc(seed),
        "rapc_loss" => check_rapc(seed),
        "prc_loss" => check_prc(seed),
        "rad_loss" => check_rad(seed),
        _ => return None,
    })
}

/// Every graph at every seed, in [`GRAPHS`] order.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GraphReport>> {
    let mut out = Vec::new();
    for graph in GRAPHS {
        for &seed in seeds {
            let report = check_graph(graph, seed).expect("known graph")?;
            out.push(GraphReport { graph, seed, report });
        }
    }
    Ok(out)
}
