// SPDX-License-Identifier: Apache-2.0

use bevpretrain::contrast::{Branch, ContrastConfig};
use bevpretrain::distill::{
    build_distill_batch, distill_step, rad_loss, DistillScene, RadConfig, RadTarget, Student, Teacher,
};
use bevpretrain::nnet::{occupancy_raster, Optimizer, Tape, Tensor};
use bevpretrain::pipeline::{distill_rad, prepare_scenes, ArchConfig, Stage, Stage1Model, Stage2Model, TrainConfig};
use bevpretrain::pooling::{PoolingConfig, TaggedPointCloud};
use bevpretrain::scenegen::{generate_scene, scene_seeds, Point3, SceneSpec};
use bevpretrain::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchConfig {
    ArchConfig {
        grid_size: 8,
        lidar_channels: 4,
        lidar_hidden: 6,
        camera_channels: 3,
        ..ArchConfig::default()
    }
}

/// Regions of the given sizes as tight blobs spread along the x axis, plus
/// a few untagged points.
fn cloud(sizes: &[usize], rng: &mut ChaCha8Rng) -> TaggedPointCloud {
    let (mut points, mut tags) = (Vec::new(), Vec::new());
    for (r, &n) in sizes.iter().enumerate() {
        let cx = -10.0 + 5.0 * r as f64;
        for _ in 0..n {
            points.push(Point3::new(
                cx + rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(0.3..1.5),
            ));
            tags.push(r as i64);
        }
    }
    for _ in 0..10 {
        points.push(Point3::new(rng.random_range(-15.0..15.0), 12.0, 0.0));
        tags.push(-1);
    }
    TaggedPointCloud::from_tags(points, tags).unwrap()
}

struct Setup {
    teacher: Teacher,
    student: Student,
    raster: Tensor,
    cloud: TaggedPointCloud,
}

fn setup(sizes: &[usize], seed: u64) -> Setup {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = cloud(sizes, &mut rng);
    let raster = occupancy_raster(&cloud.points, &arch.camera_grid(), 0.0, 0.0, &mut rng);
    let teacher = Stage1Model::init(&arch, &ContrastConfig::default(), seed).teacher(RadTarget::RawLidar);
    let student = Stage2Model::init(&arch, arch.lidar_channels, 12, RadTarget::RawLidar, seed).student;
    Setup {
        teacher,
        student,
        raster,
        cloud,
    }
}

struct Built {
    lidar_rows: Tensor,
    region_counts: Vec<usize>,
    region_of: Vec<usize>,
    lidar_grad_entries: Vec<f64>,
    camera_grad_abs: f64,
}

fn build(s: &Setup, lidar: &bevpretrain::nnet::ParamSet, seed: u64) -> Built {
    let cfg = RadConfig::default();
    let mut tape = Tape::new();
    let lb = lidar.bind(&mut tape);
    let cb = s.student.params["camera"].bind(&mut tape);
    let rb = s.student.params["rad"].bind(&mut tape);
    let batch = build_distill_batch(
        &mut tape,
        DistillScene {
            cloud: &s.cloud,
            raster: &s.raster,
        },
        (&s.teacher.encoder, &lb),
        None,
        (&s.student.camera, &cb),
        Branch {
            projector: &s.student.projector,
            params: &rb,
            running: &s.student.running,
        },
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let loss = rad_loss(&mut tape, &batch, &cfg).unwrap();
    let g = tape.backward(loss);
    let lidar_grad_entries = lb.collect(&g).iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let camera_grad_abs = cb.collect(&g).iter().flat_map(|(_, t)| t.data().to_vec()).map(f64::abs).sum();
    Built {
        lidar_rows: tape.value(batch.lidar_rows).clone(),
        region_counts: batch.region_counts.clone(),
        region_of: batch.region_of.clone(),
        lidar_grad_entries,
        camera_grad_abs,
    }
}

#[test]
fn two_full_regions_give_capped_rows() {
    let s = setup(&[20, 24], 1);
    let b = build(&s, &s.teacher.params, 3);
    assert_eq!(b.region_counts, vec![16, 16]);
    assert_eq!(b.lidar_rows.rows(), 32);
    assert_eq!(b.region_of.len(), 32);
}

#[test]
fn small_region_contributes_all_its_points() {
    let s = setup(&[20, 3], 2);
    let b = build(&s, &s.teacher.params, 3);
    assert_eq!(b.region_counts, vec![16, 3]);
    assert_eq!(b.region_of.iter().filter(|&&r| r == 1).count(), 3);
}

#[test]
fn lidar_parameters_get_exactly_zero_gradient() {
    let s = setup(&[20, 12, 5], 4);
    let base = build(&s, &s.teacher.params, 7);
    assert!(!base.lidar_grad_entries.is_empty());
    assert!(base.lidar_grad_entries.iter().all(|&v| v == 0.0));
    assert!(base.camera_grad_abs > 0.0);

    let mut perturbed = s.teacher.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (_, t) in perturbed.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let moved = build(&s, &perturbed, 7);
    assert_ne!(moved.lidar_rows, base.lidar_rows, "targets should depend on the LiDAR parameters");
    assert!(moved.lidar_grad_entries.iter().all(|&v| v == 0.0));
}

#[test]
fn unfrozen_lidar_is_a_contract_error() {
    let mut s = setup(&[20, 12], 5);
    let cfg = RadConfig {
        lidar_frozen: false,
        ..RadConfig::default()
    };
    let scene = DistillScene {
        cloud: &s.cloud,
        raster: &s.raster,
    };
    let mut opt = Optimizer::adam(1e-3);
    let got = distill_step(&s.teacher, &mut s.student, &[scene], &cfg, &mut opt, 35.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(got, Err(Error::Contract(_))));

    let arch = small_arch();
    let pre = prepare_scenes(&[s.cloud.points.clone()], &PoolingConfig::default(), &arch, 0).unwrap();
    let train = TrainConfig {
        stage: Stage::Rad,
        steps: 2,
        ..TrainConfig::default()
    };
    assert!(matches!(distill_rad(&pre, &s.teacher, &arch, &train, &cfg), Err(Error::Contract(_))));
}

#[test]
fn full_distill_run_leaves_teacher_untouched() {
    let arch = small_arch();
    let spec = SceneSpec::default();
    let points: Vec<Vec<Point3>> = scene_seeds(11, 4)
        .into_iter()
        .map(|s| generate_scene(&spec, s).unwrap().points)
        .collect();
    let scenes = prepare_scenes(&points, &PoolingConfig::default(), &arch, 11).unwrap();
    let stage1 = Stage1Model::init(&arch, &ContrastConfig::default(), 11);
    let teacher = stage1.teacher(RadTarget::RawLidar);
    let before = teacher.params.checksum();
    let train = TrainConfig {
        stage: Stage::Rad,
        steps: 15,
        batch_scenes: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let run = distill_rad(&scenes, &teacher, &arch, &train, &RadConfig::default()).unwrap();
    assert_eq!(run.history.len(), 15);
    assert_eq!(teacher.params.checksum(), before);
    assert_eq!(stage1.params["lidar"].checksum(), before);
    let init = Stage2Model::init(&arch, arch.lidar_channels, RadConfig::default().proj_hidden, RadTarget::RawLidar, 11);
    assert_ne!(run.model.student.params["camera"], init.student.params["camera"]);
}
