// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::contrast::ContrastConfig;
use crate::distill::{RadTarget, Student, Teacher};
use crate::nnet::{
    occupancy_raster, CameraEncoder, Checkpoint, FeatureMap, GridSpec, Groups, LidarEncoder, Mode, ParamSet,
    Projector, RunningStats, Tape, Tensor,
};
use crate::pooling::{pool_semantics, PoolingConfig, RegionStats, TaggedPointCloud};
use crate::scenegen::Point3;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub extent_xy: f64,
    pub grid_size: usize,
    pub lidar_channels: usize,
    pub lidar_hidden: usize,
    pub camera_channels: usize,
    pub raster_flip: f64,
    pub raster_dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            extent_xy: 16.0,
            grid_size: 32,
            lidar_channels: 16,
            lidar_hidden: 32,
            camera_channels: 8,
            raster_flip: 0.05,
            raster_dropout: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        self.lidar_grid().validate()?;
        if self.lidar_hidden < 1 {
            return Err(Error::config("lidar_hidden", "must be >= 1"));
        }
        if self.camera_channels < 1 {
            return Err(Error::config("camera_channels", "must be >= 1"));
        }
        for (field, v) in [("raster_flip", self.raster_flip), ("raster_dropout", self.raster_dropout)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn lidar_grid(&self) -> GridSpec {
        GridSpec::square(self.extent_xy, self.grid_size, self.lidar_channels)
    }

    pub fn camera_grid(&self) -> GridSpec {
        GridSpec::square(self.extent_xy, self.grid_size, self.camera_channels)
    }

    fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let json = serde_json::to_value(self).expect("arch serializes");
        for (k, v) in json.as_object().expect("struct") {
            meta.insert(format!("arch.{k}"), v.to_string());
        }
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> std::result::Result<Self, String> {
        let mut obj = serde_json::Map::new();
        for (k, v) in meta {
            if let Some(field) = k.strip_prefix("arch.") {
                let value = serde_json::from_str(v).map_err(|e| format!("{k}: {e}"))?;
                obj.insert(field.to_string(), value);
            }
        }
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| e.to_string())
    }
}

/// A scene after pooling, with its fixed camera raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub cloud: TaggedPointCloud,
    pub stats: RegionStats,
    pub raster: Tensor,
}

pub fn prepare_scenes(
    scenes: &[Vec<Point3>],
    pooling: &PoolingConfig,
    arch: &ArchConfig,
    seed: u64,
) -> Result<Vec<PreparedScene>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, pts)| {
            let (cloud, stats) = pool_semantics(pts, pooling, derive_seed(seed, &[i as u64, 0]))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, 1]));
            let raster = occupancy_raster(pts, &arch.camera_grid(), arch.raster_flip, arch.raster_dropout, &mut rng);
            Ok(PreparedScene { cloud, stats, raster })
        })
        .collect()
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: Default::default(),
        reason: reason.into(),
    }
}

fn take_group(ck: &Checkpoint, name: &str) -> Result<ParamSet> {
    ck.group(name)
        .cloned()
        .ok_or_else(|| bad(format!("missing tensor group {name:?}")))
}

fn take_running(ck: &Checkpoint, name: &str, width: usize) -> Result<RunningStats> {
    let set = take_group(ck, name)?;
    let r = RunningStats::from_params(&set).ok_or_else(|| bad(format!("group {name:?} is not running statistics")))?;
    if r.mean.len() != width {
        return Err(bad(format!("group {name:?} has width {}, expected {width}", r.mean.len())));
    }
    Ok(r)
}

fn check_shapes(expected: &ParamSet, got: &ParamSet, group: &str) -> Result<()> {
    for (name, t) in expected.iter() {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(bad(format!("{group}/{name} has shape {:?}, expected {:?}", g.shape(), t.shape())));
            }
            None => return Err(bad(format!("missing tensor {group}/{name}"))),
        }
    }
    if got.len() != expected.len() {
        return Err(bad(format!("group {group} has unexpected tensors")));
    }
    Ok(())
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("missing or invalid meta {key:?}")))
}

/// LiDAR encoder with its two stage-1 projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub arch: ArchConfig,
    pub lidar: LidarEncoder,
    pub plrc: Projector,
    pub rapc: Projector,
    /// Groups `lidar`, `plrc`, `rapc`.
    pub params: Groups,
    /// Keys `plrc`, `rapc`.
    pub running: BTreeMap<String, RunningStats>,
}

impl Stage1Model {
    pub fn init(arch: &ArchConfig, contrast: &ContrastConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX, 1]));
        let lidar = LidarEncoder::new(arch.lidar_grid(), arch.lidar_hidden);
        let c = arch.lidar_channels;
        let plrc = Projector::new(c, contrast.proj_hidden, contrast.proj_dim);
        let rapc = Projector::new(c, contrast.proj_hidden, contrast.proj_dim);
        let mut params = Groups::new();
        params.insert("lidar".into(), lidar.init(&mut rng));
        params.insert("plrc".into(), plrc.init(&mut rng));
        params.insert("rapc".into(), rapc.init(&mut rng));
        let mut running = BTreeMap::new();
        running.insert("plrc".into(), plrc.running_stats());
        running.insert("rapc".into(), rapc.running_stats());
        Self {
            arch: arch.clone(),
            lidar,
            plrc,
            rapc,
            params,
            running,
        }
    }

    /// Eval-mode LiDAR BEV map of an un-augmented cloud.
    pub fn feature_map(&self, points: &[Point3]) -> FeatureMap {
        lidar_map(&self.lidar, &self.params["lidar"], points)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("stage".into(), "prc".into());
        self.arch.to_meta(&mut ck.meta);
        ck.meta.insert("proj_hidden".into(), self.plrc.hidden.to_string());
        ck.meta.insert("proj_dim".into(), self.plrc.d_out.to_string());
        for (k, p) in &self.params {
            ck.groups.insert(k.clone(), p.clone());
        }
        for (k, r) in &self.running {
            ck.groups.insert(format!("{k}.running"), r.to_params());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("stage").map(String::as_str) != Some("prc") {
            return Err(bad("not a stage-1 checkpoint"));
        }
        let arch = ArchConfig::from_meta(&ck.meta).map_err(bad)?;
        arch.validate()?;
        let contrast = ContrastConfig {
            proj_hidden: meta_usize(ck, "proj_hidden")?,
            proj_dim: meta_usize(ck, "proj_dim")?,
            ..ContrastConfig::default()
        };
        let mut model = Self::init(&arch, &contrast, 0);
        for g in ["lidar", "plrc", "rapc"] {
            let got = take_group(ck, g)?;
            check_shapes(&model.params[g], &got, g)?;
            model.params.insert(g.into(), got);
        }
        let hidden = contrast.proj_hidden;
        for g in ["plrc", "rapc"] {
            model.running.insert(g.into(), take_running(ck, &format!("{g}.running"), hidden)?);
        }
        Ok(model)
    }

    pub fn teacher(&self, target: RadTarget) -> Teacher {
        Teacher {
            encoder: self.lidar,
            params: self.params["lidar"].clone(),
            target: match target {
                RadTarget::RawLidar => None,
                RadTarget::PlrcProjected => Some((
                    self.plrc,
                    self.params["plrc"].clone(),
                    self.running["plrc"].clone(),
                )),
            },
        }
    }
}

pub(crate) fn lidar_map(enc: &LidarEncoder, params: &ParamSet, points: &[Point3]) -> FeatureMap {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let out = enc.forward(&mut tape, &b, points);
    FeatureMap::new(out.map.grid, tape.value(out.map.var).clone())
}

/// Camera encoder with its distillation projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub arch: ArchConfig,
    pub student: Student,
    pub target: RadTarget,
}

impl Stage2Model {
    pub fn init(arch: &ArchConfig, target_dim: usize, hidden: usize, target: RadTarget, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX, 2]));
        Self {
            arch: arch.clone(),
            student: Student::init(CameraEncoder::new(arch.camera_grid()), target_dim, hidden, &mut rng),
            target,
        }
    }

    pub fn feature_map(&self, raster: &Tensor) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let b = self.student.params["camera"].bind(&mut tape);
        let m = self.student.camera.forward(&mut tape, &b, raster)?;
        Ok(FeatureMap::new(m.grid, tape.value(m.var).clone()))
    }

    /// Camera rows through the distillation projector in eval mode.
    pub fn project_eval(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.student.params["rad"].bind(&mut tape);
        let x = tape.constant(features.clone());
        let (y, _) = self
            .student
            .projector
            .forward(&mut tape, &b, x, Mode::Eval, &self.student.running, true)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("stage".into(), "rad".into());
        self.arch.to_meta(&mut ck.meta);
        ck.meta.insert("proj_hidden".into(), self.student.projector.hidden.to_string());
        ck.meta.insert("proj_dim".into(), self.student.projector.d_out.to_string());
        ck.meta.insert(
            "target".into(),
            serde_json::to_value(self.target).expect("enum").as_str().expect("string").into(),
        );
        for (k, p) in &self.student.params {
            ck.groups.insert(k.clone(), p.clone());
        }
        ck.groups.insert("rad.running".into(), self.student.running.to_params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("stage").map(String::as_str) != Some("rad") {
            return Err(bad("not a stage-2 checkpoint"));
        }
        let arch = ArchConfig::from_meta(&ck.meta).map_err(bad)?;
        arch.validate()?;
        let target: RadTarget = ck
            .meta
            .get("target")
            .and_then(|t| serde_json::from_value(serde_json::Value::String(t.clone())).ok())
            .ok_or_else(|| bad("missing or invalid meta \"target\""))?;
        let hidden = meta_usize(ck, "proj_hidden")?;
        let mut model = Self::init(&arch, meta_usize(ck, "proj_dim")?, hidden, target, 0);
        for g in ["camera", "rad"] {
            let got = take_group(ck, g)?;
            check_shapes(&model.student.params[g], &got, g)?;
            model.student.params.insert(g.into(), got);
        }
        model.student.running = take_running(ck, "rad.running", hidden)?;
        Ok(model)
    }
}
