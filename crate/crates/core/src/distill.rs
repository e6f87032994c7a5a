// SPDX-License-Identifier: Apache-2.0

//! Region-aware distillation from a frozen LiDAR encoder into the camera
//! encoder.
//!
//! Each pooled region carries total weight `1/N_R` and each of its `N_S`
//! sampled points `1/(N_R N_S)`. LiDAR targets are detached on the tape, so
//! a backward sweep reaches the LiDAR parameters with exactly zero.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{interpolate_rows, Branch, EmbeddingBatch, LossResult};
use crate::nnet::{
    dot, BatchStats, Bound, CameraEncoder, Groups, InfoNceAnchor, LidarEncoder, Mode, Optimizer, ParamSet,
    Projector, RunningStats, Tape, Tensor, Var,
};
use crate::pooling::TaggedPointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadTarget {
    /// Unit-normalized interpolated LiDAR features (`C_lidar` wide).
    RawLidar,
    /// The stage-1 point projector applied in eval mode to those features.
    PlrcProjected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadConfig {
    pub tau: f64,
    pub sample_per_region: usize,
    pub lidar_frozen: bool,
    /// Restrict each softmax to the anchor's own region.
    pub within_region: bool,
    pub target: RadTarget,
    pub proj_hidden: usize,
}

impl Default for RadConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            sample_per_region: 16,
            lidar_frozen: true,
            within_region: false,
            target: RadTarget::RawLidar,
            proj_hidden: 256,
        }
    }
}

impl RadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", format!("must be > 0, got {}", self.tau)));
        }
        if self.sample_per_region < 1 {
            return Err(Error::config("sample_per_region", "must be >= 1"));
        }
        if self.proj_hidden < 1 {
            return Err(Error::config("proj_hidden", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub camera_rows: Var,
    pub lidar_rows: Var,
    pub region_of: Vec<usize>,
    pub region_counts: Vec<usize>,
    /// Point indices into the tagged cloud, row-aligned.
    pub indices: Vec<usize>,
    pub rad_stats: Option<BatchStats>,
}

impl DistillBatch {
    pub fn len(&self) -> usize {
        self.region_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_of.is_empty()
    }
}

/// Frozen stage-1 side: encoder weights plus the optional target projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub encoder: LidarEncoder,
    pub params: ParamSet,
    pub target: Option<(Projector, ParamSet, RunningStats)>,
}

/// Trainable stage-2 side. `params` holds groups `camera` and `rad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub camera: CameraEncoder,
    pub projector: Projector,
    pub params: Groups,
    pub running: RunningStats,
}

impl Student {
    pub fn init<R: Rng + ?Sized>(camera: CameraEncoder, target_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let projector = Projector::new(camera.grid.channels, hidden, target_dim);
        let mut params = Groups::new();
        params.insert("camera".into(), camera.init(rng));
        params.insert("rad".into(), projector.init(rng));
        Self {
            running: projector.running_stats(),
            camera,
            projector,
            params,
        }
    }
}

pub fn target_dim(teacher: &Teacher) -> usize {
    match &teacher.target {
        Some((p, _, _)) => p.d_out,
        None => teacher.encoder.grid.channels,
    }
}

/// One pooled scene as seen by stage 2.
#[derive(Debug, Clone, Copy)]
pub struct DistillScene<'a> {
    pub cloud: &'a TaggedPointCloud,
    pub raster: &'a Tensor,
}

fn sample_regions<R: Rng + ?Sized>(
    tpc: &TaggedPointCloud,
    cap: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut indices, mut region_of, mut counts) = (Vec::new(), Vec::new(), Vec::new());
    for (r, members) in tpc.region_index.iter().enumerate() {
        let k = cap.min(members.len());
        indices.extend(index::sample(rng, members.len(), k).iter().map(|i| members[i]));
        region_of.extend(std::iter::repeat_n(r, k));
        counts.push(k);
    }
    (indices, region_of, counts)
}

/// `lidar` must be bound on `tape`; its parameters stay reachable so the
/// caller can verify they receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn build_distill_batch<R: Rng + ?Sized>(
    tape: &mut Tape,
    scene: DistillScene<'_>,
    teacher: (&LidarEncoder, &Bound),
    target: Option<Branch<'_>>,
    camera: (&CameraEncoder, &Bound),
    rad: Branch<'_>,
    cfg: &RadConfig,
    rng: &mut R,
) -> Result<DistillBatch> {
    if scene.cloud.n_regions() == 0 {
        return Err(Error::NoRegions);
    }
    let (indices, region_of, region_counts) = sample_regions(scene.cloud, cfg.sample_per_region, rng);
    let coords: Vec<(f64, f64)> = indices
        .iter()
        .map(|&i| (scene.cloud.points[i].x, scene.cloud.points[i].y))
        .collect();

    let lidar_out = teacher.0.forward(tape, teacher.1, &scene.cloud.points);
    let (l, _) = interpolate_rows(tape, &lidar_out.map, &coords);
    let l = match target {
        None => tape.l2_normalize_rows(l),
        Some(b) => b.projector.forward(tape, b.params, l, Mode::Eval, b.running, true)?.0,
    };
    let lidar_rows = tape.detach(l);

    let cam_map = camera.0.forward(tape, camera.1, scene.raster)?;
    let (c, _) = interpolate_rows(tape, &cam_map, &coords);
    let mode = if indices.len() >= 2 { Mode::Train } else { Mode::Eval };
    let (camera_rows, rad_stats) = rad.projector.forward(tape, rad.params, c, mode, rad.running, true)?;
    if tape.value(camera_rows).cols() != tape.value(lidar_rows).cols() {
        return Err(Error::Contract(format!(
            "camera rows are {} wide, targets {}",
            tape.value(camera_rows).cols(),
            tape.value(lidar_rows).cols()
        )));
    }
    Ok(DistillBatch {
        camera_rows,
        lidar_rows,
        region_of,
        region_counts,
        indices,
        rad_stats,
    })
}

/// Taped loss with `1/(N_R N_S)` weights; `region_of` ids need not be dense.
pub fn rad_term(tape: &mut Tape, c: Var, l: Var, region_of: &[usize], tau: f64, within_region: bool) -> Result<Var> {
    if region_of.is_empty() {
        return Err(Error::NoRegions);
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in region_of.iter().enumerate() {
        members.entry(r).or_default().push(i);
    }
    let n_regions = members.len() as f64;
    let terms = region_of
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let group = &members[r];
            InfoNceAnchor {
                row: i,
                positives: vec![(i, 1.0 / (n_regions * group.len() as f64))],
                denominator: within_region.then(|| group.clone()),
            }
        })
        .collect();
    tape.info_nce(c, l, terms, tau)
}

pub fn rad_loss(tape: &mut Tape, batch: &DistillBatch, cfg: &RadConfig) -> Result<Var> {
    rad_term(tape, batch.camera_rows, batch.lidar_rows, &batch.region_of, cfg.tau, cfg.within_region)
}

/// Untaped evaluation; the gradient map carries the camera side only.
pub fn rad_loss_value(
    c: &EmbeddingBatch,
    l: &EmbeddingBatch,
    region_of: &[usize],
    tau: f64,
    within_region: bool,
) -> Result<LossResult> {
    if c.rows.shape() != l.rows.shape() || c.rows.rows() != region_of.len() {
        return Err(Error::Contract("camera and lidar rows misaligned".into()));
    }
    let mut tape = Tape::new();
    let vc = tape.param(c.rows.clone());
    let vl = tape.constant(l.rows.clone());
    let loss = rad_term(&mut tape, vc, vl, region_of, tau, within_region)?;
    let grads = tape.backward(loss);
    let mut gradients = BTreeMap::new();
    gradients.insert(c.provenance.clone(), grads.wrt(vc));
    Ok(LossResult {
        value: tape.scalar(loss),
        gradients,
    })
}

/// Mean `c_i . l_i` and mean `c_i . l_j` over cross-region pairs.
pub fn similarity_summary(c: &Tensor, l: &Tensor, region_of: &[usize]) -> (f64, f64) {
    let k = region_of.len();
    let pos = (0..k).map(|i| dot(c.row(i), l.row(i))).sum::<f64>() / k as f64;
    let (mut neg, mut n) = (0.0, 0usize);
    for i in 0..k {
        for j in 0..k {
            if region_of[i] != region_of[j] {
                neg += dot(c.row(i), l.row(j));
                n += 1;
            }
        }
    }
    (pos, if n == 0 { 0.0 } else { neg / n as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub loss: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
    pub grads: Groups,
    pub stats: Option<BatchStats>,
}

/// RAD value and student gradients for one scene. Fails with a contract
/// error if any LiDAR parameter receives a nonzero gradient.
pub fn distill_scene<R: Rng + ?Sized>(
    teacher: &Teacher,
    student: &Student,
    scene: DistillScene<'_>,
    cfg: &RadConfig,
    rng: &mut R,
) -> Result<SceneGrad> {
    let mut tape = Tape::new();
    let lidar = teacher.params.bind(&mut tape);
    let target_bound = teacher.target.as_ref().map(|(_, p, _)| p.bind(&mut tape));
    let camera = student.params["camera"].bind(&mut tape);
    let rad = student.params["rad"].bind(&mut tape);
    let target = match (&teacher.target, &target_bound) {
        (Some((proj, _, running)), Some(b)) => Some(Branch {
            projector: proj,
            params: b,
            running,
        }),
        _ => None,
    };
    let batch = build_distill_batch(
        &mut tape,
        scene,
        (&teacher.encoder, &lidar),
        target,
        (&student.camera, &camera),
        Branch {
            projector: &student.projector,
            params: &rad,
            running: &student.running,
        },
        cfg,
        rng,
    )?;
    let loss = rad_loss(&mut tape, &batch, cfg)?;
    let g = tape.backward(loss);
    let frozen = lidar.collect(&g);
    if let Some((name, _)) = frozen.iter().find(|(_, t)| t.data().iter().any(|&v| v != 0.0)) {
        return Err(Error::Contract(format!("LiDAR parameter {name} received a gradient")));
    }
    if let Some(b) = &target_bound {
        if b.collect(&g).iter().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)) {
            return Err(Error::Contract("target projector received a gradient".into()));
        }
    }
    let (pos_sim, neg_sim) = similarity_summary(
        tape.value(batch.camera_rows),
        tape.value(batch.lidar_rows),
        &batch.region_of,
    );
    let mut grads = Groups::new();
    grads.insert("camera".into(), camera.collect(&g));
    grads.insert("rad".into(), rad.collect(&g));
    Ok(SceneGrad {
        loss: tape.scalar(loss),
        pos_sim,
        neg_sim,
        grads,
        stats: batch.rad_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub pos_sim_mean: f64,
    pub neg_sim_mean: f64,
    pub grad_norm_preclip: f64,
    pub scenes_used: usize,
}

/// Averages the per-scene gradients, clips, and updates the student only.
/// Scenes without regions are skipped; if all are, nothing changes and
/// `None` is returned.
pub fn distill_step<R: Rng + ?Sized>(
    teacher: &Teacher,
    student: &mut Student,
    scenes: &[DistillScene<'_>],
    cfg: &RadConfig,
    optimizer: &mut Optimizer,
    clip_norm: f64,
    rng: &mut R,
) -> Result<Option<StepMetrics>> {
    if !cfg.lidar_frozen {
        return Err(Error::Contract("stage 2 requires lidar_frozen = true".into()));
    }
    let mut results = Vec::with_capacity(scenes.len());
    for &scene in scenes {
        match distill_scene(teacher, student, scene, cfg, rng) {
            Ok(r) => results.push(r),
            Err(Error::NoRegions) => log::warn!("scene without regions skipped"),
            Err(e) => return Err(e),
        }
    }
    apply_scene_grads(student, results, optimizer, clip_norm)
}

/// Ordered reduction of scene results followed by one optimizer update.
pub fn apply_scene_grads(
    student: &mut Student,
    results: Vec<SceneGrad>,
    optimizer: &mut Optimizer,
    clip_norm: f64,
) -> Result<Option<StepMetrics>> {
    if results.is_empty() {
        return Ok(None);
    }
    let n = results.len() as f64;
    let mut total = student.params.iter().map(|(k, p)| (k.clone(), p.zeros_like())).collect::<Groups>();
    let (mut loss, mut pos, mut neg) = (0.0, 0.0, 0.0);
    for r in &results {
        for (k, g) in &r.grads {
            total.get_mut(k).expect("student group").add_assign(g);
        }
        loss += r.loss;
        pos += r.pos_sim;
        neg += r.neg_sim;
    }
    for set in total.values_mut() {
        set.scale(1.0 / n);
    }
    let grad_norm_preclip = crate::nnet::clip_gradients(&mut total, clip_norm);
    if !grad_norm_preclip.is_finite() {
        return Err(Error::Numerical(format!("gradient norm is {grad_norm_preclip}")));
    }
    optimizer.apply(&mut student.params, &total);
    for r in &results {
        if let Some(s) = &r.stats {
            student.running.update(s);
        }
    }
    let rad_params = &student.params["rad"];
    if !student.params["camera"].all_finite() || !rad_params.all_finite() {
        return Err(Error::Numerical("student parameters became non-finite".into()));
    }
    Ok(Some(StepMetrics {
        loss: loss / n,
        pos_sim_mean: pos / n,
        neg_sim_mean: neg / n,
        grad_norm_preclip,
        scenes_used: results.len(),
    }))
}
