// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::models::{ArchConfig, PreparedScene, Stage1Model, Stage2Model};
use super::{derive_seed, MetricsRecord, Stage, TrainConfig};
use crate::augment::{apply_augmentation, sample_augmentation, AugmentationSpec};
use crate::contrast::{prc_loss, sample_points, Branch, ContrastConfig};
use crate::distill::{apply_scene_grads, distill_scene, target_dim, DistillScene, RadConfig, SceneGrad, Teacher};
use crate::nnet::{clip_gradients, BatchStats, Groups, Optimizer, Tape};
use crate::{Error, Result};

const SKIP_WINDOW: usize = 20;

#[derive(Debug, Clone)]
pub struct PrcRun {
    pub model: Stage1Model,
    pub history: Vec<MetricsRecord>,
}

#[derive(Debug, Clone)]
pub struct RadRun {
    pub model: Stage2Model,
    pub history: Vec<MetricsRecord>,
}

struct PrcGrad {
    loss: f64,
    plrc: f64,
    rapc: f64,
    pos_sim: f64,
    neg_sim: f64,
    grads: Groups,
    /// `(projector, stats)` in view order.
    stats: Vec<(&'static str, BatchStats)>,
}

fn prc_scene(model: &Stage1Model, scene: &PreparedScene, cfg: &ContrastConfig, rng: &mut ChaCha8Rng) -> Result<PrcGrad> {
    let t1 = if cfg.augment_both_views {
        sample_augmentation(rng)
    } else {
        AugmentationSpec::IDENTITY
    };
    let t2 = sample_augmentation(rng);
    let v1 = apply_augmentation(&scene.cloud, &t1);
    let v2 = apply_augmentation(&scene.cloud, &t2);
    let sample = sample_points(&scene.cloud, [&v1.points, &v2.points], cfg.n_rich, cfg.n_less, rng)?;

    let mut tape = Tape::new();
    let lb = model.params["lidar"].bind(&mut tape);
    let pb = model.params["plrc"].bind(&mut tape);
    let rb = model.params["rapc"].bind(&mut tape);
    let m1 = model.lidar.forward(&mut tape, &lb, &v1.points).map;
    let m2 = model.lidar.forward(&mut tape, &lb, &v2.points).map;
    let out = prc_loss(
        &mut tape,
        [&m1, &m2],
        &sample,
        Branch {
            projector: &model.plrc,
            params: &pb,
            running: &model.running["plrc"],
        },
        Branch {
            projector: &model.rapc,
            params: &rb,
            running: &model.running["rapc"],
        },
        cfg,
    )?;
    let g = tape.backward(out.loss);
    let mut grads = Groups::new();
    grads.insert("lidar".into(), lb.collect(&g));
    grads.insert("plrc".into(), pb.collect(&g));
    grads.insert("rapc".into(), rb.collect(&g));
    let mut stats = Vec::with_capacity(4);
    stats.extend(out.plrc_stats.into_iter().map(|s| ("plrc", s)));
    stats.extend(out.rapc_stats.into_iter().map(|s| ("rapc", s)));
    Ok(PrcGrad {
        loss: tape.scalar(out.loss),
        plrc: tape.scalar(out.plrc),
        rapc: tape.scalar(out.rapc),
        pos_sim: out.pos_sim_mean,
        neg_sim: out.neg_sim_mean,
        grads,
        stats,
    })
}

fn scene_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX, 0])));
    order
}

/// Tracks skipped steps and aborts once more than half of a window is lost.
struct SkipGuard {
    window: VecDeque<bool>,
    size: usize,
}

impl SkipGuard {
    fn new(steps: usize) -> Self {
        Self {
            window: VecDeque::new(),
            size: SKIP_WINDOW.min(steps),
        }
    }

    fn record(&mut self, step: usize, skipped: bool) -> Result<()> {
        if skipped {
            log::warn!("step {step}: no scene in the batch has pooled regions; step skipped");
        }
        self.window.push_back(skipped);
        if self.window.len() > self.size {
            self.window.pop_front();
        }
        let n_skipped = self.window.iter().filter(|&&s| s).count();
        if self.window.len() == self.size && 2 * n_skipped > self.size {
            return Err(Error::Aborted(format!(
                "{n_skipped} of the last {} steps were skipped for lack of pooled regions \
                 (check the pooling configuration and the input scenes)",
                self.size
            )));
        }
        Ok(())
    }
}

fn batch_indices(order: &[usize], step: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|k| order[(step * batch + k) % order.len()]).collect()
}

fn check_dataset(scenes: &[PreparedScene], train: &TrainConfig, stage: Stage) -> Result<()> {
    train.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if train.stage != stage {
        return Err(Error::config("stage", format!("expected {stage:?}, got {:?}", train.stage)));
    }
    Ok(())
}

pub fn pretrain_prc(
    scenes: &[PreparedScene],
    arch: &ArchConfig,
    train: &TrainConfig,
    contrast: &ContrastConfig,
) -> Result<PrcRun> {
    arch.validate()?;
    pretrain_prc_from(Stage1Model::init(arch, contrast, train.seed), scenes, train, contrast)
}

pub fn pretrain_prc_from(
    mut model: Stage1Model,
    scenes: &[PreparedScene],
    train: &TrainConfig,
    contrast: &ContrastConfig,
) -> Result<PrcRun> {
    check_dataset(scenes, train, Stage::Prc)?;
    contrast.validate()?;
    let order = scene_order(scenes.len(), train.seed);
    let mut opt = Optimizer::new(train.optimizer, train.lr);
    let mut guard = SkipGuard::new(train.steps);
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let picks = batch_indices(&order, step, train.batch_scenes);
        let outcomes: Vec<Result<PrcGrad>> = picks
            .par_iter()
            .enumerate()
            .map(|(k, &si)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, &[step as u64, k as u64, 2]));
                prc_scene(&model, &scenes[si], contrast, &mut rng)
            })
            .collect();
        let mut results = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            match o {
                Ok(r) => results.push(r),
                Err(Error::NoRegions) => {}
                Err(e) => return Err(e),
            }
        }
        guard.record(step, results.is_empty())?;
        if results.is_empty() {
            continue;
        }
        let n = results.len() as f64;
        let mut total: Groups = model.params.iter().map(|(k, p)| (k.clone(), p.zeros_like())).collect();
        let (mut loss, mut plrc, mut rapc, mut pos, mut neg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in &results {
            for (k, g) in &r.grads {
                total.get_mut(k).expect("model group").add_assign(g);
            }
            loss += r.loss;
            plrc += r.plrc;
            rapc += r.rapc;
            pos += r.pos_sim;
            neg += r.neg_sim;
        }
        for set in total.values_mut() {
            set.scale(1.0 / n);
        }
        let grad_norm_preclip = clip_gradients(&mut total, train.grad_clip_norm);
        if !grad_norm_preclip.is_finite() {
            return Err(Error::Numerical(format!("step {step}: gradient norm is {grad_norm_preclip}")));
        }
        opt.apply(&mut model.params, &total);
        for r in &results {
            for (name, s) in &r.stats {
                model.running.get_mut(*name).expect("projector").update(s);
            }
        }
        if model.params.values().any(|p| !p.all_finite()) {
            return Err(Error::Numerical(format!("step {step}: parameters became non-finite")));
        }
        let rec = MetricsRecord {
            step,
            loss_total: loss / n,
            loss_plrc: Some(plrc / n),
            loss_rapc: Some(rapc / n),
            loss_rad: None,
            pos_sim_mean: pos / n,
            neg_sim_mean: neg / n,
            grad_norm_preclip,
        };
        log::debug!("prc step {step}: loss {:.6}", rec.loss_total);
        history.push(rec);
    }
    Ok(PrcRun { model, history })
}

/// Stage 2 against a frozen teacher; `teacher` is only ever read.
pub fn distill_rad(
    scenes: &[PreparedScene],
    teacher: &Teacher,
    arch: &ArchConfig,
    train: &TrainConfig,
    rad: &RadConfig,
) -> Result<RadRun> {
    check_dataset(scenes, train, Stage::Rad)?;
    rad.validate()?;
    arch.validate()?;
    if !rad.lidar_frozen {
        return Err(Error::Contract("stage 2 requires lidar_frozen = true".into()));
    }
    let mut model = Stage2Model::init(arch, target_dim(teacher), rad.proj_hidden, rad.target, train.seed);
    let order = scene_order(scenes.len(), train.seed);
    let mut opt = Optimizer::new(train.optimizer, train.lr);
    let mut guard = SkipGuard::new(train.steps);
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let picks = batch_indices(&order, step, train.batch_scenes);
        let student = &model.student;
        let outcomes: Vec<Result<SceneGrad>> = picks
            .par_iter()
            .enumerate()
            .map(|(k, &si)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, &[step as u64, k as u64, 3]));
                let scene = DistillScene {
                    cloud: &scenes[si].cloud,
                    raster: &scenes[si].raster,
                };
                distill_scene(teacher, student, scene, rad, &mut rng)
            })
            .collect();
        let mut results = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            match o {
                Ok(r) => results.push(r),
                Err(Error::NoRegions) => {}
                Err(e) => return Err(e),
            }
        }
        guard.record(step, results.is_empty())?;
        let Some(m) = apply_scene_grads(&mut model.student, results, &mut opt, train.grad_clip_norm)? else {
            continue;
        };
        history.push(MetricsRecord {
            step,
            loss_total: m.loss,
            loss_plrc: None,
            loss_rapc: None,
            loss_rad: Some(m.loss),
            pos_sim_mean: m.pos_sim_mean,
            neg_sim_mean: m.neg_sim_mean,
            grad_norm_preclip: m.grad_norm_preclip,
        });
        log::debug!("rad step {step}: loss {:.6}", m.loss);
    }
    Ok(RadRun { model, history })
}
