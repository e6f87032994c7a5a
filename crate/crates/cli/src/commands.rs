// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bevpretrain::checks::run_suite;
use bevpretrain::nnet::{occupancy_raster, Checkpoint, FeatureMap};
use bevpretrain::pipeline::{
    derive_seed, distill_rad, linear_probe, prepare_scenes, pretrain_prc, pretrain_prc_from, write_metrics,
    MetricsRecord, ProbeReport, Stage, Stage1Model, Stage2Model,
};
use bevpretrain::pooling::pool_semantics;
use bevpretrain::scenegen::{
    generate_scene, load_labeled_scene, load_point_cloud, save_labels, save_point_cloud, scene_seeds, CsvOptions,
    LabeledScene, Point3,
};
use bevpretrain::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{render, RunConfig};
use crate::Failure;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.json";
const PROBE_SCENE_TAG: u64 = 0x5052_4f42;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(vec![format!("{}: {e}", path.display())])
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates `dir` and echoes the resolved config into it.
fn open_run_dir(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join(RESOLVED_CONFIG), &render(cfg))
}

fn require_out<'a>(out: Option<&'a Path>, command: &str) -> Result<&'a Path, Failure> {
    out.ok_or_else(|| Failure::Usage(vec![format!("{command} needs --out DIR")]))
}

fn scene_stem(i: usize) -> String {
    format!("scene_{i:03}")
}

/// `scene_*.csv` files in `dir`, sorted by name.
fn scene_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.starts_with("scene_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Usage(vec![format!("{}: no scene_*.csv files", dir.display())]));
    }
    Ok(files)
}

fn load_clouds(dir: &Path) -> Result<Vec<Vec<Point3>>, Failure> {
    scene_files(dir)?
        .iter()
        .map(|p| Ok(load_point_cloud(p)?.points))
        .collect()
}

fn load_labeled(dir: &Path) -> Result<Vec<LabeledScene>, Failure> {
    scene_files(dir)?
        .iter()
        .map(|p| Ok(load_labeled_scene(p, &p.with_extension("labels"))?))
        .collect()
}

fn generate(cfg: &RunConfig, master: u64, n: usize) -> Result<Vec<LabeledScene>, Failure> {
    scene_seeds(master, n)
        .into_iter()
        .map(|s| Ok(generate_scene(&cfg.scene, s)?))
        .collect()
}

fn training_clouds(cfg: &RunConfig) -> Result<Vec<Vec<Point3>>, Failure> {
    match &cfg.data_dir {
        Some(dir) => load_clouds(dir),
        None => Ok(generate(cfg, cfg.seed, cfg.n_scenes)?.into_iter().map(|s| s.points).collect()),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    master_seed: u64,
    n_scenes: usize,
    scene_seeds: Vec<u64>,
    files: Vec<[String; 2]>,
    scene: &'a bevpretrain::scenegen::SceneSpec,
}

pub fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let dir = out
        .or(cfg.data_dir.as_deref())
        .ok_or_else(|| Failure::Usage(vec!["gen-data needs --out DIR or data_dir".into()]))?;
    open_run_dir(dir, cfg)?;
    let seeds = scene_seeds(cfg.seed, cfg.n_scenes);
    let mut files = Vec::new();
    for (i, &s) in seeds.iter().enumerate() {
        let scene = generate_scene(&cfg.scene, s)?;
        let (points, labels) = (format!("{}.csv", scene_stem(i)), format!("{}.labels", scene_stem(i)));
        save_point_cloud(&scene.points, None, &dir.join(&points), CsvOptions::default())?;
        save_labels(&scene.true_membership, &dir.join(&labels))?;
        files.push([points, labels]);
    }
    let manifest = Manifest {
        master_seed: cfg.seed,
        n_scenes: cfg.n_scenes,
        scene_seeds: seeds,
        files,
        scene: &cfg.scene,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&dir.join(MANIFEST), &text)?;
    println!("wrote {} scenes to {}", cfg.n_scenes, dir.display());
    Ok(())
}

pub fn pool(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cloud = load_point_cloud(input)?;
    let (tagged, stats) = pool_semantics(&cloud.points, &cfg.pooling, cfg.seed)?;
    if let Some(dir) = out {
        open_run_dir(dir, cfg)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
        let path = dir.join(format!("{stem}.tagged.csv"));
        save_point_cloud(&tagged.points, Some(&tagged.tags), &path, CsvOptions { header: true })?;
        println!("tagged: {}", path.display());
    }
    println!("points: {}", tagged.len());
    println!("ground: {}", stats.n_ground);
    println!("ground_fraction: {:.4}", stats.ground_fraction(tagged.len()));
    println!("regions: {}", stats.n_regions);
    for (r, n) in stats.points_per_region.iter().enumerate() {
        println!("region {r}: {n}");
    }
    Ok(())
}

fn summarize(history: &[MetricsRecord], label: &str) {
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "{label}: {} steps, loss {:.4} -> {:.4} (ratio {:.3})",
            history.len(),
            first.loss_total,
            last.loss_total,
            last.loss_total / first.loss_total
        );
    }
}

fn with_path(e: Error, path: &Path) -> Failure {
    match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
    .into()
}

fn load_stage1(path: &Path) -> Result<Stage1Model, Failure> {
    let ck = Checkpoint::load(path)?;
    Stage1Model::from_checkpoint(&ck).map_err(|e| with_path(e, path))
}

pub fn pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let dir = require_out(out, "pretrain")?;
    open_run_dir(dir, cfg)?;
    let train = bevpretrain::pipeline::TrainConfig {
        stage: Stage::Prc,
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let clouds = training_clouds(cfg)?;
    let scenes = prepare_scenes(&clouds, &cfg.pooling, &cfg.arch, cfg.seed)?;
    let t = Instant::now();
    let run = match &cfg.checkpoint_in {
        Some(p) => pretrain_prc_from(load_stage1(p)?, &scenes, &train, &cfg.contrast)?,
        None => pretrain_prc(&scenes, &cfg.arch, &train, &cfg.contrast)?,
    };
    let metrics = cfg.metrics_out.clone().unwrap_or_else(|| dir.join("metrics_prc.jsonl"));
    let ckpt = cfg.checkpoint_out.clone().unwrap_or_else(|| dir.join("lidar.ckpt.json"));
    write_metrics(&metrics, &run.history)?;
    run.model.to_checkpoint().save(&ckpt)?;
    summarize(&run.history, "prc");
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", metrics.display());
    log::info!("pretrain took {:.1?}", t.elapsed());
    Ok(())
}

pub fn distill(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let Some(teacher_path) = cfg.checkpoint_in.as_deref() else {
        return Err(Failure::Usage(vec![
            "distill needs a stage-1 checkpoint: pass --lidar-checkpoint PATH".into(),
        ]));
    };
    let dir = require_out(out, "distill")?;
    let before = fs::read(teacher_path).map_err(|e| io_err(teacher_path, e))?;
    let stage1 = load_stage1(teacher_path)?;
    let teacher = stage1.teacher(cfg.rad.target);
    let checksum = teacher.params.checksum();
    open_run_dir(dir, cfg)?;
    let train = bevpretrain::pipeline::TrainConfig {
        stage: Stage::Rad,
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let clouds = training_clouds(cfg)?;
    let scenes = prepare_scenes(&clouds, &cfg.pooling, &stage1.arch, cfg.seed)?;
    let run = distill_rad(&scenes, &teacher, &stage1.arch, &train, &cfg.rad)?;
    let after = fs::read(teacher_path).map_err(|e| io_err(teacher_path, e))?;
    if before != after || teacher.params.checksum() != checksum {
        return Err(Failure::Runtime("stage-1 parameters changed during distillation".into()));
    }
    let metrics = cfg.metrics_out.clone().unwrap_or_else(|| dir.join("metrics_rad.jsonl"));
    let ckpt = cfg.checkpoint_out.clone().unwrap_or_else(|| dir.join("camera.ckpt.json"));
    write_metrics(&metrics, &run.history)?;
    run.model.to_checkpoint().save(&ckpt)?;
    summarize(&run.history, "rad");
    println!("lidar checksum: {checksum} (unchanged)");
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

enum Encoder {
    Lidar(Stage1Model),
    Camera(Stage2Model),
}

impl Encoder {
    fn features(&self, scene: &LabeledScene) -> bevpretrain::Result<FeatureMap> {
        match self {
            Encoder::Lidar(m) => Ok(m.feature_map(&scene.points)),
            Encoder::Camera(m) => {
                // Clean raster: no flip or dropout at evaluation.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let raster = occupancy_raster(&scene.points, &m.arch.camera_grid(), 0.0, 0.0, &mut rng);
                m.feature_map(&raster)
            }
        }
    }
}

pub fn probe(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let (encoder, label) = match &cfg.checkpoint_in {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            match ck.meta.get("stage").map(String::as_str) {
                Some("rad") => (
                    Encoder::Camera(Stage2Model::from_checkpoint(&ck).map_err(|e| with_path(e, p))?),
                    "camera (stage 2)",
                ),
                _ => (
                    Encoder::Lidar(Stage1Model::from_checkpoint(&ck).map_err(|e| with_path(e, p))?),
                    "lidar (stage 1)",
                ),
            }
        }
        None => (
            Encoder::Lidar(Stage1Model::init(&cfg.arch, &cfg.contrast, cfg.seed)),
            "lidar (random init)",
        ),
    };
    let scenes = match &cfg.data_dir {
        Some(dir) => load_labeled(dir)?,
        None => generate(cfg, derive_seed(cfg.seed, &[PROBE_SCENE_TAG]), cfg.probe_scenes)?,
    };
    let report: ProbeReport = linear_probe(|s| encoder.features(s), &scenes, cfg.seed, &cfg.probe)?;
    if let Some(dir) = out {
        open_run_dir(dir, cfg)?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_file(&dir.join("probe.json"), &text)?;
    }
    println!("encoder: {label}");
    println!("scenes: {} (train {})", scenes.len(), report.train_scenes.len());
    println!("cells: train {} test {}", report.n_train, report.n_test);
    println!("majority_rate={:.6}", report.majority_rate);
    println!("accuracy={:.6}", report.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct Offender {
    graph: &'static str,
    param: String,
    seed: u64,
    max_rel_error: f64,
    index: usize,
    analytic: f64,
    numeric: f64,
    checked: usize,
    skipped: usize,
}

pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let seeds: Vec<u64> = (0..cfg.gradcheck_seeds as u64).map(|k| cfg.seed + k).collect();
    let t = Instant::now();
    let reports = run_suite(&seeds)?;
    let elapsed = t.elapsed();

    let mut worst: BTreeMap<(usize, String), Offender> = BTreeMap::new();
    let mut unchecked = Vec::new();
    let order: Vec<&str> = bevpretrain::checks::GRAPHS.to_vec();
    for r in &reports {
        if r.report.checked() == 0 {
            unchecked.push(format!("{} seed {}", r.graph, r.seed));
        }
        let gi = order.iter().position(|g| *g == r.graph).unwrap_or(usize::MAX);
        for p in &r.report.params {
            let w = worst.entry((gi, p.name.clone())).or_insert_with(|| Offender {
                graph: r.graph,
                param: p.name.clone(),
                seed: r.seed,
                max_rel_error: -1.0,
                index: 0,
                analytic: 0.0,
                numeric: 0.0,
                checked: 0,
                skipped: 0,
            });
            if p.max_rel_error > w.max_rel_error {
                w.seed = r.seed;
                w.max_rel_error = p.max_rel_error;
                w.index = p.worst_index;
                w.analytic = p.analytic;
                w.numeric = p.numeric;
            }
            w.checked += p.checked;
            w.skipped += p.skipped;
        }
    }

    let tol = cfg.gradcheck_tolerance;
    let max = worst.values().map(|w| w.max_rel_error).fold(0.0, f64::max);
    for w in worst.values() {
        println!(
            "{:<15} {:<14} max_rel={:.3e} at [{}] seed {} analytic={:.6e} numeric={:.6e} checked={} skipped={}{}",
            w.graph,
            w.param,
            w.max_rel_error,
            w.index,
            w.seed,
            w.analytic,
            w.numeric,
            w.checked,
            w.skipped,
            if w.max_rel_error < tol { "" } else { "  FAIL" }
        );
    }
    if let Some(dir) = out {
        open_run_dir(dir, cfg)?;
        let rows: Vec<&Offender> = worst.values().collect();
        let text = serde_json::to_string_pretty(&rows).expect("report serializes") + "\n";
        write_file(&dir.join("gradcheck.json"), &text)?;
    }
    println!(
        "graphs={} seeds={} max_rel_error={max:.3e} tolerance={tol:e} elapsed={:.2}s",
        order.len(),
        seeds.len(),
        elapsed.as_secs_f64()
    );
    if !unchecked.is_empty() {
        return Err(Failure::Runtime(format!("no coordinate checked for {}", unchecked.join(", "))));
    }
    if max >= tol {
        return Err(Failure::Runtime(format!(
            "gradient check failed: max relative error {max:.3e} >= {tol:e}"
        )));
    }
    println!("gradcheck passed");
    Ok(())
}
