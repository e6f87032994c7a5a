// SPDX-License-Identifier: Apache-2.0

//! Two-stage training orchestration, metrics, checkpoints and the linear
//! probe.

mod models;
mod probe;
mod train;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nnet::OptimizerKind;
use crate::{Error, Result};

pub use crate::nnet::clip_gradients;
pub use models::{prepare_scenes, ArchConfig, PreparedScene, Stage1Model, Stage2Model};
pub use probe::{cell_labels, linear_probe, NegativePool, ProbeConfig, ProbeReport};
pub use train::{distill_rad, pretrain_prc, pretrain_prc_from, RadRun, PrcRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prc,
    Rad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Prc,
            steps: 200,
            batch_scenes: 4,
            lr: 2e-4,
            grad_clip_norm: 35.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch_scenes < 1 {
            return Err(Error::config("batch_scenes", "must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config(
                "grad_clip_norm",
                format!("must be > 0, got {}", self.grad_clip_norm),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_plrc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_rapc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_rad: Option<f64>,
    pub pos_sim_mean: f64,
    pub neg_sim_mean: f64,
    pub grad_norm_preclip: f64,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            Some(self.loss_total),
            self.loss_plrc,
            self.loss_rapc,
            self.loss_rad,
            Some(self.pos_sim_mean),
            Some(self.neg_sim_mean),
            Some(self.grad_norm_preclip),
        ]
        .into_iter()
        .flatten()
        .all(f64::is_finite)
    }
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("metrics serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Means over consecutive non-overlapping blocks of `window` values; a
/// trailing partial block is dropped.
pub fn block_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Deterministic child seed for `(master, tags...)`.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(master), |acc, &t| mix(acc ^ mix(t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_means_drop_partial_tail() {
        assert_eq!(block_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 0]);
        assert_ne!(a, derive_seed(1, &[0, 1]));
        assert_ne!(a, derive_seed(2, &[0, 0]));
        assert_eq!(a, derive_seed(1, &[0, 0]));
    }

    #[test]
    fn metrics_round_trip() {
        let recs = vec![MetricsRecord {
            step: 0,
            loss_total: 1.0 / 3.0,
            loss_plrc: Some(0.1),
            loss_rapc: Some(0.2),
            loss_rad: None,
            pos_sim_mean: 0.5,
            neg_sim_mean: -0.25,
            grad_norm_preclip: 3.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_metrics(&p, &recs).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), recs);
        assert!(!fs::read_to_string(&p).unwrap().contains("loss_rad"));
    }

    #[test]
    fn train_config_validation() {
        let bad = TrainConfig {
            grad_clip_norm: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "grad_clip_norm", .. })));
    }
}
