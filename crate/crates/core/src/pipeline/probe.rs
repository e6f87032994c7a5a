// SPDX-License-Identifier: Apache-2.0

//! Frozen-feature linear probe: per-cell logistic regression predicting
//! whether a BEV cell overlaps an object footprint.

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::nnet::{FeatureMap, GridSpec};
use crate::scenegen::LabeledScene;
use crate::{Error, Result};

const MIN_POSITIVE_FRACTION: f64 = 0.01;
const SPLIT_ATTEMPTS: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub ridge: f64,
    pub max_iter: usize,
    /// Keep every positive cell and as many randomly chosen negatives.
    pub balance: bool,
    /// Permutation control: shuffle labels across all cells before fitting.
    pub shuffle_labels: bool,
    pub negatives: NegativePool,
}

/// Which non-object cells may serve as negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePool {
    All,
    /// Cells containing at least one point.
    Occupied,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            ridge: 1e-3,
            max_iter: 100,
            balance: true,
            shuffle_labels: false,
            negatives: NegativePool::Occupied,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1)"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config("ridge", "must be >= 0"));
        }
        if self.max_iter < 1 {
            return Err(Error::config("max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// Share of the larger class in the test split.
    pub majority_rate: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_scenes: Vec<usize>,
}

/// `true` for cells whose square overlaps some object's XY bounding box.
pub fn cell_labels(scene: &LabeledScene, grid: &GridSpec) -> Vec<bool> {
    let s = grid.cell_size();
    let e = grid.extent_xy;
    let boxes = scene.object_footprints();
    (0..grid.n_cells())
        .map(|cell| {
            let (row, col) = (cell / grid.width, cell % grid.width);
            let (x0, y0) = (-e + col as f64 * s, -e + row as f64 * s);
            boxes
                .iter()
                .any(|b| x0 < b[2] && x0 + s > b[0] && y0 < b[3] && y0 + s > b[1])
        })
        .collect()
}

struct Rows {
    scene: usize,
    features: Vec<f64>,
    label: bool,
}

fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64, max_iter: usize) -> DVector<f64> {
    let d = x.ncols();
    let mut w = DVector::zeros(d);
    let mut penalty = DMatrix::identity(d, d) * ridge;
    // The bias column is last and only lightly regularized.
    penalty[(d - 1, d - 1)] = 1e-9;
    for _ in 0..max_iter {
        let z = x * &w;
        let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let grad = x.transpose() * (&p - y) + &penalty * &w;
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let mut xs = x.clone();
        for (mut row, si) in xs.row_iter_mut().zip(s.iter()) {
            row *= *si;
        }
        let h = x.transpose() * xs + &penalty;
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => match h.lu().solve(&grad) {
                Some(s) => s,
                None => break,
            },
        };
        w -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    w
}

pub fn linear_probe<F>(features_fn: F, scenes: &[LabeledScene], seed: u64, cfg: &ProbeConfig) -> Result<ProbeReport>
where
    F: Fn(&LabeledScene) -> Result<FeatureMap> + Sync,
{
    cfg.validate()?;
    if scenes.len() < 2 {
        return Err(Error::Contract("probe needs at least two scenes".into()));
    }
    let maps: Vec<FeatureMap> = scenes.par_iter().map(&features_fn).collect::<Result<_>>()?;
    let mut rows: Vec<Rows> = Vec::new();
    for (i, (scene, fm)) in scenes.iter().zip(&maps).enumerate() {
        if !fm.all_finite() {
            return Err(Error::Numerical(format!("scene {i}: non-finite features")));
        }
        let labels = cell_labels(scene, &fm.grid);
        let mut occupied = vec![false; labels.len()];
        for p in &scene.points {
            if let Some((r, c)) = fm.grid.cell_of(p.x, p.y) {
                occupied[r * fm.grid.width + c] = true;
            }
        }
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len())
            .filter(|&c| labels[c] || cfg.negatives == NegativePool::All || occupied[c])
            .partition(|&c| labels[c]);
        let chosen_neg: Vec<usize> = if cfg.balance {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, 4]));
            let k = pos.len().min(neg.len());
            index::sample(&mut rng, neg.len(), k).iter().map(|j| neg[j]).collect()
        } else {
            neg
        };
        for c in pos.into_iter().chain(chosen_neg) {
            rows.push(Rows {
                scene: i,
                features: fm.values.row(c).to_vec(),
                label: labels[c],
            });
        }
    }
    if cfg.shuffle_labels {
        let mut labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5])));
        for (r, l) in rows.iter_mut().zip(labels) {
            r.label = l;
        }
    }

    let n_scenes = scenes.len();
    let n_train_scenes = ((n_scenes as f64 * cfg.train_fraction).round() as usize).clamp(1, n_scenes - 1);
    let mut split = None;
    for attempt in 0..SPLIT_ATTEMPTS {
        let mut perm: Vec<usize> = (0..n_scenes).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[6, attempt])));
        let mut is_train = vec![false; n_scenes];
        for &s in &perm[..n_train_scenes] {
            is_train[s] = true;
        }
        let frac = |train: bool| {
            let sel: Vec<&Rows> = rows.iter().filter(|r| is_train[r.scene] == train).collect();
            let p = sel.iter().filter(|r| r.label).count();
            if sel.is_empty() {
                0.0
            } else {
                p as f64 / sel.len() as f64
            }
        };
        if frac(true) >= MIN_POSITIVE_FRACTION && frac(false) >= MIN_POSITIVE_FRACTION {
            split = Some(is_train);
            break;
        }
        log::warn!("probe split {attempt} has under 1% positives; drawing another split");
    }
    let is_train = split.ok_or_else(|| Error::Contract("no probe split with at least 1% positive cells".into()))?;

    let (train, test): (Vec<&Rows>, Vec<&Rows>) = rows.iter().partition(|r| is_train[r.scene]);
    let d = rows[0].features.len();
    let mut mean = vec![0.0; d];
    for r in &train {
        for (m, v) in mean.iter_mut().zip(&r.features) {
            *m += v / train.len() as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for r in &train {
        for ((s, v), m) in sd.iter_mut().zip(&r.features).zip(&mean) {
            *s += (v - m) * (v - m) / train.len() as f64;
        }
    }
    let scale: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let design = |set: &[&Rows]| {
        DMatrix::from_fn(set.len(), d + 1, |i, j| {
            if j == d {
                1.0
            } else {
                (set[i].features[j] - mean[j]) * scale[j]
            }
        })
    };
    let xtr = design(&train);
    let ytr = DVector::from_iterator(train.len(), train.iter().map(|r| f64::from(u8::from(r.label))));
    let w = fit_logistic(&xtr, &ytr, cfg.ridge, cfg.max_iter);
    let xte = design(&test);
    let scores = &xte * &w;
    let correct = test
        .iter()
        .zip(scores.iter())
        .filter(|(r, &s)| (s > 0.0) == r.label)
        .count();
    let pos = test.iter().filter(|r| r.label).count();
    let n_test = test.len();
    Ok(ProbeReport {
        accuracy: correct as f64 / n_test as f64,
        majority_rate: pos.max(n_test - pos) as f64 / n_test as f64,
        n_train: train.len(),
        n_test,
        train_scenes: (0..n_scenes).filter(|&s| is_train[s]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Tensor;
    use crate::scenegen::{generate_scene, Point3, SceneSpec};

    #[test]
    fn labels_follow_footprints() {
        let scene = LabeledScene {
            points: vec![Point3::new(0.2, 0.2, 1.0), Point3::new(1.4, 0.6, 1.0)],
            true_membership: vec![0, 0],
            object_centers: vec![Point3::new(0.8, 0.4, 0.5)],
        };
        let grid = GridSpec::square(2.0, 4, 1);
        let labels = cell_labels(&scene, &grid);
        let on: Vec<usize> = (0..16).filter(|&c| labels[c]).collect();
        assert_eq!(on, vec![10, 11]);
    }

    #[test]
    fn constant_features_give_majority_rate() {
        let spec = SceneSpec::default();
        let scenes: Vec<LabeledScene> = (0..6).map(|s| generate_scene(&spec, s).unwrap()).collect();
        let grid = GridSpec::square(spec.extent_xy, 32, 4);
        for balance in [true, false] {
            let cfg = ProbeConfig {
                balance,
                ..Default::default()
            };
            let r = linear_probe(
                |_| Ok(FeatureMap::new(grid, Tensor::filled(grid.n_cells(), 4, 0.7))),
                &scenes,
                3,
                &cfg,
            )
            .unwrap();
            assert!((r.accuracy - r.majority_rate).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn oracle_features_are_separable() {
        let spec = SceneSpec::default();
        let scenes: Vec<LabeledScene> = (0..6).map(|s| generate_scene(&spec, s).unwrap()).collect();
        let grid = GridSpec::square(spec.extent_xy, 32, 1);
        let r = linear_probe(
            |s| {
                let l = cell_labels(s, &grid);
                Ok(FeatureMap::new(grid, Tensor::from_fn(grid.n_cells(), 1, |c, _| f64::from(u8::from(l[c])))))
            },
            &scenes,
            1,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(r.accuracy, 1.0);
    }
}
