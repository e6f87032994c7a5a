// SPDX-License-Identifier: Apache-2.0

//! Two-layer MLP projector: linear, batch norm, ReLU, linear; rows are then
//! optionally L2-normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{he_normal, Bound, ParamSet};
use super::tape::{BatchStats, Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub c_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

/// Running batch-norm statistics; not trained by gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("mean", Tensor::row_vector(self.mean.clone()));
        p.insert("var", Tensor::row_vector(self.var.clone()));
        p
    }

    pub fn from_params(p: &ParamSet) -> Option<Self> {
        Some(Self {
            mean: p.get("mean")?.data().to_vec(),
            var: p.get("var")?.data().to_vec(),
        })
    }
}

impl Projector {
    pub fn new(c_in: usize, hidden: usize, d_out: usize) -> Self {
        Self { c_in, hidden, d_out }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w1", he_normal(rng, self.c_in, self.hidden, self.c_in, 2.0));
        p.insert("gamma", Tensor::filled(1, self.hidden, 1.0));
        p.insert("beta", Tensor::zeros(1, self.hidden));
        p.insert("w2", he_normal(rng, self.hidden, self.d_out, self.hidden, 1.0));
        p.insert("b2", Tensor::zeros(1, self.d_out));
        p
    }

    pub fn running_stats(&self) -> RunningStats {
        RunningStats::new(self.hidden)
    }

    /// Returns the projected rows and, in train mode, the batch statistics
    /// the caller should fold into its running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        mode: Mode,
        running: &RunningStats,
        normalize: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let b = tape.value(x).rows();
        if tape.value(x).cols() != self.c_in {
            return Err(Error::Contract(format!(
                "projector expects {} input columns, got {}",
                self.c_in,
                tape.value(x).cols()
            )));
        }
        // Bias-free; batch norm follows.
        let h = tape.matmul(x, params.var("w1"));
        let (h, stats) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Contract(format!(
                        "train-mode batch norm needs at least 2 rows, got {b}"
                    )));
                }
                let (h, s) = tape.batch_norm(h, params.var("gamma"), params.var("beta"), BN_EPS);
                (h, Some(s))
            }
            Mode::Eval => (
                tape.batch_norm_fixed(
                    h,
                    params.var("gamma"),
                    params.var("beta"),
                    &running.mean,
                    &running.var,
                    BN_EPS,
                ),
                None,
            ),
        };
        let h = tape.relu(h);
        let out = tape.linear(h, params.var("w2"), params.var("b2"));
        let out = if normalize { tape.l2_normalize_rows(out) } else { out };
        Ok((out, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: Tensor, mode: Mode) -> Result<Tensor> {
        let proj = Projector::new(x.cols(), 8, 5);
        let params = proj.init(&mut ChaCha8Rng::seed_from_u64(4));
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let xv = tape.constant(x);
        let (y, _) = proj.forward(&mut tape, &b, xv, mode, &proj.running_stats(), true)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn identical_rows_stay_identical() {
        let row = vec![0.3, -1.2, 0.7];
        let y = run(Tensor::from_rows(&[row.clone(), row.clone(), row]), Mode::Train).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    #[test]
    fn rows_have_unit_norm() {
        let x = Tensor::from_fn(6, 3, |i, j| ((i * 3 + j) as f64).sin());
        for mode in [Mode::Train, Mode::Eval] {
            let y = run(x.clone(), mode).unwrap();
            for r in 0..y.rows() {
                let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_row_train_mode_rejected() {
        assert!(matches!(run(Tensor::zeros(1, 3), Mode::Train), Err(Error::Contract(_))));
        assert!(run(Tensor::zeros(1, 3), Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_momentum() {
        let mut rs = RunningStats::new(2);
        rs.update(&BatchStats {
            mean: vec![1.0, -2.0],
            var: vec![3.0, 0.0],
        });
        assert!((rs.mean[0] - 0.1).abs() < 1e-15);
        assert!((rs.mean[1] + 0.2).abs() < 1e-15);
        assert!((rs.var[0] - 1.2).abs() < 1e-15);
        assert!((rs.var[1] - 0.9).abs() < 1e-15);
    }
}
