// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference check of taped gradients.
//!
//! For every scalar parameter the graph is rebuilt at `theta +- eps`; the
//! numeric derivative `(f(theta + eps) - f(theta - eps)) / (2 eps)` is
//! compared with the reverse sweep using
//! `|a - n| / max(|a|, |n|, 1e-12)`. A coordinate whose perturbation flips
//! a ReLU or max decision (detected through the tape's branch signature) has
//! no valid central difference there and is counted as skipped.

use rayon::prelude::*;

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub value: f64,
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked() > 0 && self.max_rel_error() < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// `graph` builds a scalar from the bound parameters on a fresh tape.
pub fn grad_check<F>(params: &ParamSet, graph: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var> + Sync,
{
    let eval = |p: &ParamSet| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = graph(&mut tape, &bound)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("graph output is {v}")));
        }
        Ok((v, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = graph(&mut tape, &bound)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("graph output is {value}")));
    }
    let base_sig = tape.branch_signature();
    let analytic = bound.collect(&tape.backward(out));

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();

    let results: Vec<Result<(String, usize, Option<(f64, f64)>)>> = coords
        .par_iter()
        .map(|(name, i)| {
            let mut plus = params.clone();
            plus.get_mut(name).expect("known name").data_mut()[*i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).expect("known name").data_mut()[*i] -= eps;
            let (fp, sp) = eval(&plus)?;
            let (fm, sm) = eval(&minus)?;
            if sp != base_sig || sm != base_sig {
                return Ok((name.clone(), *i, None));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.tensor(name).data()[*i];
            Ok((name.clone(), *i, Some((a, numeric))))
        })
        .collect();

    let mut report: Vec<ParamError> = params
        .names()
        .map(|n| ParamError {
            name: n.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        })
        .collect();
    for r in results {
        let (name, i, pair) = r?;
        let entry = report.iter_mut().find(|e| e.name == name).expect("known name");
        match pair {
            None => entry.skipped += 1,
            Some((a, n)) => {
                entry.checked += 1;
                let err = relative_error(a, n);
                if entry.checked == 1 || err > entry.max_rel_error {
                    entry.max_rel_error = err;
                    entry.worst_index = i;
                    entry.analytic = a;
                    entry.numeric = n;
                }
            }
        }
    }
    Ok(GradCheckReport { value, params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::row_vector(vec![0.5, -1.25, 2.0]));
        let w = Tensor::row_vector(vec![3.0, 0.25, -2.0]);
        let report = grad_check(
            &p,
            |tape, b| Ok(tape.readout(b.var("a"), w.clone())),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
        assert_eq!(report.skipped(), 0);
    }

    #[test]
    fn non_finite_output_is_numerical_error() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::row_vector(vec![f64::NAN]));
        let res = grad_check(&p, |tape, b| Ok(tape.readout(b.var("a"), Tensor::scalar(1.0))), DEFAULT_STEP);
        assert!(matches!(res, Err(Error::Numerical(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
