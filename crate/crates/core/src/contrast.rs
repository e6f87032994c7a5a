// SPDX-License-Identifier: Apache-2.0

//! Point sampling, bilinear lookup and the point/region contrastive losses.
//!
//! Every loss here lowers to [`Tape::info_nce`]: one anchor row per term, a
//! list of weighted positive keys, and a key range for the softmax.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nnet::{
    dot, BatchStats, Bound, FeatureMap, InfoNceAnchor, MapVar, Mode, Projector, RunningStats, Tape, Tensor, Var,
};
use crate::pooling::TaggedPointCloud;
use crate::scenegen::Point3;
use crate::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub alpha: f64,
    pub n_rich: usize,
    pub n_less: usize,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    /// Average both anchoring directions instead of view-1 anchors only.
    pub symmetric: bool,
    /// Re-normalize `[p_i; p_r]` rows after concatenation.
    pub renormalize_concat: bool,
    /// Draw a transform for the first view too; otherwise it is the identity.
    pub augment_both_views: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            alpha: 0.5,
            n_rich: 64,
            n_less: 64,
            proj_dim: 128,
            proj_hidden: 256,
            symmetric: false,
            renormalize_concat: true,
            augment_both_views: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if self.n_rich < 1 {
            return Err(Error::config("n_rich", "must be >= 1"));
        }
        if self.n_less < 1 {
            return Err(Error::config("n_less", "must be >= 1"));
        }
        if self.proj_dim < 1 {
            return Err(Error::config("proj_dim", "must be >= 1"));
        }
        if self.proj_hidden < 1 {
            return Err(Error::config("proj_hidden", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSet {
    /// First `n_rich` entries are semantic-rich, the rest semantic-less.
    pub indices: Vec<usize>,
    pub region_of: Vec<i64>,
    pub n_rich: usize,
    pub coords_view1: Vec<(f64, f64)>,
    pub coords_view2: Vec<(f64, f64)>,
    pub rich_with_replacement: bool,
    pub less_with_replacement: bool,
}

impl SampledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_less(&self) -> usize {
        self.len() - self.n_rich
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> (Vec<usize>, bool) {
    if k <= pool.len() {
        let picks = index::sample(rng, pool.len(), k);
        (picks.iter().map(|i| pool[i]).collect(), false)
    } else {
        ((0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect(), true)
    }
}

/// `views` hold the two augmented copies of `tpc.points`, index-aligned.
pub fn sample_points<R: Rng + ?Sized>(
    tpc: &TaggedPointCloud,
    views: [&[Point3]; 2],
    n_rich: usize,
    n_less: usize,
    rng: &mut R,
) -> Result<SampledSet> {
    let n_regions = tpc.n_regions();
    if n_regions == 0 {
        return Err(Error::NoRegions);
    }
    for v in views {
        if v.len() != tpc.len() {
            return Err(Error::Contract(format!(
                "view has {} points, cloud has {}",
                v.len(),
                tpc.len()
            )));
        }
    }
    let offset = rng.random_range(0..n_regions);
    let region_at = |k: usize| (offset + k) % n_regions;
    let mut quota = vec![0usize; n_regions];
    for k in 0..n_rich {
        quota[region_at(k)] += 1;
    }
    let mut rich_with_replacement = false;
    let mut queues: Vec<std::vec::IntoIter<usize>> = Vec::with_capacity(n_regions);
    for (r, &q) in quota.iter().enumerate() {
        let (picks, repl) = draw(rng, &tpc.region_index[r], q);
        rich_with_replacement |= repl;
        queues.push(picks.into_iter());
    }
    let mut indices = Vec::with_capacity(n_rich + n_less);
    let mut region_of = Vec::with_capacity(n_rich + n_less);
    for k in 0..n_rich {
        let r = region_at(k);
        indices.push(queues[r].next().expect("quota covers every draw"));
        region_of.push(r as i64);
    }
    let less_pool = tpc.semantic_less();
    let mut less_with_replacement = false;
    if less_pool.is_empty() {
        log::warn!("no semantic-less points; sampling without negatives beyond the rich set");
    } else {
        let (picks, repl) = draw(rng, &less_pool, n_less);
        less_with_replacement = repl;
        region_of.extend(std::iter::repeat_n(-1, picks.len()));
        indices.extend(picks);
    }
    let coords = |pts: &[Point3]| indices.iter().map(|&i| (pts[i].x, pts[i].y)).collect();
    Ok(SampledSet {
        coords_view1: coords(views[0]),
        coords_view2: coords(views[1]),
        indices,
        region_of,
        n_rich,
        rich_with_replacement,
        less_with_replacement,
    })
}

/// Returns the interpolated vector and whether the query was clamped.
pub fn bilinear_interpolate(fm: &FeatureMap, x: f64, y: f64) -> (Vec<f64>, bool) {
    let (tap, clamped) = fm.grid.bilinear_tap(x, y);
    let mut out = vec![0.0; fm.values.cols()];
    for (&cell, &w) in tap.cells.iter().zip(&tap.weights) {
        for (o, v) in out.iter_mut().zip(fm.values.row(cell)) {
            *o += w * v;
        }
    }
    (out, clamped)
}

/// Taped lookup of one row per coordinate; also returns the clamp count.
pub fn interpolate_rows(tape: &mut Tape, map: &MapVar, coords: &[(f64, f64)]) -> (Var, usize) {
    let mut clamped = 0;
    let taps = coords
        .iter()
        .map(|&(x, y)| {
            let (t, c) = map.grid.bilinear_tap(x, y);
            clamped += usize::from(c);
            t
        })
        .collect();
    (tape.bilinear(map.var, taps), clamped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub rows: Tensor,
    pub provenance: String,
}

impl EmbeddingBatch {
    pub fn new(rows: Tensor, provenance: impl Into<String>) -> Result<Self> {
        for r in 0..rows.rows() {
            let n = dot(rows.row(r), rows.row(r)).sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Contract(format!("embedding row {r} has norm {n}")));
            }
        }
        Ok(Self {
            rows,
            provenance: provenance.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub gradients: BTreeMap<String, Tensor>,
}

/// Per-region member rows of the rich block, regions in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGroups {
    pub regions: Vec<i64>,
    pub members: Vec<Vec<usize>>,
    /// Group slot of every sample row, `None` for semantic-less rows.
    pub slot_of: Vec<Option<usize>>,
}

pub fn region_groups(region_of: &[i64]) -> RegionGroups {
    let mut by_region: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &r) in region_of.iter().enumerate() {
        if r >= 0 {
            by_region.entry(r).or_default().push(i);
        }
    }
    let regions: Vec<i64> = by_region.keys().copied().collect();
    let slot_of = region_of
        .iter()
        .map(|&r| (r >= 0).then(|| regions.binary_search(&r).expect("region present")))
        .collect();
    RegionGroups {
        regions,
        members: by_region.into_values().collect(),
        slot_of,
    }
}

fn check_rich_prefix(region_of: &[i64], n_rich: usize) -> Result<()> {
    if n_rich == 0 || n_rich > region_of.len() {
        return Err(Error::Contract(format!(
            "need 1..={} rich rows, got {n_rich}",
            region_of.len()
        )));
    }
    if region_of[..n_rich].iter().any(|&r| r < 0) || region_of[n_rich..].iter().any(|&r| r >= 0) {
        return Err(Error::Contract("rich rows must come first and carry region ids".into()));
    }
    Ok(())
}

/// Taped point-level region contrast; `z1` rows anchor, `z2` rows are keys.
pub fn plrc_term(tape: &mut Tape, z1: Var, z2: Var, region_of: &[i64], n_rich: usize, tau: f64) -> Result<Var> {
    check_rich_prefix(region_of, n_rich)?;
    let groups = region_groups(&region_of[..n_rich]);
    let terms = (0..n_rich)
        .map(|i| {
            let members = &groups.members[groups.slot_of[i].expect("rich row")];
            let w = 1.0 / (n_rich as f64 * members.len() as f64);
            InfoNceAnchor {
                row: i,
                positives: members.iter().map(|&j| (j, w)).collect(),
                denominator: None,
            }
        })
        .collect();
    tape.info_nce(z1, z2, terms, tau)
}

/// Taped region-aware point contrast with index-matched positives.
pub fn rapc_term(tape: &mut Tape, p1: Var, p2: Var, n_rich: usize, tau: f64) -> Result<Var> {
    let w = 1.0 / n_rich as f64;
    let terms = (0..n_rich)
        .map(|i| InfoNceAnchor {
            row: i,
            positives: vec![(i, w)],
            denominator: None,
        })
        .collect();
    tape.info_nce(p1, p2, terms, tau)
}

/// Channel-wise max of each region's rich rows.
pub fn region_maxpool_var(tape: &mut Tape, p: Var, region_of: &[i64]) -> (Var, RegionGroups) {
    let groups = region_groups(region_of);
    (tape.segment_max(p, &groups.members), groups)
}

/// `[p_i; p_r(i)]` rows, zero region block for semantic-less rows.
pub fn rapc_rows(tape: &mut Tape, p: Var, region_of: &[i64], renormalize: bool) -> Var {
    let (pooled, groups) = region_maxpool_var(tape, p, region_of);
    let spread = tape.gather_rows(pooled, groups.slot_of);
    let cat = tape.concat_cols(p, spread);
    if renormalize {
        tape.l2_normalize_rows(cat)
    } else {
        cat
    }
}

/// Untaped max-pool; returns the region ids alongside their rows.
pub fn region_maxpool(p: &Tensor, region_of: &[i64]) -> (Tensor, Vec<i64>) {
    let mut tape = Tape::new();
    let v = tape.constant(p.clone());
    let (out, groups) = region_maxpool_var(&mut tape, v, region_of);
    (tape.value(out).clone(), groups.regions)
}

fn check_aligned(a: &EmbeddingBatch, b: &EmbeddingBatch, sample: &SampledSet) -> Result<()> {
    if a.rows.shape() != b.rows.shape() || a.rows.rows() != sample.len() {
        return Err(Error::Contract(format!(
            "batches {:?} and {:?} do not align with {} samples",
            a.rows.shape(),
            b.rows.shape(),
            sample.len()
        )));
    }
    Ok(())
}

fn evaluate(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    build: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<LossResult> {
    let mut tape = Tape::new();
    let va = tape.param(a.rows.clone());
    let vb = tape.param(b.rows.clone());
    let loss = build(&mut tape, va, vb)?;
    let grads = tape.backward(loss);
    let mut gradients = BTreeMap::new();
    gradients.insert(a.provenance.clone(), grads.wrt(va));
    gradients.insert(b.provenance.clone(), grads.wrt(vb));
    Ok(LossResult {
        value: tape.scalar(loss),
        gradients,
    })
}

/// Gradients are keyed by each batch's provenance label.
pub fn plrc_loss(z1: &EmbeddingBatch, z2: &EmbeddingBatch, sample: &SampledSet, tau: f64) -> Result<LossResult> {
    check_aligned(z1, z2, sample)?;
    evaluate(z1, z2, |t, a, b| plrc_term(t, a, b, &sample.region_of, sample.n_rich, tau))
}

/// Expects rows already in concatenated `[p_i; p_r]` form.
pub fn rapc_loss(p1: &EmbeddingBatch, p2: &EmbeddingBatch, sample: &SampledSet, tau: f64) -> Result<LossResult> {
    check_aligned(p1, p2, sample)?;
    evaluate(p1, p2, |t, a, b| rapc_term(t, a, b, sample.n_rich, tau))
}

/// A projector with its bound parameters and eval-mode statistics.
#[derive(Clone, Copy)]
pub struct Branch<'a> {
    pub projector: &'a Projector,
    pub params: &'a Bound,
    pub running: &'a RunningStats,
}

#[derive(Debug, Clone)]
pub struct PrcOutput {
    pub loss: Var,
    pub plrc: Var,
    pub rapc: Var,
    /// Batch statistics per view, in view order.
    pub plrc_stats: Vec<BatchStats>,
    pub rapc_stats: Vec<BatchStats>,
    pub pos_sim_mean: f64,
    pub neg_sim_mean: f64,
    pub clamped: usize,
}

fn similarity_summary(z1: &Tensor, z2: &Tensor, region_of: &[i64], n_rich: usize) -> (f64, f64) {
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n_rich {
        for (k, &rk) in region_of.iter().enumerate() {
            let s = dot(z1.row(i), z2.row(k));
            if rk == region_of[i] {
                pos += s;
                npos += 1;
            } else {
                neg += s;
                nneg += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(pos, npos), mean(neg, nneg))
}

fn directed<F>(tape: &mut Tape, a: Var, b: Var, symmetric: bool, mut f: F) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, Var) -> Result<Var>,
{
    let fwd = f(tape, a, b)?;
    if !symmetric {
        return Ok(fwd);
    }
    let back = f(tape, b, a)?;
    Ok(tape.weighted_sum(&[(fwd, 0.5), (back, 0.5)]))
}

/// Blended objective on the two views' LiDAR maps, projectors in train mode.
pub fn prc_loss(
    tape: &mut Tape,
    maps: [&MapVar; 2],
    sample: &SampledSet,
    plrc: Branch<'_>,
    rapc: Branch<'_>,
    cfg: &ContrastConfig,
) -> Result<PrcOutput> {
    check_rich_prefix(&sample.region_of, sample.n_rich)?;
    let (f1, c1) = interpolate_rows(tape, maps[0], &sample.coords_view1);
    let (f2, c2) = interpolate_rows(tape, maps[1], &sample.coords_view2);
    let mut project = |b: Branch<'_>, x: Var| -> Result<(Var, BatchStats)> {
        let (v, s) = b.projector.forward(tape, b.params, x, Mode::Train, b.running, true)?;
        Ok((v, s.expect("train mode reports statistics")))
    };
    let (z1, sz1) = project(plrc, f1)?;
    let (z2, sz2) = project(plrc, f2)?;
    let (q1, sq1) = project(rapc, f1)?;
    let (q2, sq2) = project(rapc, f2)?;

    let (n, tau) = (sample.n_rich, cfg.tau);
    let region_of = &sample.region_of;
    let l_plrc = directed(tape, z1, z2, cfg.symmetric, |t, a, b| plrc_term(t, a, b, region_of, n, tau))?;
    let p1 = rapc_rows(tape, q1, region_of, cfg.renormalize_concat);
    let p2 = rapc_rows(tape, q2, region_of, cfg.renormalize_concat);
    let l_rapc = directed(tape, p1, p2, cfg.symmetric, |t, a, b| rapc_term(t, a, b, n, tau))?;
    let loss = tape.weighted_sum(&[(l_plrc, cfg.alpha), (l_rapc, 1.0 - cfg.alpha)]);
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numerical(format!("PRC loss is {}", tape.scalar(loss))));
    }
    let (pos_sim_mean, neg_sim_mean) = similarity_summary(tape.value(z1), tape.value(z2), region_of, n);
    Ok(PrcOutput {
        loss,
        plrc: l_plrc,
        rapc: l_rapc,
        plrc_stats: vec![sz1, sz2],
        rapc_stats: vec![sq1, sq2],
        pos_sim_mean,
        neg_sim_mean,
        clamped: c1 + c2,
    })
}
