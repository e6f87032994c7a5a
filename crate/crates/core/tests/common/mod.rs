// SPDX-License-Identifier: Apache-2.0

//! Direct-summation reference implementations. Nothing here calls library
//! math; inputs and outputs are plain nested vectors.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn unit_rows<R: Rng>(rng: &mut R, k: usize, d: usize) -> Rows {
    (0..k)
        .map(|_| normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
        .collect()
}

/// `log(exp(s_pos) / sum_k exp(s_k))` term by term, shifted by the maximum.
fn log_ratio(pos: f64, all: &[f64]) -> f64 {
    let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = all.iter().map(|s| (s - m).exp()).sum();
    (pos - m) - denom.ln()
}

/// View-1 rich anchors against every view-2 row; all same-region rich rows
/// are positives, each anchor averaged over its own positive count.
pub fn plrc(z1: &Rows, z2: &Rows, region: &[i64], n: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = z2.iter().map(|k| dot(&z1[i], k) / tau).collect();
        let pos: Vec<usize> = (0..n).filter(|&j| region[j] == region[i]).collect();
        let mut inner = 0.0;
        for &j in &pos {
            inner += log_ratio(logits[j], &logits);
        }
        total += inner / pos.len() as f64;
    }
    -total / n as f64
}

/// `[p_i ; max over p's region]`, zero block for untagged rows, unit length.
pub fn concat_region(p: &Rows, region: &[i64]) -> Rows {
    let d = p[0].len();
    p.iter()
        .zip(region)
        .map(|(row, &r)| {
            let mut pooled = vec![0.0; d];
            if r >= 0 {
                pooled = vec![f64::NEG_INFINITY; d];
                for (other, &q) in p.iter().zip(region) {
                    if q == r {
                        for c in 0..d {
                            pooled[c] = pooled[c].max(other[c]);
                        }
                    }
                }
            }
            let mut full = row.clone();
            full.extend(pooled);
            normalize(&full)
        })
        .collect()
}

/// Index-matched single positive for each rich anchor.
pub fn rapc(p1: &Rows, p2: &Rows, n: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = p2.iter().map(|k| dot(&p1[i], k) / tau).collect();
        total += log_ratio(logits[i], &logits);
    }
    -total / n as f64
}

/// Region-weighted distillation loss; weight `1/(N_R N_S)` per row.
pub fn rad(c: &Rows, l: &Rows, region: &[usize], tau: f64, within_region: bool) -> f64 {
    let regions: BTreeSet<usize> = region.iter().copied().collect();
    let n_r = regions.len() as f64;
    let mut total = 0.0;
    for i in 0..c.len() {
        let n_s = region.iter().filter(|&&r| r == region[i]).count() as f64;
        let logits: Vec<f64> = (0..l.len())
            .filter(|&j| !within_region || region[j] == region[i])
            .map(|j| dot(&c[i], &l[j]) / tau)
            .collect();
        let pos = dot(&c[i], &l[i]) / tau;
        total += log_ratio(pos, &logits) / (n_r * n_s);
    }
    -total
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut k = i;
        while self.0[k] != r {
            let next = self.0[k];
            self.0[k] = r;
            k = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// O(n^2) reference: core points joined by union-find, clusters numbered by
/// their lowest core index, each border point given to the lowest-numbered
/// neighbouring cluster.
pub fn dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let near = |a: usize, b: usize| {
        let d: f64 = (0..3).map(|k| (points[a][k] - points[b][k]).powi(2)).sum();
        d <= eps * eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut uf = UnionFind((0..n).collect());
    for i in 0..n {
        for j in (i + 1)..n {
            if core[i] && core[j] && near(i, j) {
                uf.union(i, j);
            }
        }
    }
    let mut id_of_root = vec![-1i64; n];
    let mut next = 0;
    for i in 0..n {
        if core[i] {
            let r = uf.find(i);
            if id_of_root[r] < 0 {
                id_of_root[r] = next;
                next += 1;
            }
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                id_of_root[uf.find(i)]
            } else {
                (0..n)
                    .filter(|&j| core[j] && near(i, j))
                    .map(|j| id_of_root[uf.find(j)])
                    .min()
                    .unwrap_or(-1)
            }
        })
        .collect()
}

/// Cluster membership sets and the noise set of a labeling.
pub fn partition(labels: &[i64]) -> (BTreeSet<BTreeSet<usize>>, BTreeSet<usize>) {
    let mut clusters = std::collections::BTreeMap::<i64, BTreeSet<usize>>::new();
    let mut noise = BTreeSet::new();
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            noise.insert(i);
        } else {
            clusters.entry(l).or_default().insert(i);
        }
    }
    (clusters.into_values().collect(), noise)
}

/// Greedy one-to-one matching of predicted regions to true objects by
/// overlap, then the share of points where the two labelings agree,
/// counted over points that are an object point or a predicted region point.
pub fn matched_agreement(pred: &[i64], truth: &[i64]) -> f64 {
    let np = pred.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as usize;
    let nt = truth.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as usize;
    let mut overlap = vec![vec![0usize; nt]; np];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= 0 && t >= 0 {
            overlap[p as usize][t as usize] += 1;
        }
    }
    let mut pairs: Vec<(usize, usize, usize)> = (0..np)
        .flat_map(|p| (0..nt).map(move |t| (p, t)))
        .map(|(p, t)| (overlap[p][t], p, t))
        .filter(|&(o, _, _)| o > 0)
        .collect();
    pairs.sort_by(|a, b| b.cmp(a));
    let mut map = vec![-2i64; np];
    let mut used = vec![false; nt];
    for (_, p, t) in pairs {
        if map[p] == -2 && !used[t] {
            map[p] = t as i64;
            used[t] = true;
        }
    }
    let (mut agree, mut counted) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if p < 0 && t < 0 {
            continue;
        }
        counted += 1;
        let mapped = if p < 0 { -1 } else { map[p as usize] };
        if mapped == t {
            agree += 1;
        }
    }
    if counted == 0 {
        1.0
    } else {
        agree as f64 / counted as f64
    }
}

/// Number of points `matched_agreement` counts.
pub fn agreement_support(pred: &[i64], truth: &[i64]) -> usize {
    pred.iter().zip(truth).filter(|(p, t)| **p >= 0 || **t >= 0).count()
}
