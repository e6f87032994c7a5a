// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode gradient tape over the fixed set of primitives the encoders,
//! projectors and contrastive losses are built from.
//!
//! Nodes are appended after their inputs, so node order is a topological
//! order and the reverse sweep simply walks indices downwards. Each node keeps
//! its forward value plus whatever the primitive needs for its pullback.
//!
//! Non-smooth primitives (`relu`, the max reductions) fold their branch
//! decisions into [`Tape::branch_signature`]. Finite-difference checks use it
//! to tell when a perturbation crossed a kink.

use super::tensor::{dot, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Four-cell bilinear stencil: output row = `sum_k weights[k] * fm[cells[k]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTap {
    pub cells: [usize; 4],
    pub weights: [f64; 4],
}

/// One anchor row of a contrastive term.
///
/// Contributes `sum_(j, w) w * (logsumexp_{k in D} s_k - s_j)` with
/// `s_k = anchor . key_k / tau`, where `D` is `denominator` (all keys when
/// `None`) and `(j, w)` range over `positives`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceAnchor {
    pub row: usize,
    pub positives: Vec<(usize, f64)>,
    pub denominator: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-B) batch variance.
    pub var: Vec<f64>,
}

const EMPTY: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf {
        trainable: bool,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch: bool,
    },
    L2Rows {
        x: Var,
        norms: Vec<f64>,
    },
    ScatterMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv3x3 {
        x: Var,
        kernel: Var,
        bias: Var,
        height: usize,
        width: usize,
    },
    Bilinear {
        fm: Var,
        taps: Vec<BilinearTap>,
    },
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    InfoNce {
        anchors: Var,
        keys: Var,
        terms: Vec<InfoNceAnchor>,
        probs: Tensor,
        tau: f64,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    Readout {
        x: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    branches: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_scalar()
    }

    /// Hash of every branch decision taken by non-smooth primitives so far.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    pub fn is_trainable_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { trainable: true })
    }

    fn mix(&mut self, word: u64) {
        for byte in word.to_le_bytes() {
            self.branches ^= u64::from(byte);
            self.branches = self.branches.wrapping_mul(FNV_PRIME);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    /// Stop-gradient: a new constant leaf holding a copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul inner dimensions differ");
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let arow = av.row(i);
            let orow = out.row_mut(i);
            for (l, &a_il) in arow.iter().enumerate().take(k) {
                if a_il == 0.0 {
                    continue;
                }
                for (o, &b_lj) in orow.iter_mut().zip(bv.row(l)) {
                    *o += a_il * b_lj;
                }
            }
        }
        self.push(out, Op::MatMul { a, b })
    }

    /// Adds a `1 x m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow { x, bias })
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.map(|v| v.max(0.0));
        let mut word = 0u64;
        let mut bits = Vec::with_capacity(xv.len() / 64 + 1);
        for (i, &v) in xv.data().iter().enumerate() {
            if v > 0.0 {
                word |= 1 << (i % 64);
            }
            if i % 64 == 63 {
                bits.push(word);
                word = 0;
            }
        }
        bits.push(word);
        for w in bits {
            self.mix(w);
        }
        self.push(out, Op::Relu { x })
    }

    /// Train-mode batch normalization over rows.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (b, c) = xv.shape();
        assert!(b >= 1);
        let mut mean = vec![0.0; c];
        for i in 0..b {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; c];
        for i in 0..b {
            for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(b, c, |i, j| (xv.get(i, j) - mean[j]) * inv_std[j]);
        let out = self.affine_cols(&xhat, gamma, beta);
        let stats = BatchStats { mean, var };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: true,
            },
        );
        (v, stats)
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let xv = self.value(x);
        let (b, c) = xv.shape();
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(b, c, |i, j| (xv.get(i, j) - mean[j]) * inv_std[j]);
        let out = self.affine_cols(&xhat, gamma, beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: false,
            },
        )
    }

    fn affine_cols(&self, xhat: &Tensor, gamma: Var, beta: Var) -> Tensor {
        let (g, bt) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, xhat.cols()));
        assert_eq!(bt.shape(), (1, xhat.cols()));
        Tensor::from_fn(xhat.rows(), xhat.cols(), |i, j| g.data()[j] * xhat.get(i, j) + bt.data()[j])
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = dot(xv.row(i), xv.row(i)).sqrt().max(1e-12);
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2Rows { x, norms })
    }

    /// Channel-wise max of the rows of `x` assigned to each of `n_groups`
    /// groups; empty groups produce zeros. Ties keep the lowest row index.
    pub fn scatter_max(&mut self, x: Var, group_of: &[Option<usize>], n_groups: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(group_of.len(), xv.rows());
        let c = xv.cols();
        let mut argmax = vec![EMPTY; n_groups * c];
        for (r, g) in group_of.iter().enumerate() {
            let Some(g) = *g else { continue };
            for ch in 0..c {
                let slot = &mut argmax[g * c + ch];
                if *slot == EMPTY || xv.get(r, ch) > xv.get(*slot, ch) {
                    *slot = r;
                }
            }
        }
        let out = Tensor::from_fn(n_groups, c, |g, ch| match argmax[g * c + ch] {
            EMPTY => 0.0,
            r => xv.get(r, ch),
        });
        for &a in &argmax {
            self.mix(a as u64);
        }
        self.push(out, Op::ScatterMax { x, argmax })
    }

    /// Channel-wise max over explicit row groups; every group must be nonempty.
    pub fn segment_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let rows = self.value(x).rows();
        let mut group_of = vec![None; rows];
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "segment {g} is empty");
            for &r in members {
                assert!(group_of[r].is_none(), "row {r} in two segments");
                group_of[r] = Some(g);
            }
        }
        self.scatter_max(x, &group_of, groups.len())
    }

    /// 3x3 convolution with zero padding over an `height x width` grid whose
    /// cells are the rows of `x` (row-major). `kernel` is `(9 * c_in) x c_out`
    /// with tap `t = (di + 1) * 3 + (dj + 1)` occupying rows `t*c_in..`.
    pub fn conv3x3(&mut self, x: Var, kernel: Var, bias: Var, height: usize, width: usize) -> Var {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let c_in = xv.cols();
        let c_out = kv.cols();
        assert_eq!(xv.rows(), height * width, "conv input rows");
        assert_eq!(kv.rows(), 9 * c_in, "conv kernel rows");
        assert_eq!(bv.shape(), (1, c_out), "conv bias shape");
        let mut out = Tensor::zeros(height * width, c_out);
        for i in 0..height {
            for j in 0..width {
                let o = i * width + j;
                let orow = out.row_mut(o);
                orow.copy_from_slice(bv.data());
                for_each_tap(i, j, height, width, |t, nb| {
                    for (ci, &xval) in xv.row(nb).iter().enumerate() {
                        if xval == 0.0 {
                            continue;
                        }
                        for (ov, &k) in orow.iter_mut().zip(kv.row(t * c_in + ci)) {
                            *ov += xval * k;
                        }
                    }
                });
            }
        }
        self.push(
            out,
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                height,
                width,
            },
        )
    }

    pub fn bilinear(&mut self, fm: Var, taps: Vec<BilinearTap>) -> Var {
        let fv = self.value(fm);
        let c = fv.cols();
        let mut out = Tensor::zeros(taps.len(), c);
        for (q, tap) in taps.iter().enumerate() {
            let orow = out.row_mut(q);
            for k in 0..4 {
                let w = tap.weights[k];
                for (o, v) in orow.iter_mut().zip(fv.row(tap.cells[k])) {
                    *o += w * v;
                }
            }
        }
        self.push(out, Op::Bilinear { fm, taps })
    }

    /// Row `r` of the output is `x[index[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                out.row_mut(r).copy_from_slice(xv.row(s));
            }
        }
        self.push(out, Op::GatherRows { x, index })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat row counts");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Tensor::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            out.row_mut(r)[..ca].copy_from_slice(av.row(r));
            out.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols { a, b })
    }

    /// Weighted InfoNCE family loss (scalar). Log-sum-exp uses max shifting.
    pub fn info_nce(&mut self, anchors: Var, keys: Var, terms: Vec<InfoNceAnchor>, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        let (av, kv) = (self.value(anchors), self.value(keys));
        assert_eq!(av.cols(), kv.cols(), "anchor and key widths differ");
        let n_keys = kv.rows();
        let mut probs = Tensor::zeros(terms.len(), n_keys);
        let mut total = 0.0;
        let mut logits = vec![0.0; n_keys];
        let all: Vec<usize> = (0..n_keys).collect();
        for (t, term) in terms.iter().enumerate() {
            let a = av.row(term.row);
            let denom = term.denominator.as_deref().unwrap_or(&all);
            if denom.is_empty() {
                return Err(Error::Contract("empty denominator set".into()));
            }
            let mut max = f64::NEG_INFINITY;
            for &k in denom {
                let s = dot(a, kv.row(k)) / tau;
                logits[k] = s;
                max = max.max(s);
            }
            let sum: f64 = denom.iter().map(|&k| (logits[k] - max).exp()).sum();
            let lse = max + sum.ln();
            let prow = probs.row_mut(t);
            for &k in denom {
                prow[k] = (logits[k] - lse).exp();
            }
            for &(j, w) in &term.positives {
                if term.denominator.as_ref().is_some_and(|d| !d.contains(&j)) {
                    return Err(Error::Contract(format!("positive key {j} outside its denominator")));
                }
                total += w * (lse - logits[j]);
            }
        }
        if !total.is_finite() {
            return Err(Error::Numerical(format!("contrastive loss is {total}")));
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::InfoNce {
                anchors,
                keys,
                terms,
                probs,
                tau,
            },
        ))
    }

    /// `sum_k c_k * x_k` for same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted sum of nothing");
        let shape = self.value(terms[0].0).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for &(v, c) in terms {
            let xv = self.value(v);
            assert_eq!(xv.shape(), shape, "weighted sum shapes differ");
            for (o, x) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += c * x;
            }
        }
        self.push(out, Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Scalar `sum(weights * x)`.
    pub fn readout(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "readout weight shape");
        let s = dot(xv.data(), weights.data());
        self.push(Tensor::scalar(s), Op::Readout { x, weights })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let da = acc(&mut grads, *a, av);
                    for i in 0..n {
                        let grow = g.row(i);
                        for l in 0..k {
                            da.data_mut()[i * k + l] += dot(grow, bv.row(l));
                        }
                    }
                    let db = acc(&mut grads, *b, bv);
                    for i in 0..n {
                        let arow = av.row(i);
                        let grow = g.row(i);
                        for (l, &a_il) in arow.iter().enumerate() {
                            if a_il == 0.0 {
                                continue;
                            }
                            let drow = &mut db.data_mut()[l * m..(l + 1) * m];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += a_il * gv;
                            }
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    acc(&mut grads, *x, &g).add_assign(&g);
                    let db = acc(&mut grads, *bias, self.value(*bias));
                    for i in 0..g.rows() {
                        for (d, gv) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let dx = acc(&mut grads, *x, xv);
                    for ((d, gv), xval) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *xval > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let (b, c) = xhat.shape();
                    let gam = self.value(*gamma).data().to_vec();
                    let dg = acc(&mut grads, *gamma, self.value(*gamma));
                    for i in 0..b {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    let dbt = acc(&mut grads, *beta, self.value(*beta));
                    for i in 0..b {
                        for j in 0..c {
                            dbt.data_mut()[j] += g.get(i, j);
                        }
                    }
                    let dx = acc(&mut grads, *x, self.value(*x));
                    if *batch {
                        let bf = b as f64;
                        for j in 0..c {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for i in 0..b {
                                let d = g.get(i, j) * gam[j];
                                sum_d += d;
                                sum_dx += d * xhat.get(i, j);
                            }
                            for i in 0..b {
                                let d = g.get(i, j) * gam[j];
                                dx.data_mut()[i * c + j] +=
                                    inv_std[j] / bf * (bf * d - sum_d - xhat.get(i, j) * sum_dx);
                            }
                        }
                    } else {
                        for i in 0..b {
                            for j in 0..c {
                                dx.data_mut()[i * c + j] += g.get(i, j) * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
                Op::L2Rows { x, norms } => {
                    let y = &node.value;
                    let dx = acc(&mut grads, *x, self.value(*x));
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let yg = dot(yr, gr);
                        let drow = dx.row_mut(i);
                        for ((d, &gv), &yv) in drow.iter_mut().zip(gr).zip(yr) {
                            *d += (gv - yv * yg) / n;
                        }
                    }
                }
                Op::ScatterMax { x, argmax } => {
                    let c = g.cols();
                    let dx = acc(&mut grads, *x, self.value(*x));
                    for (slot, &r) in argmax.iter().enumerate() {
                        if r != EMPTY {
                            let (grp, ch) = (slot / c, slot % c);
                            dx.data_mut()[r * c + ch] += g.get(grp, ch);
                        }
                    }
                }
                Op::Conv3x3 {
                    x,
                    kernel,
                    bias,
                    height,
                    width,
                } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernel));
                    let c_in = xv.cols();
                    let c_out = kv.cols();
                    let db = acc(&mut grads, *bias, self.value(*bias));
                    for o in 0..g.rows() {
                        for (d, gv) in db.data_mut().iter_mut().zip(g.row(o)) {
                            *d += gv;
                        }
                    }
                    let mut dk = Tensor::zeros(kv.rows(), c_out);
                    let mut dxx = Tensor::zeros(xv.rows(), c_in);
                    for i in 0..*height {
                        for j in 0..*width {
                            let grow = g.row(i * width + j);
                            for_each_tap(i, j, *height, *width, |t, nb| {
                                let xrow = xv.row(nb);
                                for ci in 0..c_in {
                                    let krow = kv.row(t * c_in + ci);
                                    let xval = xrow[ci];
                                    if xval != 0.0 {
                                        for (d, gv) in dk.row_mut(t * c_in + ci).iter_mut().zip(grow) {
                                            *d += xval * gv;
                                        }
                                    }
                                    dxx.data_mut()[nb * c_in + ci] += dot(krow, grow);
                                }
                            });
                        }
                    }
                    acc(&mut grads, *kernel, kv).add_assign(&dk);
                    acc(&mut grads, *x, xv).add_assign(&dxx);
                }
                Op::Bilinear { fm, taps } => {
                    let dfm = acc(&mut grads, *fm, self.value(*fm));
                    for (q, tap) in taps.iter().enumerate() {
                        let grow = g.row(q);
                        for k in 0..4 {
                            let w = tap.weights[k];
                            if w == 0.0 {
                                continue;
                            }
                            for (d, gv) in dfm.row_mut(tap.cells[k]).iter_mut().zip(grow) {
                                *d += w * gv;
                            }
                        }
                    }
                }
                Op::GatherRows { x, index } => {
                    let dx = acc(&mut grads, *x, self.value(*x));
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            for (d, gv) in dx.row_mut(s).iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.value(*a).cols();
                    let da = acc(&mut grads, *a, self.value(*a));
                    for r in 0..g.rows() {
                        for (d, gv) in da.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *d += gv;
                        }
                    }
                    let db = acc(&mut grads, *b, self.value(*b));
                    for r in 0..g.rows() {
                        for (d, gv) in db.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                            *d += gv;
                        }
                    }
                }
                Op::InfoNce {
                    anchors,
                    keys,
                    terms,
                    probs,
                    tau,
                } => {
                    let upstream = g.as_scalar();
                    let (av, kv) = (self.value(*anchors), self.value(*keys));
                    let n_keys = kv.rows();
                    let width = av.cols();
                    let mut da = Tensor::zeros(av.rows(), width);
                    let mut dk = Tensor::zeros(n_keys, width);
                    let mut coef = vec![0.0; n_keys];
                    for (t, term) in terms.iter().enumerate() {
                        let mass: f64 = term.positives.iter().map(|&(_, w)| w).sum();
                        let prow = probs.row(t);
                        for (c, &p) in coef.iter_mut().zip(prow) {
                            *c = mass * p;
                        }
                        for &(j, w) in &term.positives {
                            coef[j] -= w;
                        }
                        let arow = av.row(term.row);
                        let darow = da.row_mut(term.row);
                        for (k, &c) in coef.iter().enumerate() {
                            if c == 0.0 {
                                continue;
                            }
                            let s = upstream * c / tau;
                            for (d, kvv) in darow.iter_mut().zip(kv.row(k)) {
                                *d += s * kvv;
                            }
                            for (d, avv) in dk.row_mut(k).iter_mut().zip(arow) {
                                *d += s * avv;
                            }
                        }
                    }
                    acc(&mut grads, *anchors, av).add_assign(&da);
                    acc(&mut grads, *keys, kv).add_assign(&dk);
                }
                Op::WeightedSum { terms } => {
                    for &(v, c) in terms {
                        let d = acc(&mut grads, v, self.value(v));
                        for (dv, gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *dv += c * gv;
                        }
                    }
                }
                Op::Readout { x, weights } => {
                    let s = g.as_scalar();
                    let d = acc(&mut grads, *x, self.value(*x));
                    for (dv, w) in d.data_mut().iter_mut().zip(weights.data()) {
                        *dv += s * w;
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

fn for_each_tap(i: usize, j: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize)) {
    for di in -1i64..=1 {
        let ii = i as i64 + di;
        if ii < 0 || ii >= height as i64 {
            continue;
        }
        for dj in -1i64..=1 {
            let jj = j as i64 + dj;
            if jj < 0 || jj >= width as i64 {
                continue;
            }
            let t = ((di + 1) * 3 + (dj + 1)) as usize;
            f(t, ii as usize * width + jj as usize);
        }
    }
}

/// Result of a reverse sweep. Nodes the output does not depend on have
/// exactly-zero gradients.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Whether any gradient reached `v` during the sweep.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
