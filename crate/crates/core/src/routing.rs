//! Similarity routing.
//!
//! Temporal routing marks a boundary where a token is dissimilar to its
//! predecessor; multimodal routing keeps the tokens of one stream that agree
//! with the time-aligned token of another. Both produce per-position
//! probabilities `p` and bits `b` with the first bit always set.
//!
//! Plain functions evaluate the definitions directly on tensors. The
//! `*_probs` functions build the same quantities on a [`Graph`] so that the
//! projections receive gradients.

use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{orthogonal, Rng};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    Euclidean,
    DotProduct,
}

impl FromStr for SimilarityMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            "dot" | "dot_product" => Ok(Self::DotProduct),
            _ => Err(Error::invalid(alloc::format!("unknown similarity metric `{s}`"))),
        }
    }
}

impl SimilarityMetric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Euclidean => "euclidean",
            Self::DotProduct => "dot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingKind {
    Temporal,
    Mm,
}

/// Which quantity the temporal threshold is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TemporalRule {
    /// `b = 1{p ≥ τ}`.
    #[default]
    Probability,
    /// `b = 1{sim(q_ℓ, k_{ℓ−1}) ≥ τ}`.
    Similarity,
}

impl TemporalRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::Probability => "prob",
            Self::Similarity => "sim",
        }
    }
}

impl FromStr for TemporalRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" | "probability" => Ok(Self::Probability),
            "sim" | "similarity" => Ok(Self::Similarity),
            _ => Err(Error::invalid(alloc::format!("unknown temporal rule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub p: Vec<f64>,
    pub b: Vec<bool>,
    pub kind: RoutingKind,
}

impl RoutingDecision {
    /// Builds a decision, forcing the first bit.
    pub fn new(p: Vec<f64>, mut b: Vec<bool>, kind: RoutingKind) -> Result<Self> {
        if p.is_empty() || p.len() != b.len() {
            return Err(Error::shape("RoutingDecision", &[p.len()], &[b.len()]));
        }
        if p.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "RoutingDecision(p)" });
        }
        if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain { op: "RoutingDecision(p)", index: i });
        }
        b[0] = true;
        Ok(Self { p, b, kind })
    }

    /// Every position selected, with `p = 1`.
    pub fn all(len: usize, kind: RoutingKind) -> Self {
        Self {
            p: vec![1.0; len],
            b: vec![true; len],
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.b.iter().filter(|&&b| b).count()
    }
}

pub fn selection_ratio(decision: &RoutingDecision) -> f64 {
    decision.selected_count() as f64 / decision.len() as f64
}

pub fn similarity(q: &[f64], k: &[f64], metric: SimilarityMetric) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::shape("similarity", &[q.len()], &[k.len()]));
    }
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    Ok(match metric {
        SimilarityMetric::Cosine => {
            let nq = libm::sqrt(q.iter().map(|v| v * v).sum());
            let nk = libm::sqrt(k.iter().map(|v| v * v).sum());
            if nq < NORM_FLOOR || nk < NORM_FLOOR {
                0.0
            } else {
                dot / (nq * nk)
            }
        }
        SimilarityMetric::Euclidean => {
            let d2: f64 = q.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum();
            1.0 / (1.0 + libm::sqrt(d2))
        }
        SimilarityMetric::DotProduct => dot,
    })
}

/// 0-based aligned index into a stream of length `len_dst` for position `i`
/// of a stream of length `len_src`.
pub fn cross_index(i: usize, len_src: usize, len_dst: usize) -> usize {
    let pos = libm::round((i as f64 + 0.5) * len_dst as f64 / len_src as f64) as usize;
    pos.clamp(1, len_dst) - 1
}

pub fn cross_indices(len_src: usize, len_dst: usize) -> Vec<usize> {
    (0..len_src).map(|i| cross_index(i, len_src, len_dst)).collect()
}

fn project(x: &Tensor, w: &Tensor, op: &'static str) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    x.matmul(w)
}

pub fn temporal_route(x: &Tensor, wq: &Tensor, wk: &Tensor, tau: f64) -> Result<RoutingDecision> {
    temporal_route_with(x, wq, wk, tau, SimilarityMetric::Cosine, TemporalRule::Probability)
}

/// Temporal routing with `q = X·Wq`, `k = X·Wk`.
pub fn temporal_route_with(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    tau: f64,
    metric: SimilarityMetric,
    rule: TemporalRule,
) -> Result<RoutingDecision> {
    let q = project(x, wq, "temporal_route")?;
    let k = project(x, wk, "temporal_route")?;
    let l = q.rows();
    let mut p = vec![1.0; l];
    let mut b = vec![true; l];
    for i in 1..l {
        let s = similarity(q.row(i), k.row(i - 1), metric)?;
        p[i] = (0.5 * (1.0 - s)).clamp(0.0, 1.0);
        b[i] = match rule {
            TemporalRule::Probability => p[i] >= tau,
            TemporalRule::Similarity => s >= tau,
        };
    }
    RoutingDecision::new(p, b, RoutingKind::Temporal)
}

pub fn mm_route(xm: &Tensor, xm2: &Tensor, wq: &Tensor, wk: &Tensor, tau: f64) -> Result<RoutingDecision> {
    mm_route_with(xm, xm2, wq, wk, tau, SimilarityMetric::Cosine)
}

/// Multimodal routing of `xm` against the aligned tokens of `xm2`.
pub fn mm_route_with(
    xm: &Tensor,
    xm2: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    tau: f64,
    metric: SimilarityMetric,
) -> Result<RoutingDecision> {
    let q = project(xm, wq, "mm_route")?;
    let k = project(xm2, wk, "mm_route")?;
    if q.cols() != k.cols() {
        return Err(Error::shape("mm_route", q.shape(), k.shape()));
    }
    let (l, l2) = (q.rows(), k.rows());
    let mut p = vec![0.0; l];
    let mut b = vec![false; l];
    for i in 0..l {
        let s = similarity(q.row(i), k.row(cross_index(i, l, l2)), metric)?;
        p[i] = (0.5 * (1.0 + s)).clamp(0.0, 1.0);
        b[i] = s >= tau;
    }
    RoutingDecision::new(p, b, RoutingKind::Mm)
}

/// Row-wise similarity of two `L × D` traced tensors, giving `L × 1`.
pub fn similarity_rows(g: &mut Graph, q: Var, k: Var, metric: SimilarityMetric) -> Result<Var> {
    match metric {
        SimilarityMetric::Cosine => {
            let qn = g.normalize_rows(q)?;
            let kn = g.normalize_rows(k)?;
            g.row_dot(qn, kn)
        }
        SimilarityMetric::Euclidean => {
            let d = g.sub(q, k)?;
            let d2 = g.row_dot(d, d)?;
            // tiny offset keeps the derivative of the root finite at zero distance
            let d2 = g.add_scalar(d2, 1e-24);
            let dist = g.sqrt(d2)?;
            let den = g.add_scalar(dist, 1.0);
            g.reciprocal(den)
        }
        SimilarityMetric::DotProduct => g.row_dot(q, k),
    }
}

/// Traced temporal boundary probabilities (`L × 1`) and the raw similarities.
pub fn temporal_probs(g: &mut Graph, x: Var, wq: Var, wk: Var, metric: SimilarityMetric) -> Result<(Var, Var)> {
    let l = g.value(x).rows();
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let prev: Vec<usize> = (0..l).map(|i| i.saturating_sub(1)).collect();
    let kp = g.gather_rows(k, &prev)?;
    let s = similarity_rows(g, q, kp, metric)?;
    let mut mask = Tensor::ones(&[l, 1]);
    mask.set(0, 0, 0.0);
    let mut first = Tensor::zeros(&[l, 1]);
    first.set(0, 0, 1.0);
    let half = g.scale(s, -0.5);
    let half = g.add_scalar(half, 0.5);
    let clamped = g.clamp(half, 0.0, 1.0)?;
    let mask = g.constant(mask);
    let first = g.constant(first);
    let masked = g.mul(clamped, mask)?;
    let p = g.add(masked, first)?;
    Ok((p, s))
}

/// Traced multimodal probabilities of `xm` (`L × 1`) and similarities.
pub fn mm_probs(g: &mut Graph, xm: Var, xm2: Var, wq: Var, wk: Var, metric: SimilarityMetric) -> Result<(Var, Var)> {
    let l = g.value(xm).rows();
    let l2 = g.value(xm2).rows();
    let q = g.matmul(xm, wq)?;
    let k = g.matmul(xm2, wk)?;
    let ka = g.gather_rows(k, &cross_indices(l, l2))?;
    let s = similarity_rows(g, q, ka, metric)?;
    let half = g.scale(s, 0.5);
    let half = g.add_scalar(half, 0.5);
    let p = g.clamp(half, 0.0, 1.0)?;
    Ok((p, s))
}

/// Thresholds traced probabilities/similarities into a decision.
pub fn decide(g: &Graph, p: Var, s: Var, tau: f64, kind: RoutingKind, rule: TemporalRule) -> Result<RoutingDecision> {
    let pv = g.value(p).data().to_vec();
    let sv = g.value(s).data();
    let b = match (kind, rule) {
        (RoutingKind::Temporal, TemporalRule::Probability) => pv.iter().map(|&v| v >= tau).collect(),
        _ => sv.iter().map(|&v| v >= tau).collect(),
    };
    RoutingDecision::new(pv, b, kind)
}

/// Query/key projections of one routing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingProjections {
    pub wq: Tensor,
    pub wk: Tensor,
}

impl RoutingProjections {
    /// Shared orthogonal init scaled by `1/√D`: repeated tokens start at
    /// `p = 0` and orthogonal ones at `p = ½`.
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        let w = orthogonal(rng, d_in, d_out).scale(1.0 / libm::sqrt(d_in as f64));
        Self { wq: w.clone(), wk: w }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub margin: f64,
    pub metric: SimilarityMetric,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 1e-2,
            margin: 0.15,
            metric: SimilarityMetric::Cosine,
        }
    }
}

/// Fits temporal projections so that known boundaries land above `p = ½`
/// and repeated positions below it, by at least `margin`. Position 0 is
/// excluded since its probability is fixed.
pub fn fit_temporal(
    init: RoutingProjections,
    streams: &[(Tensor, Vec<bool>)],
    config: FitConfig,
) -> Result<(RoutingProjections, f64)> {
    if streams.is_empty() {
        return Err(Error::invalid("fit_temporal: no streams"));
    }
    let mut params = vec![init.wq, init.wk];
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &params,
    );
    let mut last = f64::NAN;
    for _ in 0..config.iterations {
        let mut g = Graph::new();
        let wq = g.leaf(params[0].clone());
        let wk = g.leaf(params[1].clone());
        let mut losses = Vec::with_capacity(streams.len());
        for (x, bits) in streams {
            if bits.len() != x.rows() {
                return Err(Error::shape("fit_temporal", x.shape(), &[bits.len()]));
            }
            let xv = g.constant(x.clone());
            let (p, _) = temporal_probs(&mut g, xv, wq, wk, config.metric)?;
            losses.push(margin_loss(&mut g, p, bits, config.margin)?);
        }
        let total = losses.iter().skip(1).try_fold(losses[0], |acc, &v| g.add(acc, v))?;
        let loss = g.scale(total, 1.0 / streams.len() as f64);
        last = g.value(loss).item();
        g.backward(loss)?;
        let grads = vec![g.take_grad(wq).unwrap_or_else(|| Tensor::zeros(params[0].shape())), g.take_grad(wk).unwrap_or_else(|| Tensor::zeros(params[1].shape()))];
        opt.step(&mut params, &grads);
    }
    let wk = params.pop().expect("two params");
    let wq = params.pop().expect("two params");
    Ok((RoutingProjections { wq, wk }, last))
}

/// Class-balanced squared hinge on `p` around the `½` threshold.
fn margin_loss(g: &mut Graph, p: Var, bits: &[bool], margin: f64) -> Result<Var> {
    let l = bits.len();
    let n_pos = bits.iter().skip(1).filter(|&&b| b).count();
    let n_neg = l.saturating_sub(1) - n_pos;
    let w_pos = if n_pos > 0 { 0.5 / n_pos as f64 } else { 0.0 };
    let w_neg = if n_neg > 0 { 0.5 / n_neg as f64 } else { 0.0 };
    let sign = Tensor::from_fn(l, 1, |i, _| if bits[i] { -1.0 } else { 1.0 });
    let weight = Tensor::from_fn(l, 1, |i, _| match (i, bits[i]) {
        (0, _) => 0.0,
        (_, true) => w_pos,
        (_, false) => w_neg,
    });
    // violation = margin − sign(b)·(p − ½), written with the sign flipped
    let sign = g.constant(sign);
    let shifted = g.add_scalar(p, -0.5);
    let signed = g.mul(shifted, sign)?;
    let viol = g.add_scalar(signed, margin);
    let viol = g.clamp(viol, 0.0, f64::INFINITY)?;
    let sq = g.mul(viol, viol)?;
    let weight = g.constant(weight);
    let wsq = g.mul(sq, weight)?;
    Ok(g.sum(wsq))
}
