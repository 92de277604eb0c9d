//! Chunking to the boundary-marked tokens and copy-back dechunking.
//!
//! The dechunk weight is the routing confidence passed through a
//! straight-through estimator, so the forward pass is an exact copy while
//! the routing probabilities still receive a gradient.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::routing::RoutingDecision;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkState {
    pub original_len: usize,
    pub boundaries: Vec<bool>,
    pub probs: Vec<f64>,
    /// 1-based running count of boundaries, `m_ℓ = Σ_{k≤ℓ} b_k`.
    pub index_map: Vec<usize>,
    pub compressed_len: usize,
}

impl ChunkState {
    pub fn from_decision(decision: &RoutingDecision) -> Result<Self> {
        if decision.b.first() != Some(&true) {
            return Err(Error::invalid("chunk: first position must be a boundary"));
        }
        let mut m = 0;
        let index_map: Vec<usize> = decision
            .b
            .iter()
            .map(|&b| {
                m += b as usize;
                m
            })
            .collect();
        Ok(Self {
            original_len: decision.len(),
            boundaries: decision.b.clone(),
            probs: decision.p.clone(),
            index_map,
            compressed_len: m,
        })
    }

    /// Original positions of the kept rows.
    pub fn selected(&self) -> Vec<usize> {
        self.boundaries.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// 0-based compressed row feeding each original position.
    pub fn source_rows(&self) -> Vec<usize> {
        self.index_map.iter().map(|&m| m - 1).collect()
    }
}

pub fn chunk(x: &Tensor, decision: &RoutingDecision) -> Result<(Tensor, ChunkState)> {
    let state = ChunkState::from_decision(decision)?;
    if x.rows() != state.original_len {
        return Err(Error::shape("chunk", x.shape(), &[state.original_len]));
    }
    Ok((x.gather_rows(&state.selected())?, state))
}

pub fn chunk_traced(g: &mut Graph, x: Var, decision: &RoutingDecision) -> Result<(Var, ChunkState)> {
    let state = ChunkState::from_decision(decision)?;
    if g.value(x).rows() != state.original_len {
        return Err(Error::shape("chunk", g.shape(x), &[state.original_len]));
    }
    let xc = g.gather_rows(x, &state.selected())?;
    Ok((xc, state))
}

pub fn confidence(p: &[f64], b: &[bool]) -> Result<Vec<f64>> {
    if p.len() != b.len() {
        return Err(Error::shape("confidence", &[p.len()], &[b.len()]));
    }
    Ok(p.iter().zip(b).map(|(&p, &b)| if b { p } else { 1.0 - p }).collect())
}

/// Traced `a = p` where `b`, else `1 − p`; `p` is `L × 1`.
pub fn confidence_traced(g: &mut Graph, p: Var, b: &[bool]) -> Result<Var> {
    if g.value(p).dims2() != (b.len(), 1) {
        return Err(Error::shape("confidence", g.shape(p), &[b.len(), 1]));
    }
    let sign = g.constant(Tensor::from_fn(b.len(), 1, |i, _| if b[i] { 1.0 } else { -1.0 }));
    let offset = g.constant(Tensor::from_fn(b.len(), 1, |i, _| if b[i] { 0.0 } else { 1.0 }));
    let sp = g.mul(p, sign)?;
    g.add(sp, offset)
}

/// `a + stopgrad(1 − a)`: forward value 1, unit gradient.
pub fn ste(g: &mut Graph, a: Var) -> Result<Var> {
    let neg = g.scale(a, -1.0);
    let rest = g.add_scalar(neg, 1.0);
    let rest = g.stopgrad(rest);
    g.add(a, rest)
}

/// Piecewise-constant copy-back of compressed rows.
pub fn dechunk(xc: &Tensor, state: &ChunkState) -> Result<Tensor> {
    if xc.rows() != state.compressed_len {
        return Err(Error::shape("dechunk", xc.shape(), &[state.compressed_len]));
    }
    xc.gather_rows(&state.source_rows())
}

/// Traced dechunk: `out_ℓ = STE(a_ℓ) · xc[m_ℓ]` with `a` from `p` (`L × 1`).
pub fn dechunk_traced(g: &mut Graph, xc: Var, state: &ChunkState, p: Var) -> Result<Var> {
    if g.value(xc).rows() != state.compressed_len {
        return Err(Error::shape("dechunk", g.shape(xc), &[state.compressed_len]));
    }
    let spread = g.gather_rows(xc, &state.source_rows())?;
    let a = confidence_traced(g, p, &state.boundaries)?;
    let w = ste(g, a)?;
    g.mul_col(spread, w)
}
