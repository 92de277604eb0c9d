//! Condition projections and global adaLN conditioning.
//!
//! Raw streams are mapped to the model width by small convolutional
//! projections that all keep the sequence length. Pooled semantic and text
//! features plus a sinusoidal flow-time embedding form the global vector
//! `c_g`, which modulates every block through [`AdaLn`].

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Conv1d, ConvMlp, Init, Linear};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-10;
/// Flow time is scaled by this factor before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

/// Raw (encoder-space) condition streams of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConditions {
    pub semantic: Tensor,
    pub sync: Tensor,
    pub text: Tensor,
}

/// Projected condition streams and the global vector.
#[derive(Clone, Copy, Debug)]
pub struct ConditionSet {
    pub semantic: Var,
    pub sync: Var,
    pub text: Var,
    pub c_g: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionDims {
    pub semantic: usize,
    pub sync: usize,
    pub text: usize,
    pub latent: usize,
    pub model: usize,
}

/// `[sin(ω_k·x), cos(ω_k·x)]` with `ω_k = 10000^{−k/half}`.
pub fn sinusoidal(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = alloc::vec![0.0; dim];
    for k in 0..half {
        let w = libm::pow(10000.0, -(k as f64) / half.max(1) as f64);
        out[k] = libm::sin(w * x);
        out[half + k] = libm::cos(w * x);
    }
    out
}

pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    Tensor::row_vector(&sinusoidal(t * TIME_SCALE, dim))
}

/// Sinusoidal position table, `len × dim`.
pub fn position_table(len: usize, dim: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..len).map(|i| sinusoidal(i as f64, dim)).collect();
    Tensor::from_fn(len, dim, |i, j| rows[i][j])
}

/// `conv7 → SELU → ConvMLP_k`.
#[derive(Clone, Debug)]
pub struct ConvSeluProjection {
    pub conv: Conv1d,
    pub mlp: ConvMlp,
}

impl ConvSeluProjection {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_model: usize, mlp_kernel: usize) -> Self {
        Self {
            conv: Conv1d::new(store, rng, &join(name, "conv"), d_in, d_model, 7),
            mlp: ConvMlp::new(store, rng, &join(name, "mlp"), d_model, d_model, d_model, mlp_kernel),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, p, x)?;
        let h = g.selu(h)?;
        self.mlp.forward(g, p, h)
    }
}

/// Layer norm without affine terms, modulated by `c_g`.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub modulation: Linear,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize) -> Self {
        Self {
            modulation: Linear::new(store, rng, &join(name, "mod"), d_model, 2 * d_model, true, Init::Zeros),
        }
    }

    /// `(1 + scale) ⊙ LN(h) + shift`, `[scale, shift] = Linear(c_g)`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, h: Var, c_g: Var) -> Result<Var> {
        let d = g.value(h).cols();
        let ln = g.layernorm_rows(h, LN_EPS)?;
        let ss = self.modulation.forward(g, p, c_g)?;
        let scale = g.slice_cols(ss, 0, d)?;
        let shift = g.slice_cols(ss, d, d)?;
        let gain = g.add_scalar(scale, 1.0);
        let y = g.mul_row(ln, gain)?;
        g.add_row(y, shift)
    }
}

#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub dims: ConditionDims,
    pub sync: ConvSeluProjection,
    pub semantic: ConvMlp,
    pub text: ConvMlp,
    pub audio: ConvSeluProjection,
    pub pool_semantic: Linear,
    pub pool_text: Linear,
    pub pool_time: Linear,
    pub global_in: Linear,
    pub global_out: Linear,
    pub null_semantic: ParamId,
    pub null_sync: ParamId,
    pub null_text: ParamId,
    pub sync_pos_emb: bool,
}

impl ConditionEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, dims: ConditionDims, sync_pos_emb: bool) -> Self {
        let d = dims.model;
        let null = |store: &mut ParamStore, rng: &mut Rng, name: &str| {
            store.push(join("cond", name), crate::rng::normal_tensor(rng, 1, d, 0.02))
        };
        Self {
            dims,
            sync: ConvSeluProjection::new(store, rng, "cond.sync", dims.sync, d, 3),
            semantic: ConvMlp::new(store, rng, "cond.semantic", dims.semantic, d, d, 3),
            text: ConvMlp::new(store, rng, "cond.text", dims.text, d, d, 3),
            audio: ConvSeluProjection::new(store, rng, "cond.audio", dims.latent, d, 7),
            pool_semantic: Linear::new(store, rng, "cond.pool_semantic", d, d, false, Init::FanIn),
            pool_text: Linear::new(store, rng, "cond.pool_text", d, d, false, Init::FanIn),
            pool_time: Linear::new(store, rng, "cond.pool_time", d, d, true, Init::FanIn),
            global_in: Linear::new(store, rng, "cond.global_in", d, d, true, Init::FanIn),
            global_out: Linear::new(store, rng, "cond.global_out", d, d, true, Init::FanIn),
            null_semantic: null(store, rng, "null_semantic"),
            null_sync: null(store, rng, "null_sync"),
            null_text: null(store, rng, "null_text"),
            sync_pos_emb,
        }
    }

    pub fn project_sync(&self, g: &mut Graph, p: &BoundParams, raw: Var) -> Result<Var> {
        let y = self.sync.forward(g, p, raw)?;
        if !self.sync_pos_emb {
            return Ok(y);
        }
        let (l, d) = g.value(y).dims2();
        let pe = g.constant(position_table(l, d));
        g.add(y, pe)
    }

    pub fn project_semantic(&self, g: &mut Graph, p: &BoundParams, raw: Var) -> Result<Var> {
        self.semantic.forward(g, p, raw)
    }

    pub fn project_text(&self, g: &mut Graph, p: &BoundParams, raw: Var) -> Result<Var> {
        self.text.forward(g, p, raw)
    }

    pub fn project_audio(&self, g: &mut Graph, p: &BoundParams, latent: Var) -> Result<Var> {
        self.audio.forward(g, p, latent)
    }

    /// `c_g = MLP(W_v·mean(semantic) + W_t·mean(text) + W_τ·emb(t))`.
    pub fn global_condition(&self, g: &mut Graph, p: &BoundParams, semantic: Var, text: Var, t: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain { op: "global_condition(t)", index: 0 });
        }
        if g.value(semantic).rows() == 0 || g.value(text).rows() == 0 {
            return Err(Error::invalid("global_condition: empty condition stream"));
        }
        let ms = g.mean_rows(semantic)?;
        let mt = g.mean_rows(text)?;
        let emb = g.constant(time_embedding(t, self.dims.model));
        let a = self.pool_semantic.forward(g, p, ms)?;
        let b = self.pool_text.forward(g, p, mt)?;
        let c = self.pool_time.forward(g, p, emb)?;
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        let h = self.global_in.forward(g, p, s)?;
        let h = g.silu(h)?;
        self.global_out.forward(g, p, h)
    }

    /// Projects all streams (or substitutes the null embeddings) and builds `c_g`.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, raw: &RawConditions, t: f64, null: bool) -> Result<ConditionSet> {
        for (name, s, d) in [
            ("semantic", &raw.semantic, self.dims.semantic),
            ("sync", &raw.sync, self.dims.sync),
            ("text", &raw.text, self.dims.text),
        ] {
            if s.shape().len() != 2 || s.cols() != d {
                return Err(Error::Invalid(alloc::format!("{name} stream has shape {:?}, expected width {d}", s.shape())));
            }
        }
        let (semantic, sync, text) = if null {
            (
                g.broadcast_rows(p.get(self.null_semantic), raw.semantic.rows())?,
                g.broadcast_rows(p.get(self.null_sync), raw.sync.rows())?,
                g.broadcast_rows(p.get(self.null_text), raw.text.rows())?,
            )
        } else {
            let s = g.constant(raw.semantic.clone());
            let y = g.constant(raw.sync.clone());
            let x = g.constant(raw.text.clone());
            (self.project_semantic(g, p, s)?, self.project_sync(g, p, y)?, self.project_text(g, p, x)?)
        };
        let c_g = self.global_condition(g, p, semantic, text, t)?;
        Ok(ConditionSet { semantic, sync, text, c_g })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    #[test]
    fn sinusoid_layout() {
        let e = sinusoidal(0.0, 6);
        assert_eq!(e, alloc::vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let e = sinusoidal(2.0, 4);
        assert!((e[0] - libm::sin(2.0)).abs() < 1e-15);
        assert!((e[3] - libm::cos(0.02)).abs() < 1e-15);
    }

    #[test]
    fn adaln_zero_init_is_layernorm() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let ada = AdaLn::new(&mut store, &mut rng, "ada", 5);
        let mut g = Graph::inference();
        let p = store.bind(&mut g, false);
        let h = g.constant(normal_tensor(&mut rng, 4, 5, 3.0));
        let c = g.constant(normal_tensor(&mut rng, 1, 5, 1.0));
        let y = ada.forward(&mut g, &p, h, c).unwrap();
        let ln = g.layernorm_rows(h, LN_EPS).unwrap();
        assert_eq!(g.value(y), g.value(ln));
        for i in 0..4 {
            let r = g.value(y).row(i);
            let m = r.iter().sum::<f64>() / 5.0;
            let v = r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
            assert!(m.abs() <= 1e-10 && (v - 1.0).abs() <= 1e-10);
        }
    }
}
