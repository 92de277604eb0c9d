//! Parameterized layers over [`ParamStore`] entries.

use alloc::format;
use alloc::string::String;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `1/√fan_in`.
    FanIn,
    Zeros,
    Normal(f64),
}

pub fn init_tensor(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize, init: Init) -> Tensor {
    match init {
        Init::FanIn => normal_tensor(rng, rows, cols, 1.0 / libm::sqrt(fan_in as f64)),
        Init::Zeros => Tensor::zeros(&[rows, cols]),
        Init::Normal(std) => normal_tensor(rng, rows, cols, std),
    }
}

/// Dotted parameter name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init) -> Self {
        let w = store.push(join(name, "w"), init_tensor(rng, d_in, d_out, d_in, init));
        let b = bias.then(|| store.push(join(name, "b"), Tensor::zeros(&[1, d_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

/// Same-padded 1-D convolution with an odd kernel.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = kernel * d_in;
        let w = store.push(join(name, "w"), init_tensor(rng, fan_in, d_out, fan_in, Init::FanIn));
        let b = store.push(join(name, "b"), Tensor::zeros(&[1, d_out]));
        Self { w, b, kernel }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let pad = self.kernel / 2;
        g.conv1d(x, p.get(self.w), Some(p.get(self.b)), self.kernel, pad, pad)
    }
}

/// `conv_k → SiLU → pointwise linear`.
#[derive(Clone, Debug)]
pub struct ConvMlp {
    pub conv: Conv1d,
    pub out: Linear,
}

impl ConvMlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, hidden: usize, d_out: usize, kernel: usize) -> Self {
        Self {
            conv: Conv1d::new(store, rng, &join(name, "conv"), d_in, hidden, kernel),
            out: Linear::new(store, rng, &join(name, "out"), hidden, d_out, true, Init::FanIn),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, p, x)?;
        let h = g.silu(h)?;
        self.out.forward(g, p, h)
    }
}
