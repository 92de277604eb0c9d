//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node whose parents always have
//! smaller indices, so the node vector is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Custom operations (the SSM
//! kernels, for example) plug in through [`Graph::push_op`] with anything that
//! implements [`Backward`]; closures qualify through a blanket impl.
//!
//! ```
//! use mmhnet_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::row_vector(&[1.0, 2.0]));
//! let xx = g.mul(x, x).unwrap();
//! let loss = g.sum(xx);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input, `None` when that input receives no gradient.
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

impl<F> Backward for F
where
    F: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>,
{
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        self(inputs, output, grad)
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    tracing: bool,
    stopgrad_log: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
    replay_cursor: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn selu_scalar(x: f64) -> f64 {
    const ALPHA: f64 = 1.673_263_242_354_377_3;
    const SCALE: f64 = 1.050_700_987_355_480_5;
    if x > 0.0 {
        SCALE * x
    } else {
        SCALE * ALPHA * (libm::exp(x) - 1.0)
    }
}

fn selu_deriv(x: f64) -> f64 {
    const ALPHA: f64 = 1.673_263_242_354_377_3;
    const SCALE: f64 = 1.050_700_987_355_480_5;
    if x > 0.0 {
        SCALE
    } else {
        SCALE * ALPHA * libm::exp(x)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// SELU activation on scalars.
pub fn selu(x: f64) -> f64 {
    selu_scalar(x)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Graph {
    /// A graph that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            tracing: true,
            stopgrad_log: Vec::new(),
            replay: None,
            replay_cursor: 0,
        }
    }

    /// A graph for pure evaluation: values only, nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            tracing: false,
            ..Self::new()
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`, so a long-lived graph
    /// can be reused across evaluations. Handles beyond `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    fn push_raw(&mut self, value: Tensor, parents: Vec<usize>, op: Option<Box<dyn Backward>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.tracing;
        self.push_raw(value, Vec::new(), None, rg)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. `op` is only kept when tracing and at least one
    /// input requires a gradient.
    pub fn push_op<B: Backward + 'static>(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: B) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.tracing && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        let op: Option<Box<dyn Backward>> = if rg { Some(Box::new(op)) } else { None };
        Ok(self.push_raw(value, parents, op, rg))
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Propagates `∂loss/∂node` to every differentiable leaf. Leaf gradients
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if node.parents.is_empty() {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let Some(op) = &node.op else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = op.backward(&inputs, &node.value, &g);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(gp.shape(), self.nodes[p].value.shape());
                match &mut local[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        Ok(())
    }

    // ---- stop-gradient with replay (used by the finite-difference oracle) ----

    /// Identity in the forward pass, zero gradient in the backward pass.
    ///
    /// When a replay log is installed the forward value is taken from the log
    /// instead, which freezes stopped branches at their recorded values.
    pub fn stopgrad(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let replayed = match &self.replay {
            Some(log) => log.get(self.replay_cursor).filter(|t| t.shape() == &shape[..]).cloned(),
            None => None,
        };
        let value = match replayed {
            Some(v) => {
                self.replay_cursor += 1;
                v
            }
            None => self.value(a).clone(),
        };
        self.stopgrad_log.push(value.clone());
        self.constant(value)
    }

    pub(crate) fn set_replay(&mut self, log: Vec<Tensor>) {
        self.replay = Some(log);
        self.replay_cursor = 0;
    }

    pub(crate) fn stopgrad_log(&self) -> &[Tensor] {
        &self.stopgrad_log
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        self.push_op("add", v, &[a, b], |_: &[&Tensor], _: &Tensor, g: &Tensor| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        self.push_op("sub", v, &[a, b], |_: &[&Tensor], _: &Tensor, g: &Tensor| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        self.push_op("mul", v, &[a, b], |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            vec![g.mul(ins[1]).ok(), g.mul(ins[0]).ok()]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push_op("scale", v, &[a], move |_: &[&Tensor], _: &Tensor, g: &Tensor| vec![Some(g.scale(s))])
            .expect("scaling finite values")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push_op("add_scalar", v, &[a], |_: &[&Tensor], _: &Tensor, g: &Tensor| vec![Some(g.clone())])
            .expect("shifting finite values")
    }

    /// `a (L×D) + r (1×D)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (l, d) = self.value(a).dims2();
        if self.value(r).dims2() != (1, d) {
            return Err(Error::shape("add_row", self.shape(a), self.shape(r)));
        }
        let mut v = self.value(a).clone();
        let rv = self.value(r).data().to_vec();
        for i in 0..l {
            for (x, y) in v.row_mut(i).iter_mut().zip(&rv) {
                *x += y;
            }
        }
        self.push_op("add_row", v, &[a, r], |_: &[&Tensor], _: &Tensor, g: &Tensor| {
            let rg = g.mean_rows().scale(g.rows() as f64);
            vec![Some(g.clone()), Some(rg)]
        })
    }

    /// `a (L×D) ⊙ r (1×D)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (l, d) = self.value(a).dims2();
        if self.value(r).dims2() != (1, d) {
            return Err(Error::shape("mul_row", self.shape(a), self.shape(r)));
        }
        let mut v = self.value(a).clone();
        let rv = self.value(r).data().to_vec();
        for i in 0..l {
            for (x, y) in v.row_mut(i).iter_mut().zip(&rv) {
                *x *= y;
            }
        }
        self.push_op("mul_row", v, &[a, r], |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (l, d) = g.dims2();
            let mut ga = g.clone();
            let mut gr = vec![0.0; d];
            for i in 0..l {
                let arow = ins[0].row(i);
                for j in 0..d {
                    gr[j] += g.get(i, j) * arow[j];
                    ga.data_mut()[i * d + j] *= ins[1].data()[j];
                }
            }
            vec![Some(ga), Some(Tensor::from_vec(1, d, gr))]
        })
    }

    /// `a (L×D) ⊙ c (L×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let l = self.value(a).rows();
        if self.value(c).dims2() != (l, 1) {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(c)));
        }
        let mut v = self.value(a).clone();
        for i in 0..l {
            let s = self.nodes[c.0].value.data()[i];
            for x in v.row_mut(i) {
                *x *= s;
            }
        }
        self.push_op("mul_col", v, &[a, c], |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (l, _) = g.dims2();
            let mut ga = g.clone();
            let mut gc = vec![0.0; l];
            for i in 0..l {
                let s = ins[1].data()[i];
                let mut acc = 0.0;
                for (gx, ax) in ga.row_mut(i).iter_mut().zip(ins[0].row(i)) {
                    acc += *gx * ax;
                    *gx *= s;
                }
                gc[i] = acc;
            }
            vec![Some(ga), Some(Tensor::from_vec(l, 1, gc))]
        })
    }

    /// Repeats a `1×D` row `rows` times.
    pub fn broadcast_rows(&mut self, r: Var, rows: usize) -> Result<Var> {
        let (one, d) = self.value(r).dims2();
        if one != 1 || rows == 0 {
            return Err(Error::shape("broadcast_rows", self.shape(r), &[rows, d]));
        }
        let row = self.value(r).data().to_vec();
        let v = Tensor::from_fn(rows, d, |_, j| row[j]);
        self.push_op("broadcast_rows", v, &[r], |_: &[&Tensor], _: &Tensor, g: &Tensor| {
            vec![Some(g.mean_rows().scale(g.rows() as f64))]
        })
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Result<Var> {
        let v = self.value(a).map(f);
        self.push_op(name, v, &[a], move |ins: &[&Tensor], out: &Tensor, g: &Tensor| {
            let d = g
                .data()
                .iter()
                .zip(ins[0].data())
                .zip(out.data())
                .map(|((&gv, &x), &y)| gv * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), d).expect("same shape"))]
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, libm::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| x <= 0.0) {
            return Err(Error::Domain { op: "log", index: i });
        }
        self.unary("log", a, libm::log, |x, _| 1.0 / x)
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| x == 0.0) {
            return Err(Error::Domain { op: "reciprocal", index: i });
        }
        self.unary("reciprocal", a, |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, libm::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, silu, |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        self.unary("selu", a, selu_scalar, |x, _| selu_deriv(x))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, |x, _| sigmoid(x))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| x < 0.0) {
            return Err(Error::Domain { op: "sqrt", index: i });
        }
        self.unary("sqrt", a, libm::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_op("clamp", v, &[a], move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let d = g
                .data()
                .iter()
                .zip(ins[0].data())
                .map(|(&gv, &x)| if x < lo || x > hi { 0.0 } else { gv })
                .collect();
            vec![Some(Tensor::new(g.shape(), d).expect("same shape"))]
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push_op("matmul", v, &[a, b], |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (m, k) = ins[0].dims2();
            let n = ins[1].cols();
            let mut ga = vec![0.0; m * k];
            gemm_nt(g.data(), ins[1].data(), &mut ga, m, n, k);
            let mut gb = vec![0.0; k * n];
            gemm_tn(ins[0].data(), g.data(), &mut gb, k, m, n);
            vec![Some(Tensor::from_vec(m, k, ga)), Some(Tensor::from_vec(k, n, gb))]
        })
    }

    /// `x·W (+ b)` with `W: D_in × D_out` and optional `b: 1 × D_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push_op("transpose", v, &[a], |_: &[&Tensor], _: &Tensor, g: &Tensor| vec![Some(g.transpose())])
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op("sum", v, &[a], |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            vec![Some(Tensor::full(ins[0].shape(), g.item()))]
        })
        .expect("sum of finite values")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean pooling over rows (`L × D → 1 × D`).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mean_rows();
        self.push_op("mean_rows", v, &[a], |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (l, d) = ins[0].dims2();
            let inv = 1.0 / l as f64;
            let row: Vec<f64> = g.data().iter().map(|x| x * inv).collect();
            vec![Some(Tensor::from_fn(l, d, |_, j| row[j]))]
        })
    }

    /// Per-row inner product of two `L × D` tensors, giving `L × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (l, _) = self.value(a).dims2();
        let va = self.value(a);
        let vb = self.value(b);
        let d: Vec<f64> = (0..l)
            .map(|i| va.row(i).iter().zip(vb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        self.push_op("row_dot", Tensor::from_vec(l, 1, d), &[a, b], |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (l, d) = ins[0].dims2();
            let mut ga = ins[1].clone();
            let mut gb = ins[0].clone();
            for i in 0..l {
                let s = g.data()[i];
                for j in 0..d {
                    ga.data_mut()[i * d + j] *= s;
                    gb.data_mut()[i * d + j] *= s;
                }
            }
            vec![Some(ga), Some(gb)]
        })
    }

    // ---- row-wise normalizations ----

    /// Layer normalization of each row without a learned affine.
    pub fn layernorm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (l, d) = x.dims2();
        let mut y = x.clone();
        let mut inv_std = vec![0.0; l];
        for i in 0..l {
            let row = y.row_mut(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std[i] = is;
        }
        self.push_op("layernorm_rows", y, &[a], move |_: &[&Tensor], out: &Tensor, g: &Tensor| {
            let (l, d) = g.dims2();
            let mut gx = Tensor::zeros(g.shape());
            for i in 0..l {
                let gr = g.row(i);
                let yr = out.row(i);
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                    *o = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![Some(gx)]
        })
    }

    /// RMS normalization of each row without a learned scale.
    pub fn rmsnorm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (l, d) = x.dims2();
        let mut y = x.clone();
        let mut inv = vec![0.0; l];
        for i in 0..l {
            let row = y.row_mut(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(ms + eps);
            for v in row.iter_mut() {
                *v *= r;
            }
            inv[i] = r;
        }
        self.push_op("rmsnorm_rows", y, &[a], move |_: &[&Tensor], out: &Tensor, g: &Tensor| {
            let (l, d) = g.dims2();
            let mut gx = Tensor::zeros(g.shape());
            for i in 0..l {
                let gr = g.row(i);
                let yr = out.row(i);
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                    *o = inv[i] * (gr[j] - yr[j] * mgy);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Scales each row to unit L2 norm; rows with norm below `1e-12` map to 0.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (l, _) = x.dims2();
        let mut y = x.clone();
        let mut inv = vec![0.0; l];
        for i in 0..l {
            let row = y.row_mut(i);
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            let r = if n < 1e-12 { 0.0 } else { 1.0 / n };
            for v in row.iter_mut() {
                *v *= r;
            }
            inv[i] = r;
        }
        self.push_op("normalize_rows", y, &[a], move |_: &[&Tensor], out: &Tensor, g: &Tensor| {
            let (l, _) = g.dims2();
            let mut gx = Tensor::zeros(g.shape());
            for i in 0..l {
                let gr = g.row(i);
                let yr = out.row(i);
                let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                    *o = inv[i] * (gr[j] - yr[j] * dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (l, _) = x.dims2();
        let mut y = x.clone();
        for i in 0..l {
            let row = y.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push_op("softmax_rows", y, &[a], |_: &[&Tensor], out: &Tensor, g: &Tensor| {
            let (l, _) = g.dims2();
            let mut gx = Tensor::zeros(g.shape());
            for i in 0..l {
                let gr = g.row(i);
                let yr = out.row(i);
                let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                    *o = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    // ---- structural ----

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        self.push_op("slice_rows", v, &[a], move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let mut gx = Tensor::zeros(ins[0].shape());
            let c = g.cols();
            gx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
            vec![Some(gx)]
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (l, d) = x.dims2();
        if len == 0 || start + len > d {
            return Err(Error::shape("slice_cols", x.shape(), &[start, len]));
        }
        let v = Tensor::from_fn(l, len, |i, j| x.get(i, start + j));
        self.push_op("slice_cols", v, &[a], move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (l, d) = ins[0].dims2();
            let mut gx = Tensor::zeros(&[l, d]);
            for i in 0..l {
                gx.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
            }
            vec![Some(gx)]
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        let lens: Vec<usize> = tensors.iter().map(|t| t.rows()).collect();
        self.push_op("concat_rows", v, parts, move |_: &[&Tensor], _: &Tensor, g: &Tensor| {
            let mut out = Vec::with_capacity(lens.len());
            let mut start = 0;
            for &n in &lens {
                out.push(g.slice_rows(start, n).ok());
                start += n;
            }
            out
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let l = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat_cols: nothing to concatenate"))?)
            .rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != l {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut v = Tensor::zeros(&[l, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.clone();
            for i in 0..l {
                v.row_mut(i)[off..off + w].copy_from_slice(src.row(i));
            }
            off += w;
        }
        self.push_op("concat_cols", v, parts, move |_: &[&Tensor], _: &Tensor, g: &Tensor| {
            let l = g.rows();
            let mut out = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &w in &widths {
                out.push(Some(Tensor::from_fn(l, w, |i, j| g.get(i, off + j))));
                off += w;
            }
            out
        })
    }

    /// Row gather; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(index)?;
        let index = index.to_vec();
        self.push_op("gather_rows", v, &[a], move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let mut gx = Tensor::zeros(ins[0].shape());
            for (r, &i) in index.iter().enumerate() {
                for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Unfolds `x: L × C` into patches `L_out × (k·C)` with zero padding, so
    /// that a 1-D convolution becomes `im2col(x) · W` with `W: (k·C) × C_out`.
    pub fn im2col(&mut self, x: Var, kernel: usize, pad_left: usize, pad_right: usize) -> Result<Var> {
        let xv = self.value(x);
        let (l, c) = xv.dims2();
        if kernel == 0 || l + pad_left + pad_right < kernel {
            return Err(Error::shape("im2col", xv.shape(), &[kernel, pad_left, pad_right]));
        }
        let lo = l + pad_left + pad_right - kernel + 1;
        let mut v = Tensor::zeros(&[lo, kernel * c]);
        for o in 0..lo {
            for j in 0..kernel {
                let src = o + j;
                if src < pad_left || src - pad_left >= l {
                    continue;
                }
                let s = src - pad_left;
                v.row_mut(o)[j * c..(j + 1) * c].copy_from_slice(xv.row(s));
            }
        }
        self.push_op("im2col", v, &[x], move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (l, c) = ins[0].dims2();
            let lo = g.rows();
            let mut gx = Tensor::zeros(&[l, c]);
            for o in 0..lo {
                for j in 0..kernel {
                    let src = o + j;
                    if src < pad_left || src - pad_left >= l {
                        continue;
                    }
                    let s = src - pad_left;
                    let gr = &g.row(o)[j * c..(j + 1) * c];
                    for (a, b) in gx.row_mut(s).iter_mut().zip(gr) {
                        *a += b;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// 1-D convolution over rows: `x: L × C_in`, `w: (k·C_in) × C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize, pad_left: usize, pad_right: usize) -> Result<Var> {
        let cols = self.im2col(x, kernel, pad_left, pad_right)?;
        self.linear(cols, w, b)
    }

    /// Depthwise convolution: `y[l][c] = Σ_j w[j][c] · x[l + j − pad_left][c] + b[c]`,
    /// output length equal to input length.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, pad_left: usize) -> Result<Var> {
        let (l, c) = self.value(x).dims2();
        let (k, cw) = self.value(w).dims2();
        if cw != c || self.value(b).dims2() != (1, c) || pad_left >= k {
            return Err(Error::shape("depthwise_conv1d", self.shape(x), self.shape(w)));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut y = Tensor::zeros(&[l, c]);
        for i in 0..l {
            let yr = &mut y.data_mut()[i * c..(i + 1) * c];
            yr.copy_from_slice(bv.data());
            for j in 0..k {
                let src = i + j;
                if src < pad_left || src - pad_left >= l {
                    continue;
                }
                let xr = xv.row(src - pad_left);
                let wr = wv.row(j);
                for ch in 0..c {
                    yr[ch] += wr[ch] * xr[ch];
                }
            }
        }
        self.push_op("depthwise_conv1d", y, &[x, w, b], move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
            let (l, c) = ins[0].dims2();
            let k = ins[1].rows();
            let mut gx = Tensor::zeros(&[l, c]);
            let mut gw = Tensor::zeros(&[k, c]);
            let gb = g.mean_rows().scale(l as f64);
            for i in 0..l {
                let gr = g.row(i);
                for j in 0..k {
                    let src = i + j;
                    if src < pad_left || src - pad_left >= l {
                        continue;
                    }
                    let s = src - pad_left;
                    for ch in 0..c {
                        gw.data_mut()[j * c + ch] += gr[ch] * ins[0].get(s, ch);
                        gx.data_mut()[s * c + ch] += gr[ch] * ins[1].get(j, ch);
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.0, -2.0, 3.0, 0.5, 9.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[1.0, 2.0]));
        let xt = g.transpose(x).unwrap();
        let q = g.matmul(xt, x).unwrap();
        g.backward(q).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::row_vector(&[1.0, 0.0]));
        assert!(matches!(g.reciprocal(z), Err(Error::Domain { op: "reciprocal", index: 1 })));
        assert!(matches!(g.log(z), Err(Error::Domain { op: "log", index: 1 })));
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut g = Graph::inference();
        let z = g.constant(Tensor::zeros(&[3, 2]));
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e).data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::from_fn(3, 3, |i, j| (i as f64) * 1.5 - j as f64);
        let mut g = Graph::inference();
        let i3 = g.constant(Tensor::eye(3));
        let mv = g.constant(m.clone());
        let p = g.matmul(i3, mv).unwrap();
        assert_eq!(g.value(p), &m);
    }

    #[test]
    fn stopgrad_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.3));
        let one_minus = g.scale(x, -1.0);
        let one_minus = g.add_scalar(one_minus, 1.0);
        let sg = g.stopgrad(one_minus);
        let ste = g.add(x, sg).unwrap();
        assert_eq!(g.value(ste).item(), 1.0);
        g.backward(ste).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn inference_graph_keeps_no_gradients() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        assert!(g.grad(x).is_none());
    }
}
