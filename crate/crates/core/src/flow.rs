//! Conditional flow matching: linear interpolants, the velocity regression
//! loss, Euler integration from noise and classifier-free guidance.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_CFG_SCALE: f64 = 4.0;
pub const DEFAULT_COND_DROPOUT: f64 = 0.1;

/// A learned (or analytic) velocity field `v(x, t, c)`.
///
/// `null = true` asks for the unconditional prediction, with conditions
/// replaced by the field's null embeddings.
pub trait VelocityField {
    type Condition;
    type Params: AsRef<[Var]>;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Params;

    fn velocity(&self, g: &mut Graph, params: &Self::Params, x: Var, t: f64, cond: &Self::Condition, null: bool) -> Result<Var>;
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain { op: "flow time", index: 0 });
    }
    Ok(())
}

/// `t·x1 + (1−t)·x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    check_time(t)?;
    x0.zip_map(x1, "interpolate", |a, b| t * b + (1.0 - t) * a)
}

/// `x1 − x0`.
pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

/// One training example.
#[derive(Clone, Debug)]
pub struct FlowSample<C> {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub cond: C,
    /// Conditions dropped for this sample.
    pub null: bool,
}

impl<C> FlowSample<C> {
    pub fn xt(&self) -> Result<Tensor> {
        interpolate(&self.x0, &self.x1, self.t)
    }

    pub fn u(&self) -> Result<Tensor> {
        target_velocity(&self.x0, &self.x1)
    }
}

/// Squared error of a prediction against its target, averaged over coordinates.
pub fn mse(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let u = g.constant(target.clone());
    let d = g.sub(pred, u)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Mean over samples of the per-sample MSE `‖v(x_t, t, c) − u‖²`.
pub fn fm_loss<F: VelocityField>(g: &mut Graph, field: &F, params: &F::Params, batch: &[FlowSample<F::Condition>]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("fm_loss: empty batch"));
    }
    let mut total: Option<Var> = None;
    for s in batch {
        check_time(s.t)?;
        let x = g.constant(s.xt()?);
        let v = field.velocity(g, params, x, s.t, &s.cond, s.null)?;
        let l = mse(g, v, &s.u()?)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Per-sample dropout flags: each sample is unconditioned with probability `rate`.
pub fn condition_dropout(n: usize, rate: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain { op: "condition_dropout(rate)", index: 0 });
    }
    Ok((0..n).map(|_| rng.random::<f64>() < rate).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
        }
    }
}

/// Guided velocity `v_u + s·(v_c − v_u)`; with `s = 1` the unconditional
/// branch is not evaluated at all.
pub fn guided_velocity<F: VelocityField>(g: &mut Graph, field: &F, params: &F::Params, x: Var, t: f64, cond: &F::Condition, scale: f64) -> Result<Tensor> {
    let vc = field.velocity(g, params, x, t, cond, false)?;
    if scale == 1.0 {
        return Ok(g.value(vc).clone());
    }
    let vu = field.velocity(g, params, x, t, cond, true)?;
    let (c, u) = (g.value(vc), g.value(vu));
    u.zip_map(c, "guided_velocity", |u, c| u + scale * (c - u))
}

/// Euler integration from `x0` over `t_k = k/T`.
pub fn integrate<F: VelocityField>(field: &F, cond: &F::Condition, x0: Tensor, config: SamplerConfig) -> Result<Tensor> {
    if config.steps == 0 {
        return Err(Error::invalid("sample_euler: steps must be at least 1"));
    }
    if !(config.cfg_scale >= 0.0) {
        return Err(Error::Domain { op: "sample_euler(cfg_scale)", index: 0 });
    }
    let dt = 1.0 / config.steps as f64;
    let mut x = x0;
    let mut g = Graph::inference();
    let params = field.bind(&mut g, false);
    let base = g.len();
    for k in 0..config.steps {
        let t = k as f64 * dt;
        let xv = g.constant(x.clone());
        let v = guided_velocity(&mut g, field, &params, xv, t, cond, config.cfg_scale)?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        g.truncate(base);
    }
    Ok(x)
}

/// Draws `x0 ~ N(0, I)` of shape `len × dim` from `seed` and integrates.
pub fn sample_euler<F: VelocityField>(field: &F, cond: &F::Condition, len: usize, dim: usize, config: SamplerConfig, seed: u64) -> Result<Tensor> {
    if len == 0 || dim == 0 {
        return Err(Error::invalid("sample_euler: empty output"));
    }
    let mut rng = seeded(seed);
    integrate(field, cond, normal_tensor(&mut rng, len, dim, 1.0), config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = Tensor::row_vector(&[0.0, 0.0]);
        let x1 = Tensor::row_vector(&[2.0, 4.0]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(interpolate(&x0, &x1, 1.5).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = seeded(3);
        assert!(condition_dropout(50, 0.0, &mut rng).unwrap().iter().all(|&d| !d));
        assert!(condition_dropout(50, 1.0, &mut rng).unwrap().iter().all(|&d| d));
        assert!(condition_dropout(5, -0.1, &mut rng).is_err());
    }
}
