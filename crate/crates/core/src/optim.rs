//! AdamW with optional global-norm gradient clipping.

use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled to this global L2 norm when above it; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>())
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        let c = self.config;
        self.step += 1;
        let norm = global_norm(grads);
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] * clip;
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= c.lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * pd[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = [Tensor::row_vector(&[3.0, -2.0])];
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                clip_norm: 0.0,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let g = [p[0].scale(2.0)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-3), "{:?}", p[0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [Tensor::scalar(1.0)];
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1e-4,
                weight_decay: 0.0,
                clip_norm: 0.0,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &[Tensor::scalar(5.0)]);
        assert!((p[0].item() - (1.0 - 1e-4)).abs() < 1e-10);
    }
}
