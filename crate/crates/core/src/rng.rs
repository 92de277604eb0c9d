//! Seeded randomness shared by initializers, data synthesis and sampling.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes several integers into one seed (splitmix64 finalizer per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| std * normal(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Matrix with orthonormal columns (or rows, when `rows < cols`), obtained by
/// Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm < 1e-8 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    if rows >= cols {
        Tensor::from_fn(rows, cols, |i, j| basis[j][i])
    } else {
        Tensor::from_fn(rows, cols, |i, j| basis[i][j])
    }
}
