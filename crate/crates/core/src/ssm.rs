//! Mamba-2 style state-space token mixing.
//!
//! The recurrence `h_ℓ = α_ℓ h_{ℓ−1} + γ_ℓ B_ℓ x_ℓᵀ`, `y_ℓ = C_ℓᵀ h_ℓ` and its
//! matrix form `Y = (M ∘ C Bᵀ)(γ ⊙ X)` are implemented side by side so each
//! can check the other. `M` only holds decay factors: the causal mask is
//! lower-triangular with `M_ij = ∏_{k=j+1}^{i} α_k`, the non-causal mask is
//! dense with `M_ij = 1/α_j`. The dense non-causal mask factorizes into a
//! single global state `H = Σ_j (γ_j/α_j) B_j x_jᵀ`, giving an O(L) path.
//!
//! [`causal_scan_op`] and [`global_mix_op`] are the multi-head, differentiable
//! versions used inside the model.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to `Δ·A` before exponentiation.
pub const LOG_DECAY_FLOOR: f64 = -20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MixerMode {
    Causal,
    #[default]
    NonCausal,
}

/// Source-column weighting of the non-causal mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NonCausalMask {
    /// `M_ij = 1/α_j`.
    #[default]
    Inverse,
    /// `M_ij = 1`, plain aggregation.
    Unit,
}

/// `α = exp(max(Δ·A, −20))`, `γ = Δ`.
pub fn discretize(a: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != delta.len() {
        return Err(Error::shape("discretize", &[a.len()], &[delta.len()]));
    }
    if let Some(i) = a.iter().position(|&v| !(v < 0.0)) {
        return Err(Error::Domain { op: "discretize(A<0)", index: i });
    }
    if let Some(i) = delta.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain { op: "discretize(delta>0)", index: i });
    }
    let alpha = a
        .iter()
        .zip(delta)
        .map(|(&a, &d)| libm::exp((d * a).max(LOG_DECAY_FLOOR)))
        .collect();
    Ok((alpha, delta.to_vec()))
}

/// Per-position discretized parameters of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    a: Vec<f64>,
    delta: Vec<f64>,
    b: Tensor,
    c: Tensor,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

impl SsmParams {
    pub fn new(a: Vec<f64>, delta: Vec<f64>, b: Tensor, c: Tensor) -> Result<Self> {
        let l = a.len();
        if b.shape() != c.shape() || b.rows() != l || b.shape().len() != 2 {
            return Err(Error::shape("SsmParams", b.shape(), c.shape()));
        }
        let (alpha, gamma) = discretize(&a, &delta)?;
        Ok(Self {
            a,
            delta,
            b,
            c,
            alpha,
            gamma,
        })
    }

    /// Builds parameters from already discretized `α ∈ (0,1)` and `γ > 0`
    /// (with `Δ = γ`, `A = ln α / γ`).
    pub fn from_discrete(alpha: Vec<f64>, gamma: Vec<f64>, b: Tensor, c: Tensor) -> Result<Self> {
        if let Some(i) = alpha.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain { op: "SsmParams(alpha)", index: i });
        }
        if alpha.len() != gamma.len() {
            return Err(Error::shape("SsmParams", &[alpha.len()], &[gamma.len()]));
        }
        if let Some(i) = gamma.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain { op: "SsmParams(gamma)", index: i });
        }
        let l = alpha.len();
        if b.shape() != c.shape() || b.rows() != l || b.shape().len() != 2 {
            return Err(Error::shape("SsmParams", b.shape(), c.shape()));
        }
        let a = alpha.iter().zip(&gamma).map(|(&al, &g)| libm::log(al) / g).collect();
        Ok(Self {
            a,
            delta: gamma.clone(),
            b,
            c,
            alpha,
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn c(&self) -> &Tensor {
        &self.c
    }

    fn check_input(&self, op: &'static str, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.rows() != self.len() {
            return Err(Error::shape(op, &[self.len(), self.state_dim()], x.shape()));
        }
        Ok(())
    }

    /// Rows scaled by `γ`: the input term of the matrix form.
    fn scaled_input(&self, x: &Tensor) -> Tensor {
        let mut xs = x.clone();
        for (i, &g) in self.gamma.iter().enumerate() {
            for v in xs.row_mut(i) {
                *v *= g;
            }
        }
        xs
    }
}

/// Left-to-right recurrence from `h₀ = 0`. O(L·N·D) time, O(N·D) state.
pub fn scan_causal(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    params.check_input("scan_causal", x)?;
    let (l, d) = x.dims2();
    let n = params.state_dim();
    let mut h = vec![0.0; n * d];
    let mut y = Tensor::zeros(&[l, d]);
    for t in 0..l {
        let a = params.alpha[t];
        let g = params.gamma[t];
        let b = params.b.row(t);
        let c = params.c.row(t);
        let xr = x.row(t);
        let yr = y.row_mut(t);
        for k in 0..n {
            let hk = &mut h[k * d..(k + 1) * d];
            let gb = g * b[k];
            let ck = c[k];
            for j in 0..d {
                hk[j] = a * hk[j] + gb * xr[j];
                yr[j] += ck * hk[j];
            }
        }
    }
    Ok(y)
}

pub fn build_mask(alpha: &[f64], mode: MixerMode) -> Result<Tensor> {
    build_mask_with(alpha, mode, NonCausalMask::Inverse)
}

pub fn build_mask_with(alpha: &[f64], mode: MixerMode, nc: NonCausalMask) -> Result<Tensor> {
    if let Some(i) = alpha.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain { op: "build_mask", index: i });
    }
    let l = alpha.len();
    if l == 0 {
        return Err(Error::invalid("build_mask: empty sequence"));
    }
    let mut m = Tensor::zeros(&[l, l]);
    match mode {
        MixerMode::Causal => {
            for j in 0..l {
                let mut p = 1.0;
                m.set(j, j, 1.0);
                for i in j + 1..l {
                    p *= alpha[i];
                    m.set(i, j, p);
                }
            }
        }
        MixerMode::NonCausal => {
            for j in 0..l {
                let w = match nc {
                    NonCausalMask::Inverse => 1.0 / alpha[j],
                    NonCausalMask::Unit => 1.0,
                };
                for i in 0..l {
                    m.set(i, j, w);
                }
            }
        }
    }
    Ok(m)
}

/// Dense `(M ∘ C Bᵀ) · (γ ⊙ X)`.
pub fn ssd_matrix_form(params: &SsmParams, x: &Tensor, mode: MixerMode) -> Result<Tensor> {
    ssd_matrix_form_with(params, x, mode, NonCausalMask::Inverse)
}

pub fn ssd_matrix_form_with(params: &SsmParams, x: &Tensor, mode: MixerMode, nc: NonCausalMask) -> Result<Tensor> {
    params.check_input("ssd_matrix_form", x)?;
    let m = build_mask_with(&params.alpha, mode, nc)?;
    let cbt = params.c.matmul(&params.b.transpose())?;
    let gm = m.mul(&cbt)?;
    gm.matmul(&params.scaled_input(x))
}

/// Non-causal fast path: `H = Σ_j w_j B_j x_jᵀ`, `y_i = C_iᵀ H`.
pub fn noncausal_fast(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    noncausal_fast_with(params, x, NonCausalMask::Inverse)
}

pub fn noncausal_fast_with(params: &SsmParams, x: &Tensor, nc: NonCausalMask) -> Result<Tensor> {
    params.check_input("noncausal_fast", x)?;
    let h = global_state_with(params, x, nc);
    params.c.matmul(&h)
}

/// The shared `N × D` hidden state of the non-causal form.
pub fn global_state(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    params.check_input("global_state", x)?;
    Ok(global_state_with(params, x, NonCausalMask::Inverse))
}

fn global_state_with(params: &SsmParams, x: &Tensor, nc: NonCausalMask) -> Tensor {
    let (l, d) = x.dims2();
    let n = params.state_dim();
    let mut h = Tensor::zeros(&[n, d]);
    for t in 0..l {
        let w = match nc {
            NonCausalMask::Inverse => params.gamma[t] / params.alpha[t],
            NonCausalMask::Unit => params.gamma[t],
        };
        let b = params.b.row(t);
        let xr = x.row(t);
        for k in 0..n {
            let wb = w * b[k];
            for (hv, xv) in h.row_mut(k).iter_mut().zip(xr) {
                *hv += wb * xv;
            }
        }
    }
    h
}

/// Magnitude of source position `j`'s contribution to the last output:
/// `|M_Lj · C_Lᵀ B_j · γ_j|`, normalized by its maximum over `j`.
pub fn contribution_profile(params: &SsmParams, mode: MixerMode) -> Result<Vec<f64>> {
    let l = params.len();
    if l < 2 {
        return Err(Error::invalid("contribution_profile needs L >= 2"));
    }
    let last = l - 1;
    let cl = params.c.row(last);
    // Causal M_{L,j} built right to left so each entry is one extra product.
    let mut mask_row = vec![0.0; l];
    match mode {
        MixerMode::Causal => {
            let mut p = 1.0;
            mask_row[last] = 1.0;
            for j in (0..last).rev() {
                p *= params.alpha[j + 1];
                mask_row[j] = p;
            }
        }
        MixerMode::NonCausal => {
            for (j, m) in mask_row.iter_mut().enumerate() {
                *m = 1.0 / params.alpha[j];
            }
        }
    }
    let mut prof: Vec<f64> = (0..l)
        .map(|j| {
            let cb: f64 = cl.iter().zip(params.b.row(j)).map(|(a, b)| a * b).sum();
            (mask_row[j] * cb * params.gamma[j]).abs()
        })
        .collect();
    let max = prof.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for p in &mut prof {
            *p /= max;
        }
    }
    Ok(prof)
}

fn check_heads(op: &'static str, g: &Graph, coef: &[Var], b: Var, c: Var, x: Var) -> Result<(usize, usize, usize, usize)> {
    let (l, h) = g.value(coef[0]).dims2();
    for &v in coef {
        if g.value(v).dims2() != (l, h) {
            return Err(Error::shape(op, g.shape(coef[0]), g.shape(v)));
        }
    }
    let (lb, n) = g.value(b).dims2();
    if lb != l || g.value(c).dims2() != (l, n) {
        return Err(Error::shape(op, g.shape(b), g.shape(c)));
    }
    let (lx, dx) = g.value(x).dims2();
    if lx != l || h == 0 || dx % h != 0 {
        return Err(Error::shape(op, g.shape(x), &[l, h]));
    }
    Ok((l, h, n, dx / h))
}

/// Differentiable multi-head causal scan.
///
/// `alpha, gamma: L × H`, `b, c: L × N` (shared by all heads),
/// `x: L × (H·P)`; head `h` owns columns `h·P..(h+1)·P`.
pub fn causal_scan_op(g: &mut Graph, alpha: Var, gamma: Var, b: Var, c: Var, x: Var) -> Result<Var> {
    let (l, heads, n, p) = check_heads("causal_scan_op", g, &[alpha, gamma], b, c, x)?;
    let av = g.value(alpha);
    let gv = g.value(gamma);
    let bv = g.value(b);
    let cv = g.value(c);
    let xv = g.value(x);
    let dx = heads * p;
    let keep = g.is_tracing();
    // states[t][h] is the N×P state after step t
    let mut states: Vec<Vec<f64>> = if keep { Vec::with_capacity(l) } else { Vec::new() };
    let mut s = vec![0.0; heads * n * p];
    let mut y = Tensor::zeros(&[l, dx]);
    for t in 0..l {
        let br = bv.row(t);
        let cr = cv.row(t);
        let xr = xv.row(t);
        for h in 0..heads {
            let a = av.get(t, h);
            let gm = gv.get(t, h);
            let sh = &mut s[h * n * p..(h + 1) * n * p];
            let xh = &xr[h * p..(h + 1) * p];
            let yh = &mut y.row_mut(t)[h * p..(h + 1) * p];
            for k in 0..n {
                let sk = &mut sh[k * p..(k + 1) * p];
                let gb = gm * br[k];
                let ck = cr[k];
                for j in 0..p {
                    sk[j] = a * sk[j] + gb * xh[j];
                    yh[j] += ck * sk[j];
                }
            }
        }
        if keep {
            states.push(s.clone());
        }
    }
    g.push_op(
        "causal_scan",
        y,
        &[alpha, gamma, b, c, x],
        move |ins: &[&Tensor], _: &Tensor, gy: &Tensor| {
            let (av, gv, bv, cv, xv) = (ins[0], ins[1], ins[2], ins[3], ins[4]);
            let mut ga = Tensor::zeros(av.shape());
            let mut gg = Tensor::zeros(gv.shape());
            let mut gb = Tensor::zeros(bv.shape());
            let mut gc = Tensor::zeros(cv.shape());
            let mut gx = Tensor::zeros(xv.shape());
            let mut gs = vec![0.0; heads * n * p];
            let zero = vec![0.0; heads * n * p];
            for t in (0..l).rev() {
                let st = &states[t];
                let prev = if t > 0 { &states[t - 1] } else { &zero };
                let br = bv.row(t);
                let cr = cv.row(t);
                let xr = xv.row(t);
                let gyr = gy.row(t);
                for h in 0..heads {
                    let off = h * n * p;
                    let gyh = &gyr[h * p..(h + 1) * p];
                    let xh = &xr[h * p..(h + 1) * p];
                    let gm = gv.get(t, h);
                    let mut d_alpha = 0.0;
                    let mut d_gamma = 0.0;
                    for k in 0..n {
                        let sk = &st[off + k * p..off + (k + 1) * p];
                        let pk = &prev[off + k * p..off + (k + 1) * p];
                        let gsk = &mut gs[off + k * p..off + (k + 1) * p];
                        let mut dc = 0.0;
                        let mut dbk = 0.0;
                        for j in 0..p {
                            dc += sk[j] * gyh[j];
                            gsk[j] += cr[k] * gyh[j];
                            d_alpha += gsk[j] * pk[j];
                            dbk += gsk[j] * xh[j];
                        }
                        gc.data_mut()[t * n + k] += dc;
                        d_gamma += br[k] * dbk;
                        gb.data_mut()[t * n + k] += gm * dbk;
                    }
                    let gxr = &mut gx.row_mut(t)[h * p..(h + 1) * p];
                    for j in 0..p {
                        let mut acc = 0.0;
                        for k in 0..n {
                            acc += gs[off + k * p + j] * br[k];
                        }
                        gxr[j] = gm * acc;
                    }
                    ga.data_mut()[t * heads + h] = d_alpha;
                    gg.data_mut()[t * heads + h] = d_gamma;
                    let a = av.get(t, h);
                    for v in &mut gs[off..off + n * p] {
                        *v *= a;
                    }
                }
            }
            vec![Some(ga), Some(gg), Some(gb), Some(gc), Some(gx)]
        },
    )
}

/// Differentiable multi-head global-state mixing
/// `y_{i,h} = C_iᵀ Σ_j w_{j,h} B_j x_{j,h}ᵀ`.
///
/// With `w = γ/α` this is the non-causal SSD layer; with `w = γ` it is the
/// unit-mask variant. Shapes follow [`causal_scan_op`].
pub fn global_mix_op(g: &mut Graph, w: Var, b: Var, c: Var, x: Var) -> Result<Var> {
    let (l, heads, n, p) = check_heads("global_mix_op", g, &[w], b, c, x)?;
    let wv = g.value(w);
    let bv = g.value(b);
    let cv = g.value(c);
    let xv = g.value(x);
    let mut hs = vec![0.0; heads * n * p];
    for t in 0..l {
        let br = bv.row(t);
        let xr = xv.row(t);
        for h in 0..heads {
            let wt = wv.get(t, h);
            for k in 0..n {
                let wb = wt * br[k];
                let hk = &mut hs[(h * n + k) * p..(h * n + k + 1) * p];
                for (hv, xv) in hk.iter_mut().zip(&xr[h * p..(h + 1) * p]) {
                    *hv += wb * xv;
                }
            }
        }
    }
    let mut y = Tensor::zeros(&[l, heads * p]);
    for t in 0..l {
        let cr = cv.row(t);
        let yr = y.row_mut(t);
        for h in 0..heads {
            for k in 0..n {
                let ck = cr[k];
                let hk = &hs[(h * n + k) * p..(h * n + k + 1) * p];
                for (yv, hv) in yr[h * p..(h + 1) * p].iter_mut().zip(hk) {
                    *yv += ck * hv;
                }
            }
        }
    }
    g.push_op("global_mix", y, &[w, b, c, x], move |ins: &[&Tensor], _: &Tensor, gy: &Tensor| {
        let (wv, bv, cv, xv) = (ins[0], ins[1], ins[2], ins[3]);
        let mut gh = vec![0.0; heads * n * p];
        let mut gc = Tensor::zeros(cv.shape());
        for t in 0..l {
            let cr = cv.row(t);
            let gyr = gy.row(t);
            for h in 0..heads {
                let gyh = &gyr[h * p..(h + 1) * p];
                for k in 0..n {
                    let off = (h * n + k) * p;
                    let mut dc = 0.0;
                    for j in 0..p {
                        gh[off + j] += cr[k] * gyh[j];
                        dc += hs[off + j] * gyh[j];
                    }
                    gc.data_mut()[t * n + k] += dc;
                }
            }
        }
        let mut gw = Tensor::zeros(wv.shape());
        let mut gb = Tensor::zeros(bv.shape());
        let mut gx = Tensor::zeros(xv.shape());
        for t in 0..l {
            let br = bv.row(t);
            let xr = xv.row(t);
            for h in 0..heads {
                let wt = wv.get(t, h);
                let xh = &xr[h * p..(h + 1) * p];
                let mut dw = 0.0;
                for k in 0..n {
                    let off = (h * n + k) * p;
                    let ghx: f64 = (0..p).map(|j| gh[off + j] * xh[j]).sum();
                    dw += br[k] * ghx;
                    gb.data_mut()[t * n + k] += wt * ghx;
                }
                let gxr = &mut gx.row_mut(t)[h * p..(h + 1) * p];
                for (j, o) in gxr.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += gh[(h * n + k) * p + j] * br[k];
                    }
                    *o = wt * acc;
                }
                gw.data_mut()[t * heads + h] = dw;
            }
        }
        vec![Some(gw), Some(gb), Some(gc), Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(alpha: f64, l: usize) -> SsmParams {
        SsmParams::from_discrete(vec![alpha; l], vec![1.0; l], Tensor::ones(&[l, 1]), Tensor::ones(&[l, 1])).unwrap()
    }

    #[test]
    fn discretize_unit_case() {
        let (a, g) = discretize(&[-1.0], &[1.0]).unwrap();
        assert!((a[0] - 0.367_879_441_171_442_33).abs() < 1e-15);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn discretize_no_decay_limit() {
        let (a, _) = discretize(&[-1e-9], &[1.0]).unwrap();
        assert!(a[0] < 1.0 && a[0] > 1.0 - 2e-9);
    }

    #[test]
    fn discretize_names_offending_index() {
        assert_eq!(
            discretize(&[-1.0, 0.5], &[1.0, 1.0]),
            Err(Error::Domain {
                op: "discretize(A<0)",
                index: 1
            })
        );
        assert!(matches!(discretize(&[-1.0, -1.0], &[1.0, 0.0]), Err(Error::Domain { index: 1, .. })));
    }

    #[test]
    fn discretize_clamps_at_floor() {
        let (a, _) = discretize(&[-100.0], &[5.0]).unwrap();
        assert_eq!(a[0], libm::exp(-20.0));
    }

    #[test]
    fn causal_mask_three_tokens() {
        let (a, b, c) = (0.3, 0.5, 0.7);
        let m = build_mask(&[a, b, c], MixerMode::Causal).unwrap();
        let expect = [1.0, 0.0, 0.0, b, 1.0, 0.0, b * c, c, 1.0];
        assert_eq!(m.data(), &expect);
        let u = build_mask(&[0.5; 3], MixerMode::Causal).unwrap();
        assert_eq!(u.get(2, 0), 0.25);
    }

    #[test]
    fn noncausal_mask_is_inverse_alpha() {
        let m = build_mask(&[0.5; 4], MixerMode::NonCausal).unwrap();
        assert!(m.data().iter().all(|&v| v == 2.0));
        let u = build_mask_with(&[0.5; 4], MixerMode::NonCausal, NonCausalMask::Unit).unwrap();
        assert!(u.data().iter().all(|&v| v == 1.0));
        assert!(build_mask(&[0.5, 1.0], MixerMode::Causal).is_err());
    }

    #[test]
    fn memoryless_scan() {
        // α at the clamp floor is ~2e-9; use explicit tiny α for the memoryless case.
        let l = 4;
        let p = SsmParams::from_discrete(
            vec![1e-300; l],
            vec![0.5; l],
            Tensor::from_fn(l, 2, |i, j| (i + j) as f64),
            Tensor::from_fn(l, 2, |i, j| 1.0 + (i * j) as f64),
        )
        .unwrap();
        let x = Tensor::from_fn(l, 3, |i, j| i as f64 - j as f64);
        let y = scan_causal(&p, &x).unwrap();
        for t in 0..l {
            let cb: f64 = p.c().row(t).iter().zip(p.b().row(t)).map(|(a, b)| a * b).sum();
            for j in 0..3 {
                assert!((y.get(t, j) - 0.5 * cb * x.get(t, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_count_in_no_decay_limit() {
        let l = 10;
        let p = SsmParams::new(vec![-1e-300; l], vec![1.0; l], Tensor::ones(&[l, 1]), Tensor::ones(&[l, 1])).unwrap();
        let y = scan_causal(&p, &Tensor::ones(&[l, 1])).unwrap();
        for t in 0..l {
            assert_eq!(y.get(t, 0), (t + 1) as f64);
        }
    }

    #[test]
    fn single_token_noncausal_differs_by_inverse_alpha() {
        let p = SsmParams::from_discrete(vec![0.4], vec![0.7], Tensor::row_vector(&[1.0, 2.0]), Tensor::row_vector(&[0.5, -1.0])).unwrap();
        let x = Tensor::row_vector(&[3.0, -1.0, 2.0]);
        let yc = ssd_matrix_form(&p, &x, MixerMode::Causal).unwrap();
        let yn = ssd_matrix_form(&p, &x, MixerMode::NonCausal).unwrap();
        for j in 0..3 {
            assert!((yn.get(0, j) - yc.get(0, j) / 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn profiles_closed_form() {
        let l = 20;
        let pc = contribution_profile(&uniform(0.9, l), MixerMode::Causal).unwrap();
        for (j, v) in pc.iter().enumerate() {
            let expect = libm::pow(0.9, (l - 1 - j) as f64);
            assert!((v - expect).abs() <= 1e-12 * expect);
        }
        let pn = contribution_profile(&uniform(0.9, l), MixerMode::NonCausal).unwrap();
        assert!(pn.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(contribution_profile(&uniform(0.9, 1), MixerMode::Causal).is_err());
    }

    #[test]
    fn shape_errors() {
        let p = uniform(0.5, 3);
        assert!(scan_causal(&p, &Tensor::zeros(&[4, 2])).is_err());
        assert!(SsmParams::new(vec![-1.0; 2], vec![1.0; 2], Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 2])).is_err());
    }
}
