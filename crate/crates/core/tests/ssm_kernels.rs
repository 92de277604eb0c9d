use mmhnet_core::fdcheck::finite_diff_check;
use mmhnet_core::rng::{normal_tensor, seeded, Rng};
use mmhnet_core::ssm::*;
use mmhnet_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random_params(rng: &mut Rng, l: usize, n: usize) -> SsmParams {
    let a = (0..l).map(|_| -rng.random_range(0.05..2.0)).collect();
    let d = (0..l).map(|_| rng.random_range(0.05..1.5)).collect();
    SsmParams::new(a, d, normal_tensor(rng, l, n, 1.0), normal_tensor(rng, l, n, 1.0)).unwrap()
}

#[test]
fn random_batch_stays_inside_decay_range() {
    let mut rng = seeded(1);
    let a: Vec<f64> = (0..5000).map(|_| -libm::exp(rng.random_range(-12.0..6.0))).collect();
    let d: Vec<f64> = (0..5000).map(|_| libm::exp(rng.random_range(-6.0..4.0))).collect();
    let (alpha, gamma) = discretize(&a, &d).unwrap();
    assert!(alpha.iter().all(|&v| v >= libm::exp(-20.0) && v < 1.0));
    assert_eq!(gamma, d);
}

#[test]
fn scan_matches_matrix_form_l32() {
    let mut rng = seeded(2);
    let p = random_params(&mut rng, 32, 6);
    let x = normal_tensor(&mut rng, 32, 5, 1.0);
    let ys = scan_causal(&p, &x).unwrap();
    let ym = ssd_matrix_form(&p, &x, MixerMode::Causal).unwrap();
    assert!(ys.max_abs_diff(&ym) <= 1e-10);
}

#[test]
fn noncausal_fast_matches_dense_l64() {
    let mut rng = seeded(3);
    let p = random_params(&mut rng, 64, 8);
    let x = normal_tensor(&mut rng, 64, 4, 1.0);
    let fast = noncausal_fast(&p, &x).unwrap();
    let dense = ssd_matrix_form(&p, &x, MixerMode::NonCausal).unwrap();
    assert!(fast.max_abs_diff(&dense) <= 1e-10);
    let fast_u = noncausal_fast_with(&p, &x, NonCausalMask::Unit).unwrap();
    let dense_u = ssd_matrix_form_with(&p, &x, MixerMode::NonCausal, NonCausalMask::Unit).unwrap();
    assert!(fast_u.max_abs_diff(&dense_u) <= 1e-10);
}

#[test]
fn long_range_profiles_at_300() {
    let l = 300;
    let mut rng = seeded(4);
    let alpha: Vec<f64> = (0..l).map(|_| rng.random_range(0.3..0.9)).collect();
    let p = SsmParams::from_discrete(alpha, vec![1.0; l], Tensor::ones(&[l, 2]), Tensor::ones(&[l, 2])).unwrap();
    let c = contribution_profile(&p, MixerMode::Causal).unwrap();
    let n = contribution_profile(&p, MixerMode::NonCausal).unwrap();
    assert!(c[0] < 1e-9);
    let uniform = SsmParams::from_discrete(vec![0.9; l], vec![1.0; l], Tensor::ones(&[l, 2]), Tensor::ones(&[l, 2])).unwrap();
    assert_eq!(contribution_profile(&uniform, MixerMode::NonCausal).unwrap()[0], 1.0);
    assert!(n.iter().all(|v| *v > 0.0 && *v <= 1.0));
}

#[test]
fn noncausal_profile_independent_of_length() {
    let first = |l: usize| {
        let p = SsmParams::from_discrete(vec![0.7; l], vec![0.5; l], Tensor::ones(&[l, 3]), Tensor::ones(&[l, 3])).unwrap();
        contribution_profile(&p, MixerMode::NonCausal).unwrap()
    };
    let base = first(16);
    for l in [256, 4096] {
        let prof = first(l);
        let dev = prof.iter().map(|v| (v - base[0]).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-12);
    }
}

#[test]
fn causal_profile_first_is_power() {
    for l in [2, 17, 100] {
        let p = SsmParams::from_discrete(vec![0.8; l], vec![1.0; l], Tensor::ones(&[l, 1]), Tensor::ones(&[l, 1])).unwrap();
        let prof = contribution_profile(&p, MixerMode::Causal).unwrap();
        let expect = libm::pow(0.8, (l - 1) as f64);
        assert!((prof[0] - expect).abs() <= 1e-12 * expect);
    }
}

fn heads_inputs(rng: &mut Rng, l: usize, h: usize, n: usize, p: usize) -> Vec<Tensor> {
    let alpha = Tensor::from_fn(l, h, |_, _| rng.random_range(0.3..0.95));
    let gamma = Tensor::from_fn(l, h, |_, _| rng.random_range(0.1..1.2));
    vec![alpha, gamma, normal_tensor(rng, l, n, 1.0), normal_tensor(rng, l, n, 1.0), normal_tensor(rng, l, h * p, 1.0)]
}

fn per_head_reference(ins: &[Tensor], h: usize, p: usize, mode: MixerMode) -> Tensor {
    let l = ins[0].rows();
    let mut out = Tensor::zeros(&[l, h * p]);
    for head in 0..h {
        let alpha = (0..l).map(|t| ins[0].get(t, head)).collect();
        let gamma = (0..l).map(|t| ins[1].get(t, head)).collect();
        let params = SsmParams::from_discrete(alpha, gamma, ins[2].clone(), ins[3].clone()).unwrap();
        let x = Tensor::from_fn(l, p, |t, j| ins[4].get(t, head * p + j));
        let y = ssd_matrix_form(&params, &x, mode).unwrap();
        for t in 0..l {
            for j in 0..p {
                out.set(t, head * p + j, y.get(t, j));
            }
        }
    }
    out
}

#[test]
fn traced_ops_match_per_head_kernels() {
    let mut rng = seeded(5);
    let (l, h, n, p) = (9, 3, 4, 2);
    let ins = heads_inputs(&mut rng, l, h, n, p);
    let mut g = Graph::inference();
    let v: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
    let yc = causal_scan_op(&mut g, v[0], v[1], v[2], v[3], v[4]).unwrap();
    let w = Tensor::from_fn(l, h, |t, k| ins[1].get(t, k) / ins[0].get(t, k));
    let wv = g.constant(w);
    let yn = global_mix_op(&mut g, wv, v[2], v[3], v[4]).unwrap();
    assert!(g.value(yc).max_abs_diff(&per_head_reference(&ins, h, p, MixerMode::Causal)) <= 1e-10);
    assert!(g.value(yn).max_abs_diff(&per_head_reference(&ins, h, p, MixerMode::NonCausal)) <= 1e-10);
}

fn weighted_loss(g: &mut Graph, y: mmhnet_core::Var) -> mmhnet_core::Result<mmhnet_core::Var> {
    let (r, c) = g.value(y).dims2();
    let wt = g.constant(Tensor::from_fn(r, c, |i, j| 0.3 + 0.1 * i as f64 - 0.2 * j as f64));
    let yy = g.mul(y, wt)?;
    let sq = g.mul(yy, y)?;
    Ok(g.sum(sq))
}

#[test]
fn causal_scan_gradients_match_fd() {
    let mut rng = seeded(6);
    let ins = heads_inputs(&mut rng, 7, 2, 3, 2);
    let err = finite_diff_check(
        |g, v| {
            let y = causal_scan_op(g, v[0], v[1], v[2], v[3], v[4])?;
            weighted_loss(g, y)
        },
        &ins,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn global_mix_gradients_match_fd() {
    let mut rng = seeded(7);
    let mut ins = heads_inputs(&mut rng, 7, 2, 3, 2);
    ins.remove(0);
    let err = finite_diff_check(
        |g, v| {
            let y = global_mix_op(g, v[0], v[1], v[2], v[3])?;
            weighted_loss(g, y)
        },
        &ins,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn noncausal_gradient_through_inverse_alpha() {
    let mut rng = seeded(8);
    let ins = heads_inputs(&mut rng, 6, 2, 3, 2);
    let err = finite_diff_check(
        |g, v| {
            let inv = g.reciprocal(v[0])?;
            let w = g.mul(v[1], inv)?;
            let y = global_mix_op(g, w, v[2], v[3], v[4])?;
            weighted_loss(g, y)
        },
        &ins,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

fn instance(seed: u64, l: usize, n: usize, d: usize) -> (SsmParams, Tensor) {
    let mut rng = seeded(seed);
    let p = random_params(&mut rng, l, n);
    let x = normal_tensor(&mut rng, l, d, 1.0);
    (p, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scan_equals_matrix_form(seed in any::<u64>(), l in 1usize..=64, n in 1usize..=8, d in 1usize..=8) {
        let (p, x) = instance(seed, l, n, d);
        let ys = scan_causal(&p, &x).unwrap();
        let ym = ssd_matrix_form(&p, &x, MixerMode::Causal).unwrap();
        prop_assert!(ys.max_abs_diff(&ym) <= 1e-10);
    }

    #[test]
    fn mask_structure(seed in any::<u64>(), l in 1usize..=40) {
        let mut rng = seeded(seed);
        let alpha: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..0.999)).collect();
        let c = build_mask(&alpha, MixerMode::Causal).unwrap();
        for i in 0..l {
            prop_assert_eq!(c.get(i, i), 1.0);
            for j in 0..l {
                let v = c.get(i, j);
                if j > i { prop_assert_eq!(v, 0.0); } else { prop_assert!(v > 0.0 && v <= 1.0); }
            }
        }
        let m = build_mask(&alpha, MixerMode::NonCausal).unwrap();
        for i in 1..l {
            prop_assert_eq!(m.row(i), m.row(0));
        }
    }

    #[test]
    fn noncausal_is_permutation_equivariant(seed in any::<u64>(), l in 2usize..=24) {
        let (p, x) = instance(seed, l, 4, 3);
        let mut rng = seeded(seed ^ 0x9e37);
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pp = SsmParams::from_discrete(
            pick(p.alpha()),
            pick(p.gamma()),
            p.b().gather_rows(&perm).unwrap(),
            p.c().gather_rows(&perm).unwrap(),
        ).unwrap();
        let px = x.gather_rows(&perm).unwrap();
        let y = noncausal_fast(&p, &x).unwrap();
        let yp = noncausal_fast(&pp, &px).unwrap();
        prop_assert!(yp.max_abs_diff(&y.gather_rows(&perm).unwrap()) <= 1e-12 * (1.0 + y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
        let h = global_state(&p, &x).unwrap();
        let hp = global_state(&pp, &px).unwrap();
        prop_assert!(h.max_abs_diff(&hp) <= 1e-12 * (1.0 + h.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }
}
