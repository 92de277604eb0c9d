use mmhnet_core::fdcheck::{finite_diff_check, finite_diff_check_coords};
use mmhnet_core::hierarchy::*;
use mmhnet_core::rng::{normal_tensor, seeded};
use mmhnet_core::routing::*;
use mmhnet_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        d / (na * nb)
    }
}

fn matvec_rows(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| (0..w.cols()).map(|j| (0..w.rows()).map(|k| x.get(i, k) * w.get(k, j)).sum()).collect())
        .collect()
}

#[test]
fn temporal_matches_brute_force() {
    let mut rng = seeded(11);
    for _ in 0..20 {
        let l = rng.random_range(1..40);
        let x = normal_tensor(&mut rng, l, 5, 1.0);
        let wq = normal_tensor(&mut rng, 5, 5, 1.0);
        let wk = normal_tensor(&mut rng, 5, 5, 1.0);
        let d = temporal_route(&x, &wq, &wk, 0.5).unwrap();
        let q = matvec_rows(&x, &wq);
        let k = matvec_rows(&x, &wk);
        for i in 0..l {
            let p = if i == 0 { 1.0 } else { 0.5 * (1.0 - cos(&q[i], &k[i - 1])) };
            assert!((d.p[i] - p).abs() < 1e-12);
            assert_eq!(d.b[i], i == 0 || p >= 0.5);
        }
    }
}

#[test]
fn mm_matches_brute_force() {
    let mut rng = seeded(12);
    for _ in 0..20 {
        let l = rng.random_range(1..30);
        let l2 = rng.random_range(1..30);
        let x = normal_tensor(&mut rng, l, 4, 1.0);
        let y = normal_tensor(&mut rng, l2, 3, 1.0);
        let wq = normal_tensor(&mut rng, 4, 6, 1.0);
        let wk = normal_tensor(&mut rng, 3, 6, 1.0);
        let d = mm_route(&x, &y, &wq, &wk, 0.5).unwrap();
        let q = matvec_rows(&x, &wq);
        let k = matvec_rows(&y, &wk);
        for i in 0..l {
            let j = (((i as f64 + 0.5) * l2 as f64 / l as f64).round() as usize).clamp(1, l2) - 1;
            let s = cos(&q[i], &k[j]);
            assert!((d.p[i] - 0.5 * (1.0 + s)).abs() < 1e-12);
            assert_eq!(d.b[i], i == 0 || s >= 0.5);
        }
    }
}

#[test]
fn traced_probs_match_plain_routing() {
    let mut rng = seeded(13);
    let x = normal_tensor(&mut rng, 12, 4, 1.0);
    let y = normal_tensor(&mut rng, 7, 3, 1.0);
    let wq = normal_tensor(&mut rng, 4, 4, 1.0);
    let wk = normal_tensor(&mut rng, 4, 4, 1.0);
    let wk2 = normal_tensor(&mut rng, 3, 4, 1.0);
    let mut g = Graph::inference();
    let (xv, yv, q, k, k2) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wk2.clone()));
    let (p, s) = temporal_probs(&mut g, xv, q, k, SimilarityMetric::Cosine).unwrap();
    let traced = decide(&g, p, s, 0.5, RoutingKind::Temporal, TemporalRule::Probability).unwrap();
    let plain = temporal_route(&x, &wq, &wk, 0.5).unwrap();
    assert_eq!(traced.b, plain.b);
    for (a, b) in traced.p.iter().zip(&plain.p) {
        assert!((a - b).abs() < 1e-14);
    }
    let (p, s) = mm_probs(&mut g, xv, yv, q, k2, SimilarityMetric::Cosine).unwrap();
    let traced = decide(&g, p, s, 0.5, RoutingKind::Mm, TemporalRule::Probability).unwrap();
    let plain = mm_route(&x, &y, &wq, &wk2, 0.5).unwrap();
    assert_eq!(traced.b, plain.b);
    for (a, b) in traced.p.iter().zip(&plain.p) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn routing_probs_gradients_match_fd() {
    let mut rng = seeded(14);
    let x = normal_tensor(&mut rng, 6, 3, 1.0);
    let y = normal_tensor(&mut rng, 4, 2, 1.0);
    for metric in [SimilarityMetric::Cosine, SimilarityMetric::Euclidean, SimilarityMetric::DotProduct] {
        let scale = if metric == SimilarityMetric::DotProduct { 0.1 } else { 1.0 };
        let params = vec![x.clone(), normal_tensor(&mut rng, 3, 3, scale), normal_tensor(&mut rng, 3, 3, scale)];
        let err = finite_diff_check(
            |g, v| {
                let (p, _) = temporal_probs(g, v[0], v[1], v[2], metric)?;
                let w = g.constant(Tensor::from_fn(6, 1, |i, _| 1.0 + i as f64));
                let pw = g.mul(p, w)?;
                Ok(g.sum(pw))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{metric:?} temporal {err}");
        let params = vec![x.clone(), y.clone(), normal_tensor(&mut rng, 3, 4, scale), normal_tensor(&mut rng, 2, 4, scale)];
        let err = finite_diff_check(
            |g, v| {
                let (p, _) = mm_probs(g, v[0], v[1], v[2], v[3], metric)?;
                let pp = g.mul(p, p)?;
                Ok(g.sum(pp))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{metric:?} mm {err}");
    }
}

/// Piecewise-constant stream over orthogonal class axes plus small noise;
/// consecutive segments always switch class.
fn segmented_stream(rng: &mut mmhnet_core::rng::Rng, len: usize, seg_len: usize, d: usize) -> (Tensor, Vec<bool>) {
    let mut x = Tensor::zeros(&[len, d]);
    let mut bits = vec![false; len];
    let mut class = 0;
    for i in 0..len {
        if i % seg_len == 0 {
            class = (class + rng.random_range(1..d)) % d;
            bits[i] = true;
        }
        for j in 0..d {
            let base = if j == class { 1.0 } else { 0.0 };
            x.set(i, j, base + 0.05 * mmhnet_core::rng::normal(rng));
        }
    }
    (x, bits)
}

#[test]
fn fitted_projections_recover_segment_fraction() {
    let mut rng = seeded(16);
    let train: Vec<_> = (0..6).map(|i| segmented_stream(&mut rng, 48, 2 + i % 4, 6)).collect();
    let init = RoutingProjections::init(&mut rng, 6, 6);
    let (fit, loss) = fit_temporal(init, &train, FitConfig::default()).unwrap();
    assert!(loss.is_finite());
    for seg in [1, 3, 6, 12] {
        let (x, bits) = segmented_stream(&mut rng, 96, seg, 6);
        let d = temporal_route(&x, &fit.wq, &fit.wk, 0.5).unwrap();
        let f = bits.iter().filter(|&&b| b).count() as f64 / 96.0;
        assert!((selection_ratio(&d) - f).abs() <= 0.1, "seg {seg}: {} vs {f}", selection_ratio(&d));
    }
}

#[test]
fn chunk_matches_filter_oracle() {
    let mut rng = seeded(17);
    for _ in 0..20 {
        let l = rng.random_range(1..30);
        let x = normal_tensor(&mut rng, l, 3, 1.0);
        let b: Vec<bool> = (0..l).map(|i| i == 0 || rng.random_bool(0.4)).collect();
        let d = RoutingDecision::new(vec![0.5; l], b.clone(), RoutingKind::Temporal).unwrap();
        let (xc, st) = chunk(&x, &d).unwrap();
        let rows: Vec<f64> = (0..l).filter(|&i| b[i]).flat_map(|i| x.row(i).to_vec()).collect();
        assert_eq!(xc.data(), &rows[..]);
        assert_eq!(st.compressed_len, d.selected_count());
    }
}

#[test]
fn ste_weighted_sum_gradient_by_fd() {
    let c = Tensor::column(&[0.5, -1.5, 2.0]);
    let a = Tensor::column(&[0.2, 0.6, 0.9]);
    let err = finite_diff_check(
        |g, v| {
            let s = ste(g, v[0])?;
            let cv = g.constant(c.clone());
            let w = g.mul(s, cv)?;
            Ok(g.sum(w))
        },
        &[a.clone()],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6);
    let mut g = Graph::new();
    let av = g.leaf(a);
    let s = ste(&mut g, av).unwrap();
    let cv = g.constant(c.clone());
    let w = g.mul(s, cv).unwrap();
    let loss = g.sum(w);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(av).unwrap(), &c);
}

#[test]
fn dechunk_probability_gradient_sign_pattern() {
    let mut rng = seeded(18);
    let b = vec![true, false, false, true, false, true, true, false];
    let l = b.len();
    let p: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..0.95)).collect();
    let d = RoutingDecision::new(p.clone(), b.clone(), RoutingKind::Temporal).unwrap();
    let st = ChunkState::from_decision(&d).unwrap();
    let xc = normal_tensor(&mut rng, st.compressed_len, 3, 1.0);
    let f = |g: &mut Graph, v: &[mmhnet_core::Var]| {
        let out = dechunk_traced(g, v[0], &st, v[1])?;
        Ok(g.sum(out))
    };
    let params = [xc.clone(), Tensor::column(&p)];
    let rep = finite_diff_check_coords(f, &params, 1e-6, &[(0..xc.numel()).collect(), (0..l).collect()]).unwrap();
    assert!(rep.max_rel_error <= 1e-6);
    let mut g = Graph::new();
    let xv = g.leaf(xc.clone());
    let pv = g.leaf(Tensor::column(&p));
    let out = dechunk_traced(&mut g, xv, &st, pv).unwrap();
    assert_eq!(g.value(out), &dechunk(&xc, &st).unwrap());
    let loss = g.sum(out);
    g.backward(loss).unwrap();
    let gp = g.grad(pv).unwrap();
    for i in 0..l {
        let row_sum: f64 = xc.row(st.index_map[i] - 1).iter().sum();
        let expect = if b[i] { row_sum } else { -row_sum };
        assert!((gp.get(i, 0) - expect).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_routing_is_scale_invariant(seed in any::<u64>(), l in 1usize..30, s in 0.01f64..100.0) {
        let mut rng = seeded(seed);
        let x = normal_tensor(&mut rng, l, 4, 1.0);
        let wq = normal_tensor(&mut rng, 4, 4, 1.0);
        let wk = normal_tensor(&mut rng, 4, 4, 1.0);
        let a = temporal_route(&x, &wq, &wk, 0.5).unwrap();
        let b = temporal_route(&x.scale(s), &wq, &wk, 0.5).unwrap();
        for (pa, pb) in a.p.iter().zip(&b.p) {
            prop_assert!((pa - pb).abs() < 1e-12);
        }
        // bits may only flip where p sits within rounding of the threshold
        for i in 0..l {
            if (a.p[i] - 0.5).abs() > 1e-12 {
                prop_assert_eq!(a.b[i], b.b[i]);
            }
        }
    }

    #[test]
    fn first_bit_and_tau_monotonicity(seed in any::<u64>(), l in 1usize..30, t1 in 0.05f64..0.95, t2 in 0.05f64..0.95) {
        let mut rng = seeded(seed);
        let x = normal_tensor(&mut rng, l, 3, 1.0);
        let y = normal_tensor(&mut rng, l + 3, 3, 1.0);
        let w = normal_tensor(&mut rng, 3, 3, 1.0);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = temporal_route(&x, &w, &w, lo).unwrap();
        let b = temporal_route(&x, &w, &w, hi).unwrap();
        prop_assert!(a.b[0] && b.b[0]);
        prop_assert!(b.selected_count() <= a.selected_count());
        let c = mm_route(&x, &y, &w, &w, lo).unwrap();
        let d = mm_route(&x, &y, &w, &w, hi).unwrap();
        prop_assert!(c.b[0] && d.b[0]);
        prop_assert!(d.selected_count() <= c.selected_count());
        prop_assert!(a.p.iter().chain(&c.p).all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn round_trip_is_piecewise_constant(seed in any::<u64>(), l in 1usize..40) {
        let mut rng = seeded(seed);
        let x = normal_tensor(&mut rng, l, 3, 1.0);
        let b: Vec<bool> = (0..l).map(|i| i == 0 || rng.random_bool(0.5)).collect();
        let p: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
        let d = RoutingDecision::new(p.clone(), b.clone(), RoutingKind::Temporal).unwrap();
        let (xc, st) = chunk(&x, &d).unwrap();
        prop_assert_eq!(xc.rows(), d.selected_count());
        let mut g = Graph::new();
        let xv = g.leaf(xc.clone());
        let pv = g.leaf(Tensor::column(&p));
        let out = dechunk_traced(&mut g, xv, &st, pv).unwrap();
        let mut last = 0;
        for i in 0..l {
            if b[i] { last = i; }
            prop_assert_eq!(g.value(out).row(i), x.row(last));
        }
        prop_assert!(st.index_map.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(st.index_map[0], 1);
        prop_assert_eq!(*st.index_map.last().unwrap(), st.compressed_len);
    }
}
