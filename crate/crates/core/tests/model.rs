use mmhnet_core::conditioning::{ConditionDims, RawConditions, LN_EPS};
use mmhnet_core::audit::model_gradient_audit;
use mmhnet_core::model::*;
use mmhnet_core::rng::{normal_tensor, seeded};
use mmhnet_core::routing::cross_indices;
use mmhnet_core::{Graph, Tensor};

fn dims() -> ConditionDims {
    ConditionDims {
        semantic: 12,
        sync: 4,
        text: 12,
        latent: 8,
        model: 64,
    }
}

fn tiny() -> ModelConfig {
    ModelConfig::preset(Preset::Tiny, dims())
}

fn conditions(seed: u64, len: usize) -> RawConditions {
    let mut rng = seeded(seed);
    RawConditions {
        semantic: normal_tensor(&mut rng, len, 12, 1.0),
        sync: normal_tensor(&mut rng, len, 4, 1.0),
        text: normal_tensor(&mut rng, 3, 12, 1.0),
    }
}

/// Replaces zero-initialized tensors by small noise so every path carries signal.
fn randomize(model: &mut Mmhnet, seed: u64) {
    let mut rng = seeded(seed);
    for t in model.params_mut().tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = normal_tensor(&mut rng, t.rows(), t.cols(), 0.05);
        }
    }
}

fn velocity(model: &Mmhnet, x: &Tensor, t: f64, c: &RawConditions) -> Tensor {
    let mut g = Graph::inference();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let v = model.forward(&mut g, &p, xv, t, c, false).unwrap();
    g.value(v).clone()
}

#[test]
fn output_shape_for_unseen_lengths() {
    let mut model = Mmhnet::new(tiny(), 1).unwrap();
    randomize(&mut model, 2);
    let before = model.params().clone();
    for l in [8, 32, 127, 512] {
        let mut rng = seeded(l as u64);
        let x = normal_tensor(&mut rng, l, 8, 1.0);
        let v = velocity(&model, &x, 0.3, &conditions(l as u64, l));
        assert_eq!(v.shape(), &[l, 8]);
        assert!(v.all_finite());
    }
    assert_eq!(model.params(), &before);
}

#[test]
fn zeroed_head_gives_zero_velocity() {
    let mut model = Mmhnet::new(tiny(), 3).unwrap();
    randomize(&mut model, 4);
    for name in ["head.w", "head.b"] {
        let id = model.params().find(name).unwrap();
        let t = model.params_mut().get_mut(id);
        *t = Tensor::zeros(t.shape());
    }
    let mut rng = seeded(5);
    let v = velocity(&model, &normal_tensor(&mut rng, 20, 8, 1.0), 0.7, &conditions(6, 20));
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn identity_at_init_is_head_of_input_projection() {
    for mixer in [Mixer::NonCausalMamba, Mixer::CausalMamba, Mixer::AttentionNoPosEmb] {
        let mut cfg = tiny();
        cfg.mixer = mixer;
        let model = Mmhnet::new(cfg, 7).unwrap();
        let mut rng = seeded(8);
        let l = 16;
        let x = normal_tensor(&mut rng, l, 8, 1.0);
        let c = conditions(9, l);
        let v = velocity(&model, &x, 0.4, &c);

        let mut g = Graph::inference();
        let p = model.params().bind(&mut g, false);
        let ps = model.params();
        let xv = g.constant(x.clone());
        let lin = |g: &mut Graph, x, w: &str, b: &str| {
            let w = p.get(ps.find(w).unwrap());
            let b = p.get(ps.find(b).unwrap());
            g.linear(x, w, Some(b)).unwrap()
        };
        let conv = |g: &mut Graph, x, name: &str, k: usize| {
            let w = p.get(ps.find(&format!("{name}.w")).unwrap());
            let b = p.get(ps.find(&format!("{name}.b")).unwrap());
            g.conv1d(x, w, Some(b), k, k / 2, k / 2).unwrap()
        };
        let proj = |g: &mut Graph, x, name: &str, k: usize| {
            let h = conv(g, x, &format!("{name}.conv"), 7);
            let h = g.selu(h).unwrap();
            let h = conv(g, h, &format!("{name}.mlp.conv"), k);
            let h = g.silu(h).unwrap();
            lin(g, h, &format!("{name}.mlp.out.w"), &format!("{name}.mlp.out.b"))
        };
        let a = proj(&mut g, xv, "cond.audio", 7);
        let sv = g.constant(c.sync.clone());
        let s = proj(&mut g, sv, "cond.sync", 3);
        let s = g.gather_rows(s, &cross_indices(l, l)).unwrap();
        let h = g.add(a, s).unwrap();
        let h = g.layernorm_rows(h, LN_EPS).unwrap();
        let expect = lin(&mut g, h, "head.w", "head.b");
        assert!(v.max_abs_diff(g.value(expect)) < 1e-12, "{mixer:?}");
    }
}

#[test]
fn attention_matches_double_loop() {
    let mut rng = seeded(10);
    let (l, d, heads) = (7, 8, 2);
    let q = normal_tensor(&mut rng, l, d, 1.0);
    let k = normal_tensor(&mut rng, l, d, 1.0);
    let v = normal_tensor(&mut rng, l, d, 1.0);
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let y = attention(&mut g, qv, kv, vv, heads).unwrap();
    let dh = d / heads;
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let o: f64 = (0..l).map(|j| e[j] / z * v.get(j, h * dh + c)).sum();
                assert!((g.value(y).get(i, h * dh + c) - o).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn attention_single_token_and_permutation() {
    let mut rng = seeded(11);
    let mut g = Graph::inference();
    let v1 = normal_tensor(&mut rng, 1, 4, 1.0);
    let q1 = g.constant(normal_tensor(&mut rng, 1, 4, 1.0));
    let vv = g.constant(v1.clone());
    let y = attention(&mut g, q1, q1, vv, 2).unwrap();
    assert!(g.value(y).max_abs_diff(&v1) < 1e-15);

    let l = 6;
    let x = normal_tensor(&mut rng, l, 4, 1.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let xv = g.constant(x.clone());
    let y = attention(&mut g, xv, xv, xv, 2).unwrap();
    let xp = g.constant(x.gather_rows(&perm).unwrap());
    let yp = attention(&mut g, xp, xp, xp, 2).unwrap();
    assert!(g.value(yp).max_abs_diff(&g.value(y).gather_rows(&perm).unwrap()) < 1e-12);
}

fn block_output(cfg: ModelConfig, x: &Tensor, seed: u64) -> Tensor {
    let mut b = SingleBlock::new(cfg, seed).unwrap();
    let mut rng = seeded(seed + 1);
    for t in b.params_mut().tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = normal_tensor(&mut rng, t.rows(), t.cols(), 0.1);
        }
    }
    let mut g = Graph::inference();
    let p = b.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let c = g.constant(normal_tensor(&mut seeded(99), 1, 64, 1.0));
    let y = b.forward(&mut g, &p, xv, c).unwrap();
    g.value(y).clone()
}

#[test]
fn local_conv_breaks_orderlessness() {
    let mut rng = seeded(12);
    let l = 10;
    let x = normal_tensor(&mut rng, l, 64, 1.0);
    let mut perm: Vec<usize> = (0..l).collect();
    perm.swap(3, 4);
    let xp = x.gather_rows(&perm).unwrap();

    let with_conv = tiny();
    let y = block_output(with_conv.clone(), &x, 13);
    let yp = block_output(with_conv, &xp, 13);
    assert!(yp.max_abs_diff(&y.gather_rows(&perm).unwrap()) > 1e-6);

    let mut no_conv = tiny();
    no_conv.local_conv = false;
    let y = block_output(no_conv.clone(), &x, 13);
    let yp = block_output(no_conv, &xp, 13);
    assert!(yp.max_abs_diff(&y.gather_rows(&perm).unwrap()) < 1e-10);
}

#[test]
fn parameter_counts() {
    let a = count_params(&tiny()).unwrap();
    assert_eq!(a, count_params(&tiny()).unwrap());
    let mut wide = tiny();
    wide.d_model = 128;
    wide.dims.model = 128;
    wide.d_state = 32;
    let b = count_params(&wide).unwrap();
    let ratio = b as f64 / a as f64;
    assert!(ratio > 3.2 && ratio < 4.8, "ratio {ratio}");
    let small = count_params(&ModelConfig::preset(Preset::Small, dims())).unwrap();
    let large = count_params(&ModelConfig::preset(Preset::Large, dims())).unwrap();
    assert!(large > small && small > a);
}

#[test]
fn full_model_loss_gradient_matches_fd() {
    for mixer in [Mixer::NonCausalMamba, Mixer::CausalMamba, Mixer::AttentionNoPosEmb] {
        let rep = model_gradient_audit(mixer, 20, 3).unwrap();
        assert!(rep.max_rel_error <= 1e-5, "{mixer:?}: {:?}", rep.worst);
    }
}
