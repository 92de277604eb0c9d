//! Finite-difference audit of every differentiable operation.
//!
//! Each case builds a small random instance, reduces the op's output to a
//! scalar through a fixed random weighting and compares the tape gradient
//! with central differences on every input coordinate.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::data::{condition_dims, generate_episode, LATENT_DIM};
use crate::error::Result;
use crate::fdcheck::{finite_diff_check, finite_diff_check_coords, FdReport};
use crate::flow::{mse, FlowSample};
use crate::hierarchy::{chunk_traced, confidence_traced, dechunk_traced, ste, ChunkState};
use crate::model::{attention, Mixer, Mmhnet, ModelConfig, Preset, RoutingMode};
use crate::params::BoundParams;
use crate::rng::{derive_seed, normal_tensor, seeded, Rng};
use rand::Rng as _;
use crate::routing::{mm_probs, similarity_rows, temporal_probs, RoutingDecision, RoutingKind, SimilarityMetric};
use crate::ssm::{causal_scan_op, global_mix_op};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    op: OpFn,
}

fn positive(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    normal_tensor(rng, r, c, 1.0).map(|v| libm::fabs(v) + 0.5)
}

fn unit_interval(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    normal_tensor(rng, r, c, 1.0).map(|v| lo + (hi - lo) / (1.0 + libm::exp(-v)))
}

fn n(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    normal_tensor(rng, r, c, 1.0)
}

fn case(name: &'static str, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, inputs, op: Box::new(op) }
}

fn cases(rng: &mut Rng) -> Vec<Case> {
    let decision = RoutingDecision::new(vec![1.0, 0.2, 0.7, 0.9, 0.1, 0.6], vec![true, false, true, true, false, true], RoutingKind::Temporal)
        .expect("valid decision");
    let state = ChunkState::from_decision(&decision).expect("valid state");
    let bits = decision.b.clone();
    let mut v = vec![
        case("add", vec![n(rng, 4, 3), n(rng, 4, 3)], |g, x| g.add(x[0], x[1])),
        case("sub", vec![n(rng, 4, 3), n(rng, 4, 3)], |g, x| g.sub(x[0], x[1])),
        case("mul", vec![n(rng, 4, 3), n(rng, 4, 3)], |g, x| g.mul(x[0], x[1])),
        case("scale", vec![n(rng, 4, 3)], |g, x| Ok(g.scale(x[0], -2.5))),
        case("add_scalar", vec![n(rng, 4, 3)], |g, x| Ok(g.add_scalar(x[0], 0.7))),
        case("add_row", vec![n(rng, 4, 3), n(rng, 1, 3)], |g, x| g.add_row(x[0], x[1])),
        case("mul_row", vec![n(rng, 4, 3), n(rng, 1, 3)], |g, x| g.mul_row(x[0], x[1])),
        case("mul_col", vec![n(rng, 4, 3), n(rng, 4, 1)], |g, x| g.mul_col(x[0], x[1])),
        case("broadcast_rows", vec![n(rng, 1, 3)], |g, x| g.broadcast_rows(x[0], 5)),
        case("exp", vec![n(rng, 4, 3)], |g, x| g.exp(x[0])),
        case("log", vec![positive(rng, 4, 3)], |g, x| g.log(x[0])),
        case("reciprocal", vec![positive(rng, 4, 3)], |g, x| g.reciprocal(x[0])),
        case("tanh", vec![n(rng, 4, 3)], |g, x| g.tanh(x[0])),
        case("silu", vec![n(rng, 4, 3)], |g, x| g.silu(x[0])),
        case("selu", vec![n(rng, 4, 3)], |g, x| g.selu(x[0])),
        case("softplus", vec![n(rng, 4, 3)], |g, x| g.softplus(x[0])),
        case("sqrt", vec![positive(rng, 4, 3)], |g, x| g.sqrt(x[0])),
        case("clamp", vec![n(rng, 4, 3)], |g, x| g.clamp(x[0], -0.5, 0.5)),
        case("matmul", vec![n(rng, 4, 3), n(rng, 3, 2)], |g, x| g.matmul(x[0], x[1])),
        case("linear", vec![n(rng, 4, 3), n(rng, 3, 2), n(rng, 1, 2)], |g, x| g.linear(x[0], x[1], Some(x[2]))),
        case("transpose", vec![n(rng, 4, 3)], |g, x| g.transpose(x[0])),
        case("sum", vec![n(rng, 4, 3)], |g, x| Ok(g.sum(x[0]))),
        case("mean", vec![n(rng, 4, 3)], |g, x| Ok(g.mean(x[0]))),
        case("mean_rows", vec![n(rng, 4, 3)], |g, x| g.mean_rows(x[0])),
        case("row_dot", vec![n(rng, 4, 3), n(rng, 4, 3)], |g, x| g.row_dot(x[0], x[1])),
        case("layernorm_rows", vec![n(rng, 4, 5)], |g, x| g.layernorm_rows(x[0], 1e-10)),
        case("rmsnorm_rows", vec![n(rng, 4, 5)], |g, x| g.rmsnorm_rows(x[0], 1e-6)),
        case("normalize_rows", vec![n(rng, 4, 5)], |g, x| g.normalize_rows(x[0])),
        case("softmax_rows", vec![n(rng, 4, 5)], |g, x| g.softmax_rows(x[0])),
        case("slice_rows", vec![n(rng, 5, 3)], |g, x| g.slice_rows(x[0], 1, 3)),
        case("slice_cols", vec![n(rng, 4, 5)], |g, x| g.slice_cols(x[0], 2, 2)),
        case("concat_rows", vec![n(rng, 2, 3), n(rng, 3, 3)], |g, x| g.concat_rows(&[x[0], x[1]])),
        case("concat_cols", vec![n(rng, 3, 2), n(rng, 3, 4)], |g, x| g.concat_cols(&[x[0], x[1]])),
        case("gather_rows", vec![n(rng, 4, 3)], |g, x| g.gather_rows(x[0], &[2, 0, 2, 3, 3])),
        case("im2col", vec![n(rng, 6, 2)], |g, x| g.im2col(x[0], 3, 1, 1)),
        case("conv1d", vec![n(rng, 6, 2), n(rng, 6, 3), n(rng, 1, 3)], |g, x| g.conv1d(x[0], x[1], Some(x[2]), 3, 1, 1)),
        case("depthwise_conv1d", vec![n(rng, 7, 3), n(rng, 4, 3), n(rng, 1, 3)], |g, x| g.depthwise_conv1d(x[0], x[1], x[2], 3)),
        case("stopgrad", vec![n(rng, 4, 3)], |g, x| {
            let s = g.stopgrad(x[0]);
            let y = g.mul(x[0], s)?;
            g.add(y, x[0])
        }),
        case(
            "causal_scan",
            vec![unit_interval(rng, 6, 2, 0.3, 0.95), positive(rng, 6, 2), n(rng, 6, 3), n(rng, 6, 3), n(rng, 6, 4)],
            |g, x| causal_scan_op(g, x[0], x[1], x[2], x[3], x[4]),
        ),
        case("global_mix", vec![positive(rng, 6, 2), n(rng, 6, 3), n(rng, 6, 3), n(rng, 6, 4)], |g, x| {
            global_mix_op(g, x[0], x[1], x[2], x[3])
        }),
        case("attention", vec![n(rng, 5, 4), n(rng, 7, 4), n(rng, 7, 4)], |g, x| attention(g, x[0], x[1], x[2], 2)),
        case("temporal_probs", vec![n(rng, 6, 4), n(rng, 4, 3), n(rng, 4, 3)], |g, x| {
            Ok(temporal_probs(g, x[0], x[1], x[2], SimilarityMetric::Cosine)?.0)
        }),
        case("mm_probs", vec![n(rng, 6, 4), n(rng, 4, 4), n(rng, 4, 3), n(rng, 4, 3)], |g, x| {
            Ok(mm_probs(g, x[0], x[1], x[2], x[3], SimilarityMetric::Cosine)?.0)
        }),
        case("ste", vec![unit_interval(rng, 6, 1, 0.05, 0.95)], |g, x| {
            let s = ste(g, x[0])?;
            g.mul(s, x[0])
        }),
    ];
    for (name, metric) in [
        ("similarity_cosine", SimilarityMetric::Cosine),
        ("similarity_euclidean", SimilarityMetric::Euclidean),
        ("similarity_dot", SimilarityMetric::DotProduct),
    ] {
        v.push(case(name, vec![n(rng, 5, 3), n(rng, 5, 3)], move |g, x| similarity_rows(g, x[0], x[1], metric)));
    }
    let b2 = bits.clone();
    v.push(case("confidence", vec![unit_interval(rng, 6, 1, 0.05, 0.95)], move |g, x| confidence_traced(g, x[0], &b2)));
    let d2 = decision.clone();
    v.push(case("chunk", vec![n(rng, 6, 3)], move |g, x| Ok(chunk_traced(g, x[0], &d2)?.0)));
    v.push(case(
        "dechunk",
        vec![n(rng, state.compressed_len, 3), unit_interval(rng, 6, 1, 0.05, 0.95)],
        move |g, x| dechunk_traced(g, x[0], &state, x[1]),
    ));
    v
}

/// Runs every case; `max_rel_error` is the worst coordinate of that op.
pub fn gradient_audit(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    for (k, c) in cases(&mut rng).into_iter().enumerate() {
        let weight_seed = derive_seed(&[seed, k as u64]);
        let op = c.op;
        let f = move |g: &mut Graph, x: &[Var]| -> Result<Var> {
            let y = op(g, x)?;
            let shape = g.value(y).shape().to_vec();
            let w = normal_tensor(&mut seeded(weight_seed), shape[0], shape.get(1).copied().unwrap_or(1), 1.0);
            let w = g.constant(w.reshape(&shape)?);
            let wy = g.mul(y, w)?;
            Ok(g.sum(wy))
        };
        let err = finite_diff_check(f, &c.inputs, FD_EPS)?;
        out.push(OpCheck { name: c.name, max_rel_error: err });
    }
    Ok(out)
}

/// Tape vs central differences for the full Tiny forward pass and FM loss.
///
/// Zero-initialized tensors get small noise so every path carries signal,
/// routing bits are pinned to their unperturbed values, and `per_tensor`
/// random coordinates of every parameter tensor are checked.
pub fn model_gradient_audit(mixer: Mixer, seed: u64, per_tensor: usize) -> Result<FdReport> {
    let mut cfg = ModelConfig::preset(Preset::Tiny, condition_dims(64));
    cfg.mixer = mixer;
    let mut model = Mmhnet::new(cfg, seed)?;
    let mut rng = seeded(derive_seed(&[seed, 1]));
    for t in model.params_mut().tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = normal_tensor(&mut rng, t.rows(), t.cols(), 0.05);
        }
    }
    let len = 12;
    let episode = generate_episode(derive_seed(&[seed, 2]), len, 1, 0.5)?;
    let sample = FlowSample {
        x0: normal_tensor(&mut rng, len, LATENT_DIM, 1.0),
        x1: episode.audio.clone(),
        t: 0.37,
        cond: episode.conditions(),
        null: false,
    };
    let xt = sample.xt()?;
    let u = sample.u()?;
    let routing = {
        let mut g = Graph::inference();
        let p = model.params().bind(&mut g, false);
        let x = g.constant(xt.clone());
        model.forward_detailed(&mut g, &p, x, sample.t, &sample.cond, false, RoutingMode::Compute)?.routing
    };
    let f = |g: &mut Graph, vars: &[Var]| {
        let p = BoundParams::from_vars(vars.to_vec());
        let x = g.constant(xt.clone());
        let out = model.forward_detailed(g, &p, x, sample.t, &sample.cond, false, RoutingMode::Fixed(&routing))?;
        mse(g, out.velocity, &u)
    };
    let params = model.params().tensors().to_vec();
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|t| {
            let n = t.numel();
            (0..n.min(per_tensor)).map(|_| rng.random_range(0..n)).collect()
        })
        .collect();
    finite_diff_check_coords(f, &params, FD_EPS, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_agrees_with_central_differences() {
        let report = gradient_audit(1).unwrap();
        assert!(report.len() >= 45);
        for r in &report {
            assert!(r.max_rel_error <= 1e-5, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn model_audit_passes_for_noncausal() {
        let rep = model_gradient_audit(Mixer::NonCausalMamba, 3, 2).unwrap();
        assert!(rep.checked > 0);
        assert!(rep.max_rel_error <= 1e-5, "{:?}", rep.worst);
    }
}
