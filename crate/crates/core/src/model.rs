//! The hierarchical multimodal velocity network.
//!
//! Pipeline for one sample:
//!
//! 1. project the noisy audio latent and add the aligned sync projection;
//! 2. build `c_g` from pooled semantic/text features and flow time;
//! 3. when hierarchical, compress semantic/text by multimodal routing against
//!    sync and compress audio by temporal routing;
//! 4. run the multimodal blocks on the joint compressed streams;
//! 5. dechunk the audio update back to full length;
//! 6. run the single-stream blocks at full resolution;
//! 7. adaLN and a linear head give the velocity.
//!
//! Every multimodal block keeps per-stream weights while the token mixer runs
//! once over the rows of all streams, stacked as `[semantic; text; audio]`.

use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::conditioning::{AdaLn, ConditionDims, ConditionEncoder, RawConditions};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::hierarchy::{chunk_traced, dechunk_traced, ste};
use crate::nn::{join, Init, Linear};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::{seeded, Rng};
use crate::routing::{
    cross_indices, decide, mm_probs, temporal_probs, RoutingDecision, RoutingKind, RoutingProjections, SimilarityMetric,
    TemporalRule,
};
use crate::ssm::{causal_scan_op, global_mix_op, LOG_DECAY_FLOOR};
use crate::tensor::Tensor;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mixer {
    #[default]
    NonCausalMamba,
    CausalMamba,
    AttentionNoPosEmb,
}

impl Mixer {
    pub fn name(self) -> &'static str {
        match self {
            Self::NonCausalMamba => "noncausal_mamba",
            Self::CausalMamba => "causal_mamba",
            Self::AttentionNoPosEmb => "attention",
        }
    }
}

impl FromStr for Mixer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noncausal_mamba" | "noncausal" => Ok(Self::NonCausalMamba),
            "causal_mamba" | "causal" => Ok(Self::CausalMamba),
            "attention" | "attention_no_pos_emb" => Ok(Self::AttentionNoPosEmb),
            _ => Err(Error::invalid(alloc::format!("unknown mixer `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Small,
    Large,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "large" => Ok(Self::Large),
            _ => Err(Error::invalid(alloc::format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingConfig {
    pub metric: SimilarityMetric,
    pub tau_temporal: f64,
    pub tau_mm: f64,
    pub temporal_rule: TemporalRule,
    /// Temporal routing of the audio stream.
    pub temporal: bool,
    /// Multimodal routing of semantic/text against sync.
    pub mm: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            metric: SimilarityMetric::Cosine,
            tau_temporal: 0.5,
            tau_mm: 0.5,
            temporal_rule: TemporalRule::Probability,
            temporal: true,
            mm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_mm: usize,
    pub n_single: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_state: usize,
    /// Inner width of the SSM mixer as a multiple of `d_model`.
    pub expand: usize,
    pub conv_kernel: usize,
    pub local_conv: bool,
    pub mixer: Mixer,
    pub hierarchical: bool,
    pub routing: RoutingConfig,
    pub nc_unit_mask: bool,
    pub sync_pos_emb: bool,
    pub dims: ConditionDims,
}

impl ModelConfig {
    pub fn preset(preset: Preset, dims: ConditionDims) -> Self {
        let (n_mm, n_single, d_model, n_heads, d_state) = match preset {
            Preset::Tiny => (2, 2, 64, 4, 16),
            Preset::Small => (5, 4, 128, 8, 32),
            Preset::Large => (10, 7, 256, 8, 64),
        };
        Self {
            n_mm,
            n_single,
            d_model,
            n_heads,
            d_state,
            expand: 1,
            conv_kernel: 4,
            local_conv: true,
            mixer: Mixer::NonCausalMamba,
            hierarchical: true,
            routing: RoutingConfig::default(),
            nc_unit_mask: false,
            sync_pos_emb: false,
            dims: ConditionDims { model: d_model, ..dims },
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(alloc::format!("model config: {m}")));
        if self.n_mm == 0 || self.n_single == 0 {
            return bad("n_mm and n_single must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_state == 0 || self.expand == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 || self.d_inner() % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.conv_kernel < 2 {
            return bad("conv_kernel must be at least 2");
        }
        if self.dims.model != self.d_model {
            return bad("condition width must equal d_model");
        }
        for tau in [self.routing.tau_temporal, self.routing.tau_mm] {
            if !(tau > 0.0 && tau < 1.0) {
                return bad("routing thresholds must lie in (0, 1)");
            }
        }
        Ok(())
    }

    /// Left padding of the depthwise convolution: centred for non-causal
    /// mixers, fully causal for the causal one.
    fn conv_pad_left(&self) -> usize {
        match self.mixer {
            Mixer::CausalMamba => self.conv_kernel - 1,
            _ => (self.conv_kernel - 1) / 2,
        }
    }
}

/// Scaled dot-product softmax attention over rows with no positional signal.
/// `q, k, v: L × D`, `D` split evenly into `heads`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.value(q).cols();
    if g.value(k).cols() != d || g.value(v).cols() != d || g.value(k).rows() != g.value(v).rows() || heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Debug)]
struct MambaStream {
    norm: AdaLn,
    in_proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    dt_bias: ParamId,
    a_log: ParamId,
    skip: ParamId,
    out_norm: ParamId,
    out: Linear,
}

#[derive(Clone, Debug)]
struct AttentionStream {
    norm: AdaLn,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
enum StreamMixer {
    Mamba(MambaStream),
    Attention(AttentionStream),
}

#[derive(Clone, Debug)]
struct GatedMlp {
    norm: AdaLn,
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl GatedMlp {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize) -> Self {
        Self {
            norm: AdaLn::new(store, rng, &join(name, "norm"), d),
            gate: Linear::new(store, rng, &join(name, "gate"), d, 2 * d, true, Init::FanIn),
            up: Linear::new(store, rng, &join(name, "up"), d, 2 * d, true, Init::FanIn),
            down: Linear::new(store, rng, &join(name, "down"), 2 * d, d, true, Init::Zeros),
        }
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, h: Var, c_g: Var) -> Result<Var> {
        let u = self.norm.forward(g, p, h, c_g)?;
        let a = self.gate.forward(g, p, u)?;
        let a = g.silu(a)?;
        let b = self.up.forward(g, p, u)?;
        let m = g.mul(a, b)?;
        let y = self.down.forward(g, p, m)?;
        g.add(h, y)
    }
}

/// Per-stream intermediate values of the SSM mixer.
struct MambaInputs {
    x: Var,
    b: Var,
    c: Var,
    z: Var,
    dt: Var,
    log_alpha: Var,
}

/// One residual block over one or more streams sharing a token mixer.
#[derive(Clone, Debug)]
pub struct Block {
    mixers: Vec<StreamMixer>,
    mlps: Vec<GatedMlp>,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, name: &str, streams: &[&str]) -> Self {
        let d = cfg.d_model;
        let di = cfg.d_inner();
        let (n, h) = (cfg.d_state, cfg.n_heads);
        let mut mixers = Vec::new();
        let mut mlps = Vec::new();
        for s in streams {
            let sn = join(name, s);
            let mixer = match cfg.mixer {
                Mixer::AttentionNoPosEmb => StreamMixer::Attention(AttentionStream {
                    norm: AdaLn::new(store, rng, &join(&sn, "attn_norm"), d),
                    q: Linear::new(store, rng, &join(&sn, "q"), d, d, false, Init::FanIn),
                    k: Linear::new(store, rng, &join(&sn, "k"), d, d, false, Init::FanIn),
                    v: Linear::new(store, rng, &join(&sn, "v"), d, d, false, Init::FanIn),
                    out: Linear::new(store, rng, &join(&sn, "o"), d, d, true, Init::Zeros),
                }),
                _ => {
                    let width = 2 * di + 2 * n + h;
                    let conv_ch = di + 2 * n;
                    let ks = cfg.conv_kernel;
                    let conv_w = store.push(join(&sn, "conv.w"), crate::nn::init_tensor(rng, ks, conv_ch, ks, Init::FanIn));
                    let conv_b = store.push(join(&sn, "conv.b"), Tensor::zeros(&[1, conv_ch]));
                    // dt in [1e-3, 1e-1] log-uniformly, stored through the inverse softplus
                    let dt_bias = Tensor::from_fn(1, h, |_, j| {
                        let frac = if h > 1 { j as f64 / (h - 1) as f64 } else { 0.5 };
                        let dt = libm::exp(libm::log(1e-3) + frac * (libm::log(1e-1) - libm::log(1e-3)));
                        dt + libm::log(-libm::expm1(-dt))
                    });
                    let a_log = Tensor::from_fn(1, h, |_, j| libm::log(1.0 + 15.0 * j as f64 / (h.max(2) - 1) as f64));
                    StreamMixer::Mamba(MambaStream {
                        norm: AdaLn::new(store, rng, &join(&sn, "mix_norm"), d),
                        in_proj: Linear::new(store, rng, &join(&sn, "in_proj"), d, width, true, Init::FanIn),
                        conv_w,
                        conv_b,
                        dt_bias: store.push(join(&sn, "dt_bias"), dt_bias),
                        a_log: store.push(join(&sn, "a_log"), a_log),
                        skip: store.push(join(&sn, "skip"), Tensor::ones(&[1, di])),
                        out_norm: store.push(join(&sn, "out_norm"), Tensor::ones(&[1, di])),
                        out: Linear::new(store, rng, &join(&sn, "out_proj"), di, d, true, Init::Zeros),
                    })
                }
            };
            mixers.push(mixer);
            mlps.push(GatedMlp::new(store, rng, &join(&sn, "mlp"), d));
        }
        Self { mixers, mlps }
    }

    fn mamba_inputs(cfg: &ModelConfig, g: &mut Graph, p: &BoundParams, m: &MambaStream, h: Var, c_g: Var) -> Result<MambaInputs> {
        let di = cfg.d_inner();
        let n = cfg.d_state;
        let u = m.norm.forward(g, p, h, c_g)?;
        let proj = m.in_proj.forward(g, p, u)?;
        let mut xbc = g.slice_cols(proj, 0, di + 2 * n)?;
        if cfg.local_conv {
            xbc = g.depthwise_conv1d(xbc, p.get(m.conv_w), p.get(m.conv_b), cfg.conv_pad_left())?;
        }
        let xbc = g.silu(xbc)?;
        let x = g.slice_cols(xbc, 0, di)?;
        let b = g.slice_cols(xbc, di, n)?;
        let c = g.slice_cols(xbc, di + n, n)?;
        let z = g.slice_cols(proj, di + 2 * n, di)?;
        let dt = g.slice_cols(proj, 2 * di + 2 * n, cfg.n_heads)?;
        let dt = g.add_row(dt, p.get(m.dt_bias))?;
        let dt = g.softplus(dt)?;
        let a = g.exp(p.get(m.a_log))?;
        let a = g.scale(a, -1.0);
        let la = g.mul_row(dt, a)?;
        let log_alpha = g.clamp(la, LOG_DECAY_FLOOR, 0.0)?;
        Ok(MambaInputs { x, b, c, z, dt, log_alpha })
    }

    fn forward(&self, cfg: &ModelConfig, g: &mut Graph, p: &BoundParams, hs: &[Var], c_g: Var) -> Result<Vec<Var>> {
        if hs.len() != self.mixers.len() {
            return Err(Error::shape("block", &[hs.len()], &[self.mixers.len()]));
        }
        let lens: Vec<usize> = hs.iter().map(|&h| g.value(h).rows()).collect();
        let mixed = match &self.mixers[0] {
            StreamMixer::Mamba(_) => self.mamba_mix(cfg, g, p, hs, c_g, &lens)?,
            StreamMixer::Attention(_) => self.attention_mix(cfg, g, p, hs, c_g, &lens)?,
        };
        let mut out = Vec::with_capacity(hs.len());
        for (i, &h) in hs.iter().enumerate() {
            let r = g.add(h, mixed[i])?;
            out.push(self.mlps[i].forward(g, p, r, c_g)?);
        }
        Ok(out)
    }

    fn mamba_mix(&self, cfg: &ModelConfig, g: &mut Graph, p: &BoundParams, hs: &[Var], c_g: Var, lens: &[usize]) -> Result<Vec<Var>> {
        let mut parts = Vec::with_capacity(hs.len());
        let mut streams = Vec::with_capacity(hs.len());
        for (mixer, &h) in self.mixers.iter().zip(hs) {
            let StreamMixer::Mamba(m) = mixer else {
                return Err(Error::invalid("mixed mixer kinds in one block"));
            };
            parts.push(Self::mamba_inputs(cfg, g, p, m, h, c_g)?);
            streams.push(m);
        }
        let cat = |g: &mut Graph, f: &dyn Fn(&MambaInputs) -> Var| -> Result<Var> {
            let vs: Vec<Var> = parts.iter().map(f).collect();
            if vs.len() == 1 {
                Ok(vs[0])
            } else {
                g.concat_rows(&vs)
            }
        };
        let x = cat(g, &|m| m.x)?;
        let b = cat(g, &|m| m.b)?;
        let c = cat(g, &|m| m.c)?;
        let dt = cat(g, &|m| m.dt)?;
        let la = cat(g, &|m| m.log_alpha)?;
        let y = match cfg.mixer {
            Mixer::CausalMamba => {
                let alpha = g.exp(la)?;
                causal_scan_op(g, alpha, dt, b, c, x)?
            }
            _ => {
                let w = if cfg.nc_unit_mask {
                    dt
                } else {
                    let neg = g.scale(la, -1.0);
                    let inv_alpha = g.exp(neg)?;
                    g.mul(dt, inv_alpha)?
                };
                global_mix_op(g, w, b, c, x)?
            }
        };
        let mut out = Vec::with_capacity(hs.len());
        let mut start = 0;
        for (i, m) in streams.iter().enumerate() {
            let ys = if hs.len() == 1 { y } else { g.slice_rows(y, start, lens[i])? };
            start += lens[i];
            let sk = g.mul_row(parts[i].x, p.get(m.skip))?;
            let ys = g.add(ys, sk)?;
            let gate = g.silu(parts[i].z)?;
            let ys = g.mul(ys, gate)?;
            let ys = g.rmsnorm_rows(ys, RMS_EPS)?;
            let ys = g.mul_row(ys, p.get(m.out_norm))?;
            out.push(m.out.forward(g, p, ys)?);
        }
        Ok(out)
    }

    fn attention_mix(&self, cfg: &ModelConfig, g: &mut Graph, p: &BoundParams, hs: &[Var], c_g: Var, lens: &[usize]) -> Result<Vec<Var>> {
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        let mut streams = Vec::new();
        for (mixer, &h) in self.mixers.iter().zip(hs) {
            let StreamMixer::Attention(a) = mixer else {
                return Err(Error::invalid("mixed mixer kinds in one block"));
            };
            let u = a.norm.forward(g, p, h, c_g)?;
            qs.push(a.q.forward(g, p, u)?);
            ks.push(a.k.forward(g, p, u)?);
            vs.push(a.v.forward(g, p, u)?);
            streams.push(a);
        }
        let (q, k, v) = if hs.len() == 1 {
            (qs[0], ks[0], vs[0])
        } else {
            (g.concat_rows(&qs)?, g.concat_rows(&ks)?, g.concat_rows(&vs)?)
        };
        let y = attention(g, q, k, v, cfg.n_heads)?;
        let mut out = Vec::with_capacity(hs.len());
        let mut start = 0;
        for (i, a) in streams.iter().enumerate() {
            let ys = if hs.len() == 1 { y } else { g.slice_rows(y, start, lens[i])? };
            start += lens[i];
            out.push(a.out.forward(g, p, ys)?);
        }
        Ok(out)
    }
}

/// How routing bits are obtained during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum RoutingMode<'a> {
    /// Thresholds computed from the current activations.
    Compute,
    /// Bits taken from an earlier pass (probabilities are still recomputed),
    /// ordered as `[semantic, text, audio]` for the routing that is enabled.
    Fixed(&'a [RoutingDecision]),
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub velocity: Var,
    /// Decisions in `[semantic, text, audio]` order, for the enabled routers.
    pub routing: Vec<RoutingDecision>,
}

#[derive(Clone, Debug)]
struct Routers {
    semantic: Option<(ParamId, ParamId)>,
    text: Option<(ParamId, ParamId)>,
    audio: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Mmhnet {
    config: ModelConfig,
    store: ParamStore,
    cond: ConditionEncoder,
    routers: Routers,
    mm_blocks: Vec<Block>,
    single_blocks: Vec<Block>,
    final_norm: AdaLn,
    head: Linear,
}

fn push_router(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize) -> (ParamId, ParamId) {
    let r = RoutingProjections::init(rng, d, d);
    (store.push(join(name, "wq"), r.wq), store.push(join(name, "wk"), r.wk))
}

impl Mmhnet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let cond = ConditionEncoder::new(&mut store, &mut rng, config.dims, config.sync_pos_emb);
        let hier = config.hierarchical;
        let routers = Routers {
            semantic: (hier && config.routing.mm).then(|| push_router(&mut store, &mut rng, "route.semantic", d)),
            text: (hier && config.routing.mm).then(|| push_router(&mut store, &mut rng, "route.text", d)),
            audio: (hier && config.routing.temporal).then(|| push_router(&mut store, &mut rng, "route.audio", d)),
        };
        let mm_blocks = (0..config.n_mm)
            .map(|i| Block::new(&mut store, &mut rng, &config, &alloc::format!("mm{i}"), &["semantic", "text", "audio"]))
            .collect();
        let single_blocks = (0..config.n_single)
            .map(|i| Block::new(&mut store, &mut rng, &config, &alloc::format!("single{i}"), &["audio"]))
            .collect();
        let final_norm = AdaLn::new(&mut store, &mut rng, "final_norm", d);
        let head = Linear::new(&mut store, &mut rng, "head", d, config.dims.latent, true, Init::FanIn);
        Ok(Self {
            config,
            store,
            cond,
            routers,
            mm_blocks,
            single_blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, latent: Var, t: f64, raw: &RawConditions, null: bool) -> Result<Var> {
        Ok(self.forward_detailed(g, p, latent, t, raw, null, RoutingMode::Compute)?.velocity)
    }

    pub fn forward_detailed(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        latent: Var,
        t: f64,
        raw: &RawConditions,
        null: bool,
        mode: RoutingMode<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (la, dl) = g.value(latent).dims2();
        if la == 0 || dl != cfg.dims.latent {
            return Err(Error::shape("forward", g.shape(latent), &[la, cfg.dims.latent]));
        }
        let cs = self.cond.encode(g, p, raw, t, null)?;
        let audio = self.cond.project_audio(g, p, latent)?;
        let sync_len = g.value(cs.sync).rows();
        let sync_aligned = g.gather_rows(cs.sync, &cross_indices(la, sync_len))?;
        let mut h = g.add(audio, sync_aligned)?;

        let mut decisions = Vec::new();
        let mut fixed = match mode {
            RoutingMode::Fixed(d) => Some(d.iter()),
            RoutingMode::Compute => None,
        };
        let mut next_fixed = |kind: RoutingKind| -> Result<Option<RoutingDecision>> {
            match fixed.as_mut() {
                None => Ok(None),
                Some(it) => match it.next() {
                    Some(d) if d.kind == kind => Ok(Some(d.clone())),
                    _ => Err(Error::invalid("fixed routing decisions do not match the enabled routers")),
                },
            }
        };
        let rc = cfg.routing;
        let mm_route_stream = |g: &mut Graph, s: Var, router: Option<(ParamId, ParamId)>, decisions: &mut Vec<RoutingDecision>, fixed: Option<RoutingDecision>| -> Result<Var> {
            let Some((wq, wk)) = router else { return Ok(s) };
            let (pv, sv) = mm_probs(g, s, cs.sync, p.get(wq), p.get(wk), rc.metric)?;
            let d = match fixed {
                Some(d) => d,
                None => decide(g, pv, sv, rc.tau_mm, RoutingKind::Mm, rc.temporal_rule)?,
            };
            let (sc, state) = chunk_traced(g, s, &d)?;
            let sel = state.selected();
            let ps = g.gather_rows(pv, &sel)?;
            let w = ste(g, ps)?;
            decisions.push(d);
            g.mul_col(sc, w)
        };
        let fs = if self.routers.semantic.is_some() { next_fixed(RoutingKind::Mm)? } else { None };
        let semantic = mm_route_stream(g, cs.semantic, self.routers.semantic, &mut decisions, fs)?;
        let ft = if self.routers.text.is_some() { next_fixed(RoutingKind::Mm)? } else { None };
        let text = mm_route_stream(g, cs.text, self.routers.text, &mut decisions, ft)?;

        let mut audio_route = None;
        let mut a = h;
        if let Some((wq, wk)) = self.routers.audio {
            let (pv, sv) = temporal_probs(g, h, p.get(wq), p.get(wk), rc.metric)?;
            let d = match next_fixed(RoutingKind::Temporal)? {
                Some(d) => d,
                None => decide(g, pv, sv, rc.tau_temporal, RoutingKind::Temporal, rc.temporal_rule)?,
            };
            let (hc, state) = chunk_traced(g, h, &d)?;
            a = hc;
            audio_route = Some((state, pv));
            decisions.push(d);
        }

        let a_in = a;
        let mut streams = vec![semantic, text, a];
        for block in &self.mm_blocks {
            streams = block.forward(cfg, g, p, &streams, cs.c_g)?;
        }
        let a_out = streams[2];
        h = match audio_route {
            Some((state, pv)) => {
                let delta = g.sub(a_out, a_in)?;
                let up = dechunk_traced(g, delta, &state, pv)?;
                g.add(h, up)?
            }
            None => a_out,
        };
        for block in &self.single_blocks {
            h = block.forward(cfg, g, p, &[h], cs.c_g)?[0];
        }
        let h = self.final_norm.forward(g, p, h, cs.c_g)?;
        let velocity = self.head.forward(g, p, h)?;
        Ok(ForwardOutput { velocity, routing: decisions })
    }
}

pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(Mmhnet::new(config.clone(), 0)?.param_count())
}

impl VelocityField for Mmhnet {
    type Condition = RawConditions;
    type Params = BoundParams;

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        self.store.bind(g, trainable)
    }

    fn velocity(&self, g: &mut Graph, params: &BoundParams, x: Var, t: f64, cond: &RawConditions, null: bool) -> Result<Var> {
        self.forward(g, params, x, t, cond, null)
    }
}

/// Standalone block for kernel-level tests and benchmarks.
pub struct SingleBlock {
    config: ModelConfig,
    store: ParamStore,
    block: Block,
}

impl SingleBlock {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, &mut rng, &config, "block", &["x"]);
        Ok(Self { config, store, block })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, h: Var, c_g: Var) -> Result<Var> {
        Ok(self.block.forward(&self.config, g, p, &[h], c_g)?[0])
    }
}
