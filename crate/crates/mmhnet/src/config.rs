//! Run configuration: line-oriented `section.key = value` text.
//!
//! Every key has a default and unknown keys are rejected. `model.preset`
//! supplies the architecture defaults; explicit model keys override it in
//! any order. [`RunConfig::to_text`] writes every key and parses back to an
//! identical value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mmhnet_core::data::{condition_dims, SplitSpec};
use mmhnet_core::flow::{SamplerConfig, DEFAULT_CFG_SCALE, DEFAULT_COND_DROPOUT, DEFAULT_STEPS};
use mmhnet_core::model::{Mixer, ModelConfig, Preset};
use mmhnet_core::optim::AdamWConfig;
use mmhnet_core::routing::{SimilarityMetric, TemporalRule};
use mmhnet_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Intermediate checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub train_length: usize,
    pub test_lengths: Vec<usize>,
    pub redundancy: f64,
    pub event_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub chunk_len: usize,
    pub embedder_seed: u64,
    /// Test episodes scored per length (at most `data.test_size`).
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub flow: SamplerConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Tiny => "tiny",
        Preset::Small => "small",
        Preset::Large => "large",
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            model: ModelConfig::preset(Preset::Tiny, condition_dims(64)),
            flow: SamplerConfig {
                steps: DEFAULT_STEPS,
                cfg_scale: DEFAULT_CFG_SCALE,
            },
            train: TrainSection {
                lr: 1e-4,
                iters: 2000,
                batch: 8,
                seed: 0,
                cond_dropout: DEFAULT_COND_DROPOUT,
                weight_decay: 0.01,
                clip: 1.0,
                checkpoint_every: 0,
            },
            data: DataSection {
                train_seed: 1,
                test_seed: 2,
                train_size: 64,
                test_size: 16,
                train_length: 32,
                test_lengths: vec![64, 128, 256, 512],
                redundancy: 0.0,
                event_rate: 1.5,
            },
            eval: EvalSection {
                chunk_len: 32,
                embedder_seed: 7,
                episodes: 8,
            },
            data_dir: PathBuf::from("data"),
            runs_dir: PathBuf::from("runs"),
        }
    }
}

const KEYS: &[&str] = &[
    "model.preset",
    "model.n_mm",
    "model.n_single",
    "model.d_model",
    "model.n_heads",
    "model.d_state",
    "model.expand",
    "model.mixer",
    "model.hierarchical",
    "model.nc_unit_mask",
    "model.sync_pos_emb",
    "block.local_conv",
    "block.conv_kernel",
    "routing.tau_temporal",
    "routing.tau_mm",
    "routing.metric",
    "routing.temporal_rule",
    "routing.temporal",
    "routing.mm",
    "flow.steps",
    "flow.cfg_scale",
    "train.lr",
    "train.iters",
    "train.batch",
    "train.seed",
    "train.cond_dropout",
    "train.weight_decay",
    "train.clip",
    "train.checkpoint_every",
    "data.train_seed",
    "data.test_seed",
    "data.train_size",
    "data.test_size",
    "data.train_length",
    "data.test_lengths",
    "data.redundancy",
    "data.event_rate",
    "eval.chunk_len",
    "eval.embedder_seed",
    "eval.episodes",
    "paths.data",
    "paths.runs",
];

/// `routing.tau` sets both thresholds unless a specific one is also given.
const TAU_ALIAS: &str = "routing.tau";

fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: Display,
{
    if let Some(v) = map.get(key) {
        *slot = v.parse().map_err(|e| anyhow!("{key} = {v}: {e}"))?;
    }
    Ok(())
}

fn get_bool(map: &BTreeMap<String, String>, key: &str, slot: &mut bool) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = match v.as_str() {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => bail!("{key} = {v}: expected true or false"),
        };
    }
    Ok(())
}

pub fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse::<usize>()).collect::<Result<_, _>>().with_context(|| format!("bad length list `{s}`"))?;
    if v.is_empty() || v.contains(&0) {
        bail!("length list `{s}` must hold positive lengths");
    }
    Ok(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("line {}: expected `section.key = value`", no + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) && k != TAU_ALIAS {
                bail!("line {}: unknown key `{k}`", no + 1);
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: duplicate key `{k}`", no + 1);
            }
        }
        Self::from_map(&map)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        get(map, "model.preset", &mut c.preset).map_err(|e| anyhow!("{e}"))?;
        c.model = ModelConfig::preset(c.preset, condition_dims(64));
        let m = &mut c.model;
        get(map, "model.n_mm", &mut m.n_mm)?;
        get(map, "model.n_single", &mut m.n_single)?;
        get(map, "model.d_model", &mut m.d_model)?;
        m.dims.model = m.d_model;
        get(map, "model.n_heads", &mut m.n_heads)?;
        get(map, "model.d_state", &mut m.d_state)?;
        get(map, "model.expand", &mut m.expand)?;
        get::<Mixer>(map, "model.mixer", &mut m.mixer)?;
        get_bool(map, "model.hierarchical", &mut m.hierarchical)?;
        get_bool(map, "model.nc_unit_mask", &mut m.nc_unit_mask)?;
        get_bool(map, "model.sync_pos_emb", &mut m.sync_pos_emb)?;
        get_bool(map, "block.local_conv", &mut m.local_conv)?;
        get(map, "block.conv_kernel", &mut m.conv_kernel)?;
        let r = &mut m.routing;
        let mut tau = r.tau_temporal;
        get(map, TAU_ALIAS, &mut tau)?;
        r.tau_temporal = tau;
        r.tau_mm = tau;
        get(map, "routing.tau_temporal", &mut r.tau_temporal)?;
        get(map, "routing.tau_mm", &mut r.tau_mm)?;
        get::<SimilarityMetric>(map, "routing.metric", &mut r.metric)?;
        get::<TemporalRule>(map, "routing.temporal_rule", &mut r.temporal_rule)?;
        get_bool(map, "routing.temporal", &mut r.temporal)?;
        get_bool(map, "routing.mm", &mut r.mm)?;
        get(map, "flow.steps", &mut c.flow.steps)?;
        get(map, "flow.cfg_scale", &mut c.flow.cfg_scale)?;
        let t = &mut c.train;
        get(map, "train.lr", &mut t.lr)?;
        get(map, "train.iters", &mut t.iters)?;
        get(map, "train.batch", &mut t.batch)?;
        get(map, "train.seed", &mut t.seed)?;
        get(map, "train.cond_dropout", &mut t.cond_dropout)?;
        get(map, "train.weight_decay", &mut t.weight_decay)?;
        get(map, "train.clip", &mut t.clip)?;
        get(map, "train.checkpoint_every", &mut t.checkpoint_every)?;
        let d = &mut c.data;
        get(map, "data.train_seed", &mut d.train_seed)?;
        get(map, "data.test_seed", &mut d.test_seed)?;
        get(map, "data.train_size", &mut d.train_size)?;
        get(map, "data.test_size", &mut d.test_size)?;
        get(map, "data.train_length", &mut d.train_length)?;
        if let Some(v) = map.get("data.test_lengths") {
            d.test_lengths = parse_lengths(v)?;
        }
        get(map, "data.redundancy", &mut d.redundancy)?;
        get(map, "data.event_rate", &mut d.event_rate)?;
        get(map, "eval.chunk_len", &mut c.eval.chunk_len)?;
        get(map, "eval.embedder_seed", &mut c.eval.embedder_seed)?;
        get(map, "eval.episodes", &mut c.eval.episodes)?;
        if let Some(v) = map.get("paths.data") {
            c.data_dir = PathBuf::from(v);
        }
        if let Some(v) = map.get("paths.runs") {
            c.runs_dir = PathBuf::from(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.train_seed == self.data.test_seed {
            bail!("data.train_seed and data.test_seed must differ");
        }
        if self.train.batch == 0 || self.flow.steps == 0 || self.eval.chunk_len == 0 {
            bail!("train.batch, flow.steps and eval.chunk_len must be positive");
        }
        if self.data.train_size == 0 || self.data.test_size == 0 || self.eval.episodes == 0 {
            bail!("split sizes and eval.episodes must be positive");
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let r = &m.routing;
        let t = &self.train;
        let d = &self.data;
        let lengths = d.test_lengths.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let values: Vec<String> = vec![
            preset_name(self.preset).into(),
            m.n_mm.to_string(),
            m.n_single.to_string(),
            m.d_model.to_string(),
            m.n_heads.to_string(),
            m.d_state.to_string(),
            m.expand.to_string(),
            m.mixer.name().into(),
            m.hierarchical.to_string(),
            m.nc_unit_mask.to_string(),
            m.sync_pos_emb.to_string(),
            m.local_conv.to_string(),
            m.conv_kernel.to_string(),
            fmt_f64(r.tau_temporal),
            fmt_f64(r.tau_mm),
            r.metric.name().into(),
            r.temporal_rule.name().into(),
            r.temporal.to_string(),
            r.mm.to_string(),
            self.flow.steps.to_string(),
            fmt_f64(self.flow.cfg_scale),
            fmt_f64(t.lr),
            t.iters.to_string(),
            t.batch.to_string(),
            t.seed.to_string(),
            fmt_f64(t.cond_dropout),
            fmt_f64(t.weight_decay),
            fmt_f64(t.clip),
            t.checkpoint_every.to_string(),
            d.train_seed.to_string(),
            d.test_seed.to_string(),
            d.train_size.to_string(),
            d.test_size.to_string(),
            d.train_length.to_string(),
            lengths,
            fmt_f64(d.redundancy),
            fmt_f64(d.event_rate),
            self.eval.chunk_len.to_string(),
            self.eval.embedder_seed.to_string(),
            self.eval.episodes.to_string(),
            self.data_dir.display().to_string(),
            self.runs_dir.display().to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iters,
            batch_size: self.train.batch,
            seed: self.train.seed,
            cond_dropout: self.train.cond_dropout,
            optimizer: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                clip_norm: self.train.clip,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn train_split(&self) -> SplitSpec {
        SplitSpec {
            redundancy: self.data.redundancy,
            event_rate: self.data.event_rate,
            ..SplitSpec::new(self.data.train_seed, self.data.train_size, self.data.train_length)
        }
    }

    /// Test split at `length`; each length gets its own split seed so no
    /// `(seed, index)` pair is shared with training or another length.
    pub fn test_split(&self, length: usize) -> SplitSpec {
        let seed = self.data.test_seed.wrapping_mul(1_000_003).wrapping_add(length as u64);
        SplitSpec {
            redundancy: self.data.redundancy,
            event_rate: self.data.event_rate,
            ..SplitSpec::new(seed, self.data.test_size, length)
        }
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
