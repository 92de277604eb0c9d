//! Training, generation and scoring shared by the commands and the
//! acceptance suite.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mmhnet_core::data::{make_split_with, Episode, LATENT_DIM};
use mmhnet_core::eval::{evaluate, EvalContext, MetricReport};
use mmhnet_core::flow::{sample_euler, SamplerConfig};
use mmhnet_core::model::{Mixer, Mmhnet};
use mmhnet_core::rng::derive_seed;
use mmhnet_core::routing::SimilarityMetric;
use mmhnet_core::train::{sample_gradient, validation_loss, Sample, SampleGrad, Trainer};
use mmhnet_core::{Error as CoreError, Tensor};

use crate::config::{fmt_f64, RunConfig};
use crate::parallel;

/// Per-sample gradients spread over the worker pool, returned in batch order.
pub fn parallel_gradients(model: &Mmhnet, batch: &[Sample]) -> Vec<mmhnet_core::Result<SampleGrad>> {
    parallel::map(batch, |s| sample_gradient(model, s))
}

/// Per-iteration callback: `(iteration, loss, model after the update)`.
pub type StepHook<'a> = dyn FnMut(usize, f64, &Mmhnet) -> Result<()> + 'a;

/// Trains a fresh model from `config`. A non-finite loss aborts with the
/// iteration, batch position and episode index.
pub fn train_model(config: &RunConfig, episodes: &[Episode], hook: &mut StepHook<'_>) -> Result<Mmhnet> {
    let mut model = Mmhnet::new(config.model.clone(), config.train.seed)?;
    let mut trainer = Trainer::new(config.train_config(), &model)?;
    for it in 0..config.train.iters {
        match trainer.step(&mut model, episodes, parallel_gradients) {
            Ok(loss) => hook(it, loss, &model)?,
            Err(CoreError::NanLoss { iteration, batch_index }) => {
                let ep = trainer.last_batch[batch_index];
                bail!(NanAbort { iteration, batch_index, episode: ep, episode_seed: episodes[ep].seed });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(model)
}

#[derive(Debug, thiserror::Error)]
#[error("non-finite loss at iteration {iteration}, batch index {batch_index} (episode {episode}, seed {episode_seed})")]
pub struct NanAbort {
    pub iteration: usize,
    pub batch_index: usize,
    pub episode: usize,
    pub episode_seed: u64,
}

/// Which conditions drive generation for each scored episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// The episode's own conditions.
    Matched,
    /// Conditions of the next episode in the split (control).
    Shuffled,
    /// No generation: the ground-truth audio is scored against itself.
    Reference,
}

pub fn generation_seed(seed: u64, length: usize, index: usize) -> u64 {
    derive_seed(&[seed, length as u64, index as u64])
}

pub fn generate_for(model: &Mmhnet, episodes: &[Episode], sampler: SamplerConfig, seed: u64, mode: Conditioning) -> Result<Vec<Tensor>> {
    let n = episodes.len();
    if mode == Conditioning::Shuffled && n < 2 {
        bail!("shuffled conditioning needs at least two episodes");
    }
    let idx: Vec<usize> = (0..n).collect();
    parallel::map(&idx, |&i| -> Result<Tensor> {
        let e = &episodes[i];
        let cond = match mode {
            Conditioning::Reference => return Ok(e.audio.clone()),
            Conditioning::Matched => e.conditions(),
            Conditioning::Shuffled => episodes[(i + 1) % n].conditions(),
        };
        Ok(sample_euler(model, &cond, e.len(), LATENT_DIM, sampler, generation_seed(seed, e.len(), i))?)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub length: usize,
    pub seed: u64,
    pub report: MetricReport,
    pub fm_loss: f64,
}

pub const CSV_HEADER: [&str; 9] = ["model", "length", "seed", "fd", "kl", "isc", "ib_analog", "desync_frames", "fm_loss"];

/// Scores one model on one split.
pub fn score(
    ctx: &EvalContext,
    model: &Mmhnet,
    name: &str,
    episodes: &[Episode],
    sampler: SamplerConfig,
    seed: u64,
    mode: Conditioning,
) -> Result<EvalRow> {
    let gen = generate_for(model, episodes, sampler, seed, mode)?;
    let report = evaluate(ctx, &gen, episodes)?;
    Ok(EvalRow {
        model: name.to_string(),
        length: episodes[0].len(),
        seed,
        report,
        fm_loss: validation_loss(model, episodes, seed)?,
    })
}

/// The first `eval.episodes` episodes of the test split at `length`.
pub fn test_episodes(config: &RunConfig, length: usize) -> Result<Vec<Episode>> {
    let mut spec = config.test_split(length);
    spec.size = spec.size.min(config.eval.episodes);
    Ok(make_split_with(&spec)?)
}

/// Writes rows with the fixed column order via a temporary file and rename.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    let bytes = w.into_inner().context("flushing csv")?;
    crate::commands::write_atomic(path, &bytes)
}

impl EvalRow {
    pub fn record(&self) -> Vec<String> {
        let r = &self.report;
        vec![
            self.model.clone(),
            self.length.to_string(),
            self.seed.to_string(),
            fmt_f64(r.fd),
            fmt_f64(r.kl),
            fmt_f64(r.isc),
            fmt_f64(r.ib_analog),
            fmt_f64(r.desync_frames),
            fmt_f64(self.fm_loss),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    CoreNetwork,
    Hierarchy,
    Threshold,
    Routing,
    Cfg,
    DistanceMetric,
    Pilot,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::CoreNetwork,
        Suite::Hierarchy,
        Suite::Threshold,
        Suite::Routing,
        Suite::Cfg,
        Suite::DistanceMetric,
        Suite::Pilot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CoreNetwork => "core_network",
            Self::Hierarchy => "hierarchy",
            Self::Threshold => "threshold",
            Self::Routing => "routing",
            Self::Cfg => "cfg",
            Self::DistanceMetric => "distance_metric",
            Self::Pilot => "pilot",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).with_context(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            format!("unknown suite `{s}`; available: {}", names.join(", "))
        })
    }
}

pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

pub const THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const CFG_SCALES: [f64; 5] = [2.0, 3.0, 4.0, 5.0, 6.0];

/// Variant configs derived from `base`, each changing only the suite's factor.
pub fn variants(suite: Suite, base: &RunConfig) -> Vec<Variant> {
    let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant { name, config }
    };
    match suite {
        Suite::CoreNetwork => [
            ("attention-no-posemb", Mixer::AttentionNoPosEmb),
            ("causal", Mixer::CausalMamba),
            ("non-causal", Mixer::NonCausalMamba),
        ]
        .into_iter()
        .map(|(n, m)| with(n.into(), &|c| c.model.mixer = m))
        .collect(),
        Suite::Hierarchy => [("non-hierarchical", false), ("hierarchical", true)]
            .into_iter()
            .map(|(n, h)| with(n.into(), &|c| c.model.hierarchical = h))
            .collect(),
        Suite::Threshold => THRESHOLDS
            .into_iter()
            .map(|t| {
                with(format!("tau-{t}"), &|c| {
                    c.model.routing.tau_temporal = t;
                    c.model.routing.tau_mm = t;
                })
            })
            .collect(),
        Suite::Routing => [("no-routing", false, false), ("temporal", true, false), ("temporal+mm", true, true)]
            .into_iter()
            .map(|(n, t, m)| {
                with(n.into(), &|c| {
                    c.model.hierarchical = t || m;
                    c.model.routing.temporal = t;
                    c.model.routing.mm = m;
                })
            })
            .collect(),
        Suite::Cfg => CFG_SCALES.into_iter().map(|s| with(format!("cfg-{s}"), &|c| c.flow.cfg_scale = s)).collect(),
        Suite::DistanceMetric => [SimilarityMetric::Cosine, SimilarityMetric::Euclidean, SimilarityMetric::DotProduct]
            .into_iter()
            .map(|m| with(m.name().into(), &|c| c.model.routing.metric = m))
            .collect(),
        Suite::Pilot => [
            ("attention-no-posemb", Mixer::AttentionNoPosEmb),
            ("non-causal", Mixer::NonCausalMamba),
        ]
        .into_iter()
        .map(|(n, m)| {
            with(n.into(), &|c| {
                c.model.mixer = m;
                c.model.hierarchical = false;
            })
        })
        .collect(),
    }
}

/// Config text that determines the trained weights (sampling keys removed),
/// so variants differing only at sampling time share one checkpoint.
pub fn training_key(config: &RunConfig) -> String {
    config.to_text().lines().filter(|l| !l.starts_with("flow.")).collect::<Vec<_>>().join("\n")
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
