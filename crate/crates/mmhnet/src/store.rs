//! On-disk layouts for checkpoints, episode splits and generated latents,
//! all built on [`crate::archive`].

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mmhnet_core::data::{Episode, SplitSpec};
use mmhnet_core::model::Mmhnet;
use mmhnet_core::Tensor;

use crate::archive::{self, Archive, Group};
use crate::config::RunConfig;

pub const PARAMS_FILE: &str = "params.f64";
const CONFIG_PREFIX: &str = "config.";

/// Parameters plus the resolved run configuration in the manifest metadata.
pub fn save_checkpoint(dir: &Path, config: &RunConfig, model: &Mmhnet, iteration: usize) -> Result<()> {
    let mut a = Archive::single(PARAMS_FILE, model.params().entries())
        .with_meta("kind", "checkpoint")
        .with_meta("iteration", iteration)
        .with_meta("param_count", model.param_count());
    for line in config.to_text().lines() {
        let (k, v) = line.split_once(" = ").expect("config line");
        a.meta.insert(format!("{CONFIG_PREFIX}{k}"), v.to_string());
    }
    archive::write(dir, &a)
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Mmhnet,
    pub iteration: usize,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    ensure!(dir.join(archive::MANIFEST).exists(), "checkpoint {} not found", dir.display());
    let a = archive::read(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    ensure!(a.meta("kind")? == "checkpoint", "{} is not a checkpoint", dir.display());
    let text: String = a
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| format!("{k} = {v}\n")))
        .collect();
    let config = RunConfig::parse(&text)?;
    let mut model = Mmhnet::new(config.model.clone(), config.train.seed)?;
    model.params_mut().load(a.group(PARAMS_FILE)?.tensors.clone())?;
    Ok(Checkpoint {
        config,
        model,
        iteration: a.meta("iteration")?.parse()?,
    })
}

pub fn episode_file(index: usize) -> String {
    format!("ep_{index:05}.f64")
}

/// A split directory: one raw file per episode and a single manifest.
pub fn save_split(dir: &Path, spec: &SplitSpec, episodes: &[Episode]) -> Result<()> {
    let mut a = Archive::default()
        .with_meta("kind", "split")
        .with_meta("seed", spec.seed)
        .with_meta("size", episodes.len())
        .with_meta("length", spec.length)
        .with_meta("redundancy", crate::config::fmt_f64(spec.redundancy))
        .with_meta("event_rate", crate::config::fmt_f64(spec.event_rate));
    for (i, e) in episodes.iter().enumerate() {
        a.meta.insert(format!("episode_seed.{i:05}"), e.seed.to_string());
        a.groups.push(Group {
            file: episode_file(i),
            tensors: e.to_tensors(),
        });
    }
    archive::write(dir, &a)
}

pub fn load_split(dir: &Path) -> Result<Vec<Episode>> {
    let a = archive::read(dir).with_context(|| format!("loading split {}", dir.display()))?;
    ensure!(a.meta("kind")? == "split", "{} is not a split", dir.display());
    let size: usize = a.meta("size")?.parse()?;
    (0..size).map(|i| Ok(Episode::from_tensors(&a.group(&episode_file(i))?.tensors)?)).collect()
}

/// Episode seeds listed in a split manifest.
pub fn split_seeds(dir: &Path) -> Result<Vec<u64>> {
    let a = archive::read(dir)?;
    a.meta.iter().filter(|(k, _)| k.starts_with("episode_seed.")).map(|(_, v)| Ok(v.parse()?)).collect()
}

pub struct Generated {
    pub latent: Tensor,
    pub seed: u64,
    pub steps: usize,
    pub cfg_scale: f64,
}

pub fn save_generated(dir: &Path, g: &Generated, episode: &str) -> Result<()> {
    let a = Archive::single("latent.f64", vec![("latent".into(), g.latent.clone())])
        .with_meta("kind", "generated")
        .with_meta("seed", g.seed)
        .with_meta("steps", g.steps)
        .with_meta("cfg_scale", crate::config::fmt_f64(g.cfg_scale))
        .with_meta("length", g.latent.rows())
        .with_meta("episode", episode);
    archive::write(dir, &a)
}

pub fn load_generated(dir: &Path) -> Result<Generated> {
    let a = archive::read(dir)?;
    if a.meta("kind")? != "generated" {
        bail!("{} is not a generated latent", dir.display());
    }
    Ok(Generated {
        latent: a.group("latent.f64")?.tensors[0].1.clone(),
        seed: a.meta("seed")?.parse()?,
        steps: a.meta("steps")?.parse()?,
        cfg_scale: a.meta("cfg_scale")?.parse()?,
    })
}
