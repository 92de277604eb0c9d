//! Command implementations behind the `mmhnet` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mmhnet_core::data::{make_split_with, Episode, LATENT_DIM};
use mmhnet_core::eval::EvalContext;
use mmhnet_core::flow::{sample_euler, SamplerConfig};

use crate::bench::{self, Kernel};
use crate::config::{fmt_f64, RunConfig};
use crate::experiment::{self, score, test_episodes, training_key, variants, write_csv, Conditioning, EvalRow, Suite, CSV_HEADER};
use crate::store::{self, Generated};

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path.file_name().context("path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Refuses to reuse a non-empty directory unless `force`, in which case it is cleared.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            ensure!(force, "{} exists and is not empty (use --force to overwrite)", dir.display());
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Loaded config plus the verbatim source text, if any.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: Option<String>,
}

pub fn load_config(path: Option<&Path>) -> Result<LoadedConfig> {
    match path {
        None => Ok(LoadedConfig { config: RunConfig::default(), source: None }),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let config = RunConfig::parse(&text).with_context(|| format!("in config {}", p.display()))?;
            Ok(LoadedConfig { config, source: Some(text) })
        }
    }
}

fn store_config(dir: &Path, loaded: &LoadedConfig, config: &RunConfig) -> Result<()> {
    write_atomic(&dir.join("config.txt"), config.to_text().as_bytes())?;
    if let Some(src) = &loaded.source {
        write_atomic(&dir.join("config.source.txt"), src.as_bytes())?;
    }
    Ok(())
}

pub fn split_dir_name(length: usize) -> String {
    format!("test_{length}")
}

/// `data gen`: the train split plus one test split per configured length.
pub fn data_gen(loaded: &LoadedConfig, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let c = &loaded.config;
    prepare_dir(out, force)?;
    store_config(out, loaded, c)?;
    let mut dirs = Vec::new();
    let mut specs = vec![("train".to_string(), c.train_split())];
    for &l in &c.data.test_lengths {
        specs.push((split_dir_name(l), c.test_split(l)));
    }
    for (name, spec) in specs {
        let eps = make_split_with(&spec)?;
        let dir = out.join(&name);
        store::save_split(&dir, &spec, &eps)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Train split from `data/train`; the data must exist.
pub fn load_train_split(data: &Path) -> Result<Vec<Episode>> {
    let dir = data.join("train");
    ensure!(dir.exists(), "training data not found at {} (run `mmhnet data gen` first)", dir.display());
    store::load_split(&dir)
}

pub fn train(loaded: &LoadedConfig, seed: Option<u64>, data: &Path, out: &Path, force: bool) -> Result<()> {
    let mut config = loaded.config.clone();
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let episodes = load_train_split(data)?;
    prepare_dir(out, force)?;
    store_config(out, loaded, &config)?;
    let mut losses = Vec::with_capacity(config.train.iters);
    let every = config.train.checkpoint_every;
    let result = {
        let cfg = config.clone();
        let mut hook = |it: usize, loss: f64, model: &mmhnet_core::model::Mmhnet| -> Result<()> {
            losses.push(loss);
            if every > 0 && (it + 1) % every == 0 && it + 1 < cfg.train.iters {
                store::save_checkpoint(&out.join(format!("checkpoint_{:06}", it + 1)), &cfg, model, it + 1)?;
            }
            Ok(())
        };
        experiment::train_model(&config, &episodes, &mut hook)
    };
    let rows: Vec<Vec<String>> = losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt_f64(*l)]).collect();
    write_csv(&out.join("loss.csv"), &["iteration", "loss"], &rows)?;
    let model = match result {
        Ok(m) => m,
        Err(e) => {
            if let Some(n) = e.downcast_ref::<experiment::NanAbort>() {
                let dump = format!(
                    "iteration {}\nbatch_index {}\nepisode {}\nepisode_seed {}\n",
                    n.iteration, n.batch_index, n.episode, n.episode_seed
                );
                write_atomic(&out.join("nan_dump.txt"), dump.as_bytes())?;
            }
            return Err(e);
        }
    };
    store::save_checkpoint(&out.join("checkpoint"), &config, &model, config.train.iters)
}

/// Resolves a checkpoint path: either the checkpoint itself or a run directory holding one.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.join("checkpoint").join(crate::archive::MANIFEST).exists() {
        p.join("checkpoint")
    } else {
        p.to_path_buf()
    }
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub length: usize,
    pub episode: usize,
    pub split: Option<&'a Path>,
    pub steps: Option<usize>,
    pub cfg: Option<f64>,
    pub seed: Option<u64>,
    pub out: &'a Path,
}

/// Conditions come from test episode `episode` at `length`, read from
/// `split` when given and regenerated from the config otherwise.
pub fn generate(a: &GenerateArgs<'_>) -> Result<Generated> {
    let ck = store::load_checkpoint(&checkpoint_path(a.checkpoint))?;
    let c = &ck.config;
    let episode = match a.split {
        Some(dir) => {
            let eps = store::load_split(dir)?;
            eps.into_iter().nth(a.episode).context("episode index outside the split")?
        }
        None => c.test_split(a.length).episode(a.episode)?,
    };
    let sampler = SamplerConfig {
        steps: a.steps.unwrap_or(c.flow.steps),
        cfg_scale: a.cfg.unwrap_or(c.flow.cfg_scale),
    };
    let seed = a.seed.unwrap_or(c.train.seed);
    let latent = sample_euler(&ck.model, &episode.conditions(), episode.len(), LATENT_DIM, sampler, seed)?;
    let g = Generated {
        latent,
        seed,
        steps: sampler.steps,
        cfg_scale: sampler.cfg_scale,
    };
    store::save_generated(a.out, &g, &episode.seed.to_string())?;
    Ok(g)
}

pub fn eval_context(c: &RunConfig) -> Result<EvalContext> {
    Ok(EvalContext::new(c.eval.embedder_seed, c.eval.chunk_len)?)
}

/// One CSV row per length.
pub fn eval(checkpoint: &Path, lengths: Option<Vec<usize>>, mode: Conditioning, out: &Path) -> Result<Vec<EvalRow>> {
    let ck = store::load_checkpoint(&checkpoint_path(checkpoint))?;
    let c = &ck.config;
    let ctx = eval_context(c)?;
    let lengths = lengths.unwrap_or_else(|| c.data.test_lengths.clone());
    let name = c.model.mixer.name();
    let mut rows = Vec::new();
    for l in lengths {
        let eps = test_episodes(c, l)?;
        rows.push(score(&ctx, &ck.model, name, &eps, c.flow, c.train.seed, mode)?);
    }
    let recs: Vec<Vec<String>> = rows.iter().map(EvalRow::record).collect();
    write_csv(out, &CSV_HEADER, &recs)?;
    Ok(rows)
}

/// Trains (or reuses) one checkpoint per distinct training config, then
/// scores every variant at every test length.
pub fn ablate(loaded: &LoadedConfig, suite: Suite, out: &Path) -> Result<PathBuf> {
    let base = &loaded.config;
    fs::create_dir_all(out)?;
    store_config(out, loaded, base)?;
    let train_eps = make_split_with(&base.train_split())?;
    let ctx = eval_context(base)?;
    let mut trained: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in variants(suite, base) {
        let key = training_key(&v.config);
        let ck_dir = match trained.get(&key) {
            Some(d) => d.clone(),
            None => {
                let d = out.join(&v.name).join("checkpoint");
                if !d.join(crate::archive::MANIFEST).exists() {
                    let model = experiment::train_model(&v.config, &train_eps, &mut |_, _, _| Ok(()))?;
                    store::save_checkpoint(&d, &v.config, &model, v.config.train.iters)?;
                }
                trained.insert(key, d.clone());
                d
            }
        };
        let ck = store::load_checkpoint(&ck_dir)?;
        for &l in &base.data.test_lengths {
            let eps = test_episodes(base, l)?;
            let row = score(&ctx, &ck.model, &v.name, &eps, v.config.flow, base.train.seed, Conditioning::Matched)?;
            rows.push(row.record());
        }
    }
    let path = out.join(format!("ablate_{}.csv", suite.name()));
    write_csv(&path, &CSV_HEADER, &rows)?;
    Ok(path)
}

pub fn bench(kernels: &[Kernel], lengths: &[usize], reps: usize, out: &Path) -> Result<Vec<bench::BenchRow>> {
    if reps < 5 {
        bail!("bench needs at least 5 repetitions");
    }
    let rows = bench::run(kernels, lengths, reps)?;
    let recs: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.kernel.name().to_string(),
                r.length.to_string(),
                format!("{:.9}", r.seconds),
                r.ratio.map(|x| format!("{x:.4}")).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(out, &["kernel", "length", "median_seconds", "ratio_to_half"], &recs)?;
    Ok(rows)
}
