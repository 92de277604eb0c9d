use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmhnet::commands::{load_config, split_dir_name};
use mmhnet::config::RunConfig;
use mmhnet::experiment::{training_key, variants, Suite, CFG_SCALES, THRESHOLDS};
use mmhnet::store::{self, load_checkpoint, load_generated, split_seeds};
use mmhnet_core::data::LATENT_DIM;
use mmhnet_core::model::Mmhnet;
use mmhnet_core::rng::{normal_tensor, seeded};
use mmhnet_core::Graph;
use sha2::{Digest, Sha256};

const SMALL: &str = "\
train.iters = 3
train.batch = 2
data.train_size = 10
data.test_size = 3
data.test_lengths = 32,64
eval.episodes = 2
flow.steps = 3
";

fn mmhnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmhnet")).args(args).env("MMHNET_THREADS", "1").output().expect("spawn mmhnet")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(out: Output) -> String {
    assert!(!out.status.success());
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// SHA-256 of every file under `dir`, keyed by relative path.
fn hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), hex);
            }
        }
    }
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> String {
        self.path("run.cfg").display().to_string()
    }

    fn data_gen(&self, out: &str) -> Output {
        mmhnet(&["data", "gen", "--config", &self.config(), "--out", s(&self.path(out))])
    }

    fn train(&self, data: &str, out: &str, seed: &str) -> Output {
        mmhnet(&["train", "--config", &self.config(), "--data", s(&self.path(data)), "--out", s(&self.path(out)), "--seed", seed])
    }
}

#[test]
fn data_gen_is_deterministic_and_complete() {
    let w = Workspace::new(SMALL);
    ok(w.data_gen("a"));
    ok(w.data_gen("b"));
    assert_eq!(hashes(&w.path("a")), hashes(&w.path("b")));

    let train: Vec<String> = fs::read_dir(w.path("a/train")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(train.len(), 11);
    assert_eq!(train.iter().filter(|n| n.ends_with(".f64")).count(), 10);
    assert!(train.iter().any(|n| n == "manifest.txt"));

    let train_seeds: BTreeSet<u64> = split_seeds(&w.path("a/train")).unwrap().into_iter().collect();
    assert_eq!(train_seeds.len(), 10);
    for l in [32, 64] {
        let test: BTreeSet<u64> = split_seeds(&w.path("a").join(split_dir_name(l))).unwrap().into_iter().collect();
        assert_eq!(test.len(), 3);
        assert!(train_seeds.is_disjoint(&test));
    }

    assert!(err(w.data_gen("a")).contains("--force"));
    ok(mmhnet(&["data", "gen", "--config", &w.config(), "--out", s(&w.path("a")), "--force"]));
    assert_eq!(hashes(&w.path("a")), hashes(&w.path("b")));
}

#[test]
fn zero_iterations_store_the_initialization() {
    let w = Workspace::new(&SMALL.replace("train.iters = 3", "train.iters = 0"));
    ok(w.data_gen("data"));
    ok(w.train("data", "run", "5"));
    let ck = load_checkpoint(&w.path("run/checkpoint")).unwrap();
    assert_eq!(ck.iteration, 0);
    assert_eq!(ck.config.train.seed, 5);
    let init = Mmhnet::new(ck.config.model.clone(), 5).unwrap();
    assert_eq!(ck.model.params(), init.params());
}

#[test]
fn training_is_reproducible_and_logged() {
    let w = Workspace::new(SMALL);
    ok(w.data_gen("data"));
    ok(w.train("data", "a", "1"));
    ok(w.train("data", "b", "1"));
    ok(w.train("data", "c", "2"));
    let (a, b, c) = (hashes(&w.path("a")), hashes(&w.path("b")), hashes(&w.path("c")));
    assert_eq!(a, b);
    assert_ne!(a[Path::new("checkpoint/params.f64")], c[Path::new("checkpoint/params.f64")]);
    let loss = fs::read_to_string(w.path("a/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(fs::read_to_string(w.path("a/config.source.txt")).unwrap() == SMALL);
    assert!(err(w.train("missing", "d", "1")).contains("data gen"));
}

#[test]
fn generation_contracts() {
    let w = Workspace::new(SMALL);
    ok(w.data_gen("data"));
    ok(w.train("data", "run", "0"));
    let run = w.path("run");
    let gen = |out: &str, extra: &[&str]| {
        let out = w.path(out);
        let mut args = vec!["generate", "--checkpoint", s(&run), "--out", s(&out)];
        args.extend_from_slice(extra);
        mmhnet(&args)
    };
    ok(gen("g1", &["--length", "512", "--seed", "4"]));
    ok(gen("g2", &["--length", "512", "--seed", "4"]));
    assert_eq!(hashes(&w.path("g1")), hashes(&w.path("g2")));
    let g = load_generated(&w.path("g1")).unwrap();
    assert_eq!(g.latent.shape(), &[512, LATENT_DIM]);
    assert!(g.latent.all_finite());
    assert_eq!((g.seed, g.steps, g.cfg_scale), (4, 3, 4.0));

    // cfg 1 against a conditional-only Euler loop
    ok(gen("g3", &["--length", "48", "--seed", "6", "--cfg", "1", "--steps", "5"]));
    let guided = load_generated(&w.path("g3")).unwrap().latent;
    let ck = load_checkpoint(&w.path("run/checkpoint")).unwrap();
    let cond = ck.config.test_split(48).episode(0).unwrap().conditions();
    let mut x = normal_tensor(&mut seeded(6), 48, LATENT_DIM, 1.0);
    let dt = 1.0 / 5.0;
    for k in 0..5 {
        let mut g = Graph::inference();
        let p = ck.model.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let v = ck.model.forward(&mut g, &p, xv, k as f64 * dt, &cond, false).unwrap();
        for (xi, vi) in x.data_mut().iter_mut().zip(g.value(v).data()) {
            *xi += dt * vi;
        }
    }
    let bits = |t: &mmhnet_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert!(bits(&guided) == bits(&x), "cfg 1 differs from the conditional-only path");

    let missing = mmhnet(&["generate", "--checkpoint", s(&w.path("nope")), "--length", "8", "--out", s(&w.path("g4"))]);
    assert!(err(missing).contains("not found"));
}

#[test]
fn eval_reference_and_row_count() {
    let w = Workspace::new(SMALL);
    ok(w.data_gen("data"));
    ok(w.train("data", "run", "0"));
    let csv = w.path("ref.csv");
    let stdout = ok(mmhnet(&["eval", "--checkpoint", s(&w.path("run")), "--lengths", "32,64", "--reference", "--out", s(&csv)]));
    assert_eq!(stdout, fs::read_to_string(&csv).unwrap());
    let mut r = csv::Reader::from_path(&csv).unwrap();
    let header = r.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert!(row[col("fd")].parse::<f64>().unwrap().abs() <= 1e-8);
        assert_eq!(row[col("desync_frames")].parse::<f64>().unwrap(), 0.0);
    }
    let three = w.path("three.csv");
    ok(mmhnet(&["eval", "--checkpoint", s(&w.path("run")), "--lengths", "32,64,96", "--out", s(&three)]));
    assert_eq!(fs::read_to_string(&three).unwrap().lines().count(), 4);
    let again = w.path("again.csv");
    ok(mmhnet(&["eval", "--checkpoint", s(&w.path("run")), "--lengths", "32,64,96", "--out", s(&again)]));
    assert_eq!(fs::read(&three).unwrap(), fs::read(&again).unwrap());
}

/// Config lines that differ between two configs.
fn changed_keys(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    a.to_text()
        .lines()
        .zip(b.to_text().lines())
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.split(" = ").next().unwrap().to_string())
        .collect()
}

#[test]
fn ablation_grids_vary_one_factor() {
    let base = RunConfig::default();
    let names = |suite| variants(suite, &base).into_iter().map(|v| v.name).collect::<Vec<_>>();
    assert_eq!(names(Suite::CoreNetwork), ["attention-no-posemb", "causal", "non-causal"]);
    let taus: Vec<f64> = variants(Suite::Threshold, &base).iter().map(|v| v.config.model.routing.tau_temporal).collect();
    assert_eq!(taus, THRESHOLDS);
    assert_eq!(THRESHOLDS, [0.3, 0.4, 0.5, 0.6, 0.7]);
    let cfgs: Vec<f64> = variants(Suite::Cfg, &base).iter().map(|v| v.config.flow.cfg_scale).collect();
    assert_eq!(cfgs, CFG_SCALES);
    assert_eq!(CFG_SCALES, [2.0, 3.0, 4.0, 5.0, 6.0]);
    for suite in Suite::ALL {
        let vs = variants(suite, &base);
        assert!(vs.len() >= 2);
        let keys: BTreeSet<String> = vs.iter().flat_map(|v| changed_keys(&base, &v.config)).collect();
        let allowed: &[&str] = match suite {
            Suite::CoreNetwork => &["model.mixer"],
            Suite::Hierarchy => &["model.hierarchical"],
            Suite::Threshold => &["routing.tau_temporal", "routing.tau_mm"],
            Suite::Routing => &["model.hierarchical", "routing.temporal", "routing.mm"],
            Suite::Cfg => &["flow.cfg_scale"],
            Suite::DistanceMetric => &["routing.metric"],
            Suite::Pilot => &["model.mixer", "model.hierarchical"],
        };
        assert!(keys.iter().all(|k| allowed.contains(&k.as_str())), "{}: {keys:?}", suite.name());
    }
    let keys: BTreeSet<String> = variants(Suite::Cfg, &base).iter().map(|v| training_key(&v.config)).collect();
    assert_eq!(keys.len(), 1);
}

#[test]
fn ablate_cfg_suite_shares_one_checkpoint() {
    let w = Workspace::new(&SMALL.replace("train.iters = 3", "train.iters = 1"));
    let out = w.path("ablate");
    ok(mmhnet(&["ablate", "--suite", "cfg", "--config", &w.config(), "--out", s(&out)]));
    let csv = fs::read_to_string(out.join("ablate_cfg.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + CFG_SCALES.len() * 2);
    let checkpoints = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().join("checkpoint").exists()).count();
    assert_eq!(checkpoints, 1);
    let unknown = err(mmhnet(&["ablate", "--suite", "bogus", "--out", s(&out)]));
    for suite in Suite::ALL {
        assert!(unknown.contains(suite.name()), "{unknown}");
    }
}

#[test]
fn bad_configs_and_arguments_are_rejected() {
    let w = Workspace::new("train.lrr = 1\n");
    assert!(err(w.data_gen("d")).contains("unknown key"));
    let w = Workspace::new("data.test_seed = 1\n");
    assert!(err(w.data_gen("d")).contains("must differ"));
    assert!(load_config(Some(Path::new("/nonexistent/run.cfg"))).is_err());
    let out = tempfile::tempdir().unwrap();
    let bench = |reps: &str| mmhnet(&["bench", "--kernel", "causal", "--lengths", "64,128", "--reps", reps, "--out", s(&out.path().join("b.csv"))]);
    assert!(err(bench("2")).contains("at least 5"));
    let table = ok(bench("5"));
    assert_eq!(table.lines().count(), 3);
    assert!(err(mmhnet(&["bench", "--kernel", "fft", "--out", s(&out.path().join("c.csv"))])).contains("unknown kernel"));
    assert!(!mmhnet(&["eval", "--checkpoint", "x", "--shuffled", "--reference"]).status.success());
}

#[test]
fn stored_config_reloads_identically() {
    let w = Workspace::new(SMALL);
    ok(w.data_gen("data"));
    ok(w.train("data", "run", "9"));
    let stored = RunConfig::parse(&fs::read_to_string(w.path("run/config.txt")).unwrap()).unwrap();
    let ck = load_checkpoint(&w.path("run/checkpoint")).unwrap();
    assert_eq!(stored, ck.config);
    assert_eq!(store::PARAMS_FILE, "params.f64");
}
