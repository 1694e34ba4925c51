use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use pointgmm::em::{EmConfig, fit_tree};
use pointgmm::hgmm::sample_points;
use pointgmm::io::{Model, read_checkpoint, read_cloud, read_model, write_checkpoint, write_cloud, write_tree};
use pointgmm::model::{RegConfig, RegModel, VaeConfig, VaeModel};
use pointgmm::registration::{evaluate, nearest_neighbour_mse, register};
use pointgmm::seed::derive_seed;
use pointgmm::training::{EpochRecord, TrainConfig, mean_leaf_log_likelihood, train_registration, train_vae, write_csv};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};

use crate::corpus::{Corpus, usage};

/// Config file layout shared by the training commands. Both sections are
/// optional; given fields override the desk-scale presets one by one.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: Value,
    #[serde(default)]
    train: Value,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn overlay<T: Serialize + DeserializeOwned>(default: T, over: Value, what: &str) -> Result<T> {
    let mut base = serde_json::to_value(default)?;
    if !over.is_null() {
        merge(&mut base, over);
    }
    serde_json::from_value(base).map_err(|e| usage(format!("config `{what}` section: {e}")))
}

fn load_config<M: Serialize + DeserializeOwned>(path: Option<&Path>, default: M) -> Result<(M, TrainConfig)> {
    let Some(path) = path else { return Ok((default, TrainConfig::default())) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    Ok((overlay(default, cfg.model, "model")?, overlay(TrainConfig::default(), cfg.train, "train")?))
}

/// Fails before any work is done if `path` could not be created later.
fn check_writable(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(usage(format!("output directory {} does not exist", parent.display())));
    }
    if path.is_dir() {
        return Err(usage(format!("output {} is a directory", path.display())));
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad {what} `{text}`"))))
        .collect()
}

fn parse_coverage(text: &str) -> Result<[f64; 2]> {
    match parse_list::<f64>(text, "coverage")?.as_slice() {
        [lo, hi] => Ok([*lo, *hi]),
        [f] => Ok([*f, *f]),
        _ => Err(usage(format!("coverage `{text}` must be `low,high`"))),
    }
}

fn write_trace(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv(&mut out, records)?;
    out.flush()?;
    Ok(())
}

fn progress(r: &EpochRecord) {
    eprintln!("epoch {:>4}  loss {:.6}", r.epoch, r.loss_total);
}

#[derive(Args)]
pub struct FitEm {
    #[arg(long)]
    input: PathBuf,
    /// Children per node at each level, e.g. `4,4`.
    #[arg(long, default_value = "4,4")]
    branching: String,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

impl FitEm {
    pub fn run(self) -> Result<()> {
        let config =
            EmConfig { branching: parse_list(&self.branching, "branching")?, max_iters: self.iters, tol: self.tol, seed: self.seed };
        config.validate()?;
        check_writable(&self.output)?;
        let cloud = read_cloud(&self.input).with_context(|| format!("reading {}", self.input.display()))?;
        let tree = fit_tree(&cloud, &config)?;
        write_tree(&self.output, &tree)?;
        Ok(())
    }
}

#[derive(Args)]
pub struct TrainVae {
    /// Directory of .xyz/.ply files or `procedural:<families>:<count>[:<seed>]`.
    #[arg(long)]
    corpus: String,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_out: PathBuf,
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
}

impl TrainVae {
    pub fn run(self) -> Result<()> {
        let (model_cfg, mut train) = load_config(self.config.as_deref(), VaeConfig::desk())?;
        train.epochs = self.epochs.unwrap_or(train.epochs);
        train.seed = self.seed.unwrap_or(train.seed);
        model_cfg.validate()?;
        train.validate()?;
        check_writable(&self.checkpoint_out)?;
        if let Some(p) = &self.metrics_csv {
            check_writable(p)?;
        }
        let clouds = Corpus::parse(&self.corpus)?.clouds(train.points)?;
        let mut model = VaeModel::new(model_cfg, train.seed)?;
        let records = train_vae(&mut model, &clouds, &train, progress)?;
        write_checkpoint(&self.checkpoint_out, &model.to_checkpoint())?;
        if let Some(p) = &self.metrics_csv {
            write_trace(p, &records)?;
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct Sample {
    /// Tree JSON or VAE checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 2048)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

impl Sample {
    pub fn run(self) -> Result<()> {
        if self.count == 0 {
            return Err(usage("--count must be at least 1"));
        }
        check_writable(&self.output)?;
        let tree = match read_model(&self.model).with_context(|| format!("reading {}", self.model.display()))? {
            Model::Tree(t) => t,
            Model::Checkpoint(c) => {
                let vae = VaeModel::from_checkpoint(&c)?;
                vae.decode(&vae.sample_prior(derive_seed(self.seed, 0)))?
            }
        };
        let cloud = sample_points(&tree, self.count, derive_seed(self.seed, 1))?;
        write_cloud(&self.output, &cloud)?;
        Ok(())
    }
}

#[derive(Args)]
pub struct Interpolate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cloud_a: PathBuf,
    #[arg(long)]
    cloud_b: PathBuf,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Points sampled from each decoded tree.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    outdir: PathBuf,
}

impl Interpolate {
    pub fn run(self) -> Result<()> {
        if self.steps < 2 || self.points == 0 {
            return Err(usage("--steps must be at least 2 and --points at least 1"));
        }
        if self.outdir.exists() && !self.outdir.is_dir() {
            return Err(usage(format!("{} is not a directory", self.outdir.display())));
        }
        let vae = VaeModel::from_checkpoint(&read_checkpoint(&self.model)?)?;
        let za = vae.encode(&read_cloud(&self.cloud_a).with_context(|| format!("reading {}", self.cloud_a.display()))?)?;
        let zb = vae.encode(&read_cloud(&self.cloud_b).with_context(|| format!("reading {}", self.cloud_b.display()))?)?;
        let mut outputs = Vec::with_capacity(self.steps);
        for k in 0..self.steps {
            let t = k as f64 / (self.steps - 1) as f64;
            let z: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let tree = vae.decode(&z)?;
            let cloud = sample_points(&tree, self.points, derive_seed(self.seed, k as u64))?;
            outputs.push((tree, cloud));
        }
        fs::create_dir_all(&self.outdir)?;
        for (k, (tree, cloud)) in outputs.iter().enumerate() {
            write_tree(self.outdir.join(format!("step_{k:03}.json")), tree)?;
            write_cloud(self.outdir.join(format!("step_{k:03}.xyz")), cloud)?;
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct TrainReg {
    /// `procedural:<families>:<count>[:<seed>]`.
    #[arg(long)]
    corpus: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Degrees.
    #[arg(long)]
    max_rotation: Option<f64>,
    /// `low,high` fraction of retained surface samples.
    #[arg(long)]
    coverage: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_out: PathBuf,
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
}

impl TrainReg {
    pub fn run(self) -> Result<()> {
        let (model_cfg, mut train) = load_config(self.config.as_deref(), RegConfig::desk())?;
        train.epochs = self.epochs.unwrap_or(train.epochs);
        train.seed = self.seed.unwrap_or(train.seed);
        if let Some(deg) = self.max_rotation {
            train.max_rotation = deg.to_radians();
        }
        if let Some(c) = &self.coverage {
            train.coverage = parse_coverage(c)?;
        }
        model_cfg.validate()?;
        train.validate()?;
        check_writable(&self.checkpoint_out)?;
        if let Some(p) = &self.metrics_csv {
            check_writable(p)?;
        }
        let corpus = Corpus::parse(&self.corpus)?;
        let mut model = RegModel::new(model_cfg, train.seed)?;
        let records = train_registration(&mut model, corpus.shapes()?, &train, progress)?;
        write_checkpoint(&self.checkpoint_out, &model.to_checkpoint())?;
        if let Some(p) = &self.metrics_csv {
            write_trace(p, &records)?;
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct Register {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

impl Register {
    pub fn run(self) -> Result<()> {
        if let Some(p) = &self.json_out {
            check_writable(p)?;
        }
        let model = RegModel::from_checkpoint(&read_checkpoint(&self.model)?)?;
        let source = read_cloud(&self.source).with_context(|| format!("reading {}", self.source.display()))?;
        let target = read_cloud(&self.target).with_context(|| format!("reading {}", self.target.display()))?;
        let t = register(&model, &source, &target)?;
        let doc = json!({
            "phi": t.phi,
            "v": [t.v.x, t.v.y, t.v.z],
            "mse": nearest_neighbour_mse(&source, &target, &t),
        });
        let text = serde_json::to_string_pretty(&doc)?;
        match &self.json_out {
            Some(p) => fs::write(p, text + "\n")?,
            None => println!("{text}"),
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct EvalReg {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    /// Degrees.
    #[arg(long, default_value_t = 180.0)]
    max_rotation: f64,
    #[arg(long, default_value = "0.3,0.8")]
    coverage: String,
    /// Held-out shapes.
    #[arg(long, default_value = "procedural:chair:50:1000")]
    corpus: String,
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv_out: PathBuf,
}

#[derive(Serialize)]
struct EvalSummary {
    pairs: usize,
    mean_mse: f64,
    mean_identity_mse: f64,
    mean_random_mse: f64,
    mean_phi_error: f64,
}

impl EvalReg {
    pub fn run(self) -> Result<()> {
        let train = TrainConfig {
            max_rotation: self.max_rotation.to_radians(),
            coverage: parse_coverage(&self.coverage)?,
            noise_sigma: self.noise_sigma,
            points: self.points,
            ..TrainConfig::default()
        };
        train.validate()?;
        if self.pairs == 0 {
            return Err(usage("--pairs must be at least 1"));
        }
        check_writable(&self.csv_out)?;
        let corpus = Corpus::parse(&self.corpus)?;
        let model = RegModel::from_checkpoint(&read_checkpoint(&self.model)?)?;
        let rows = evaluate(&model, corpus.shapes()?, &train.pair_config(), self.pairs, self.seed)?;
        let mut out = BufWriter::new(File::create(&self.csv_out)?);
        writeln!(out, "pair,mse,identity_mse,random_mse,phi_error,phi_true")?;
        for r in &rows {
            writeln!(out, "{},{},{},{},{},{}", r.pair, r.mse, r.identity_mse, r.random_mse, r.phi_error, r.phi_true)?;
        }
        out.flush()?;
        let n = rows.len() as f64;
        let mean = |f: fn(&pointgmm::registration::EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let summary = EvalSummary {
            pairs: rows.len(),
            mean_mse: mean(|r| r.mse),
            mean_identity_mse: mean(|r| r.identity_mse),
            mean_random_mse: mean(|r| r.random_mse),
            mean_phi_error: mean(|r| r.phi_error),
        };
        println!("{}", serde_json::to_string_pretty(&summary)?);
        Ok(())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Hgmm,
    Vanilla,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
pub struct Ablate {
    #[arg(long, value_enum, default_value = "hgmm")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "on")]
    attention: Switch,
    #[arg(long, default_value = "procedural:table,chair,airplane:64:1")]
    corpus: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    metrics_csv: PathBuf,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
}

impl Ablate {
    pub fn run(self) -> Result<()> {
        let (mut model_cfg, mut train) = load_config(self.config.as_deref(), VaeConfig::desk())?;
        model_cfg.decoder.hierarchical = matches!(self.mode, Mode::Hgmm);
        model_cfg.decoder.use_attention = matches!(self.attention, Switch::On);
        train.epochs = self.epochs.unwrap_or(train.epochs);
        train.seed = self.seed.unwrap_or(train.seed);
        model_cfg.validate()?;
        train.validate()?;
        check_writable(&self.metrics_csv)?;
        if let Some(p) = &self.checkpoint_out {
            check_writable(p)?;
        }
        let clouds = Corpus::parse(&self.corpus)?.clouds(train.points)?;
        let mut model = VaeModel::new(model_cfg, train.seed)?;
        let records = train_vae(&mut model, &clouds, &train, progress)?;
        let leaf_ll = mean_leaf_log_likelihood(&model, &clouds)?;
        write_trace(&self.metrics_csv, &records)?;
        if let Some(p) = &self.checkpoint_out {
            write_checkpoint(p, &model.to_checkpoint())?;
        }
        println!("{}", json!({ "leaf_log_likelihood": leaf_ll, "final_loss": records.last().map(|r| r.loss_total) }));
        Ok(())
    }
}

