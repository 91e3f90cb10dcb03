//! Command-line front end: config loading, dispatch and artifact emission.
//!
//! Every command writes `manifest.json` into the output directory before
//! anything else. Exit codes: 0 success, 1 usage or config error, 2 when a
//! training run diverged.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig, AnchorLabel};
use crate::error::{Error, Result};
use crate::experiments::cdf::{loss_cdf, CdfCurve};
use crate::experiments::detect::InferenceConfig;
use crate::experiments::metrics::Metrics;
use crate::experiments::sweep::{run_one, sweep, SweepConfig, TrialData};
use crate::experiments::synth::{
    gen_classification, gen_toy_detection, sample_indices, SyntheticTaskConfig, TaskMode,
};
use crate::io::{fmt_f64, read_file, save_json, CsvTable};
use crate::loss::{loss_grad, loss_value, BinaryLabel, LossConfig};
use crate::model::{classify, DenseHead, Divergence, TrainConfig};
use crate::numeric::derive_seed;

pub const TRAIN_SCHEMA: &str = "densefocus.train/1";
pub const LOSSES_SCHEMA: &str = "densefocus.losses/1";
pub const CDF_SCHEMA: &str = "densefocus.cdf/1";
pub const ANCHORS_SCHEMA: &str = "densefocus.anchors/1";
pub const MANIFEST_SCHEMA: &str = "densefocus.manifest/1";
pub const JOBS_ENV: &str = "DENSEFOCUS_JOBS";

#[derive(Debug, Parser)]
#[command(
    name = "densefocus",
    version,
    about = "Focal loss experiments on synthetic dense-detection tasks"
)]
pub struct Cli {
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = JOBS_ENV)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Loss and derivative values over a logit grid.
    Losses(ConfigArg),
    /// Train one head on a synthetic task.
    Train(RequiredConfig),
    /// Train every setting of a sweep over several trials.
    Sweep(RequiredConfig),
    /// Normalised loss CDFs of a trained head.
    Cdf(CdfArgs),
    /// Dump the anchor layout of an image size.
    Anchors(AnchorArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RequiredConfig {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct CdfArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnchorArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub tool_version: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub timestamp: u64,
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

/// What a command produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub diverged: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.diverged {
            2
        } else {
            0
        }
    }
}

fn load_config<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let text = read_file(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == schema => {}
        Some(s) => {
            return Err(Error::config(format!(
                "{}: schema {s:?} is not {schema:?}",
                path.display()
            )))
        }
        None => {
            return Err(Error::config(format!(
                "{}: missing \"schema\" key (expected {schema:?})",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_manifest(
    cli: &Cli,
    command: &str,
    config_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<PathBuf> {
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        command: command.to_string(),
        config_path: config_path.map(Path::to_path_buf),
        seed,
        output_dir: cli.out.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: timestamp(),
    };
    let path = cli.out.join("manifest.json");
    save_json(&path, &manifest)?;
    Ok(path)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Losses(a) => cmd_losses(cli, a.config.as_deref()),
        Command::Train(a) => cmd_train(cli, &a.config),
        Command::Sweep(a) => cmd_sweep(cli, &a.config),
        Command::Cdf(a) => cmd_cdf(cli, &a.model, &a.config),
        Command::Anchors(a) => cmd_anchors(cli, a),
    }
}

/// Logit grid and the losses evaluated on it (label +1, so x equals x_t).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossGridConfig {
    pub schema: String,
    pub x_min: f64,
    pub x_max: f64,
    pub step: f64,
    pub losses: Vec<LossConfig>,
}

impl Default for LossGridConfig {
    fn default() -> Self {
        let mut losses = vec![LossConfig::ce()];
        losses.extend([0.5, 1.0, 2.0, 5.0].map(|g| LossConfig::focal(g, None)));
        LossGridConfig {
            schema: LOSSES_SCHEMA.to_string(),
            x_min: -5.0,
            x_max: 5.0,
            step: 0.01,
            losses,
        }
    }
}

impl LossGridConfig {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min <= self.x_max) {
            return Err(Error::config("loss grid needs finite x_min <= x_max"));
        }
        if self.x_min == self.x_max {
            return Ok(vec![self.x_min]);
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::config("loss grid step must be > 0"));
        }
        let n = ((self.x_max - self.x_min) / self.step + 1e-9).floor() as usize;
        if n > 10_000_000 {
            return Err(Error::config("loss grid has more than 10^7 points"));
        }
        Ok((0..=n).map(|i| self.x_min + i as f64 * self.step).collect())
    }

    pub fn table(&self) -> Result<CsvTable> {
        for l in &self.losses {
            l.validate()?;
        }
        let mut t = CsvTable::new(&["x_t", "kind", "gamma", "alpha", "beta", "loss", "dloss_dx"]);
        for l in &self.losses {
            for &x in &self.points()? {
                t.push(vec![
                    fmt_f64(x),
                    l.kind.name().to_string(),
                    fmt_f64(l.gamma),
                    l.alpha.map_or(String::new(), fmt_f64),
                    fmt_f64(l.beta),
                    fmt_f64(loss_value(x, BinaryLabel::Positive, l)?),
                    fmt_f64(loss_grad(x, BinaryLabel::Positive, l)?),
                ])?;
            }
        }
        Ok(t)
    }
}

fn cmd_losses(cli: &Cli, config: Option<&Path>) -> Result<Outcome> {
    let cfg: LossGridConfig = match config {
        Some(p) => load_config(p, LOSSES_SCHEMA)?,
        None => LossGridConfig::default(),
    };
    let table = cfg.table()?;
    let manifest = write_manifest(cli, "losses", config, None)?;
    let path = cli.out.join("losses.csv");
    table.save(&path)?;
    Ok(Outcome {
        artifacts: vec![manifest, path],
        diverged: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub schema: String,
    #[serde(default)]
    pub task: SyntheticTaskConfig,
    pub training: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl TrainRunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.training.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema: String,
    pub config: TrainRunConfig,
    pub metrics: Option<Metrics>,
    pub divergence: Option<Divergence>,
    pub iterations_run: usize,
    pub final_loss: f64,
}

fn cmd_train(cli: &Cli, config: &Path) -> Result<Outcome> {
    let mut cfg: TrainRunConfig = load_config(config, TRAIN_SCHEMA)?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.task.validate()?;
    cfg.training.validate()?;
    let manifest = write_manifest(cli, "train", Some(config), Some(cfg.task.seed))?;
    let seed = cfg.task.seed;
    let data = TrialData::generate(&cfg.task, seed, derive_seed(&[seed, 1]))?;
    let run = run_one(&cfg.training, &data, &cfg.inference)?;

    let model_path = cli.out.join("model.json");
    crate::io::write_file(&model_path, format!("{}\n", run.head.to_json()?).as_bytes())?;
    let mut hist = CsvTable::new(&["iteration", "loss", "lr"]);
    for h in &run.history {
        hist.push(vec![
            h.iteration.to_string(),
            fmt_f64(h.loss),
            fmt_f64(h.lr),
        ])?;
    }
    let hist_path = cli.out.join("history.csv");
    hist.save(&hist_path)?;
    let report = TrainReport {
        schema: "densefocus.train-report/1".to_string(),
        iterations_run: run.history.len(),
        final_loss: run.history.last().map_or(f64::NAN, |h| h.loss),
        config: cfg,
        metrics: run.metrics,
        divergence: run.divergence,
    };
    let report_path = cli.out.join("report.json");
    save_json(&report_path, &report)?;
    Ok(Outcome {
        artifacts: vec![manifest, model_path, hist_path, report_path],
        diverged: run.divergence.is_some(),
    })
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn cmd_sweep(cli: &Cli, config: &Path) -> Result<Outcome> {
    let mut cfg: SweepConfig = load_config(config, crate::experiments::sweep::SWEEP_SCHEMA)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let manifest = write_manifest(cli, "sweep", Some(config), Some(cfg.seed))?;
    let report = sweep(&cfg, cli.jobs.unwrap_or_else(default_jobs))?;
    let report_path = cli.out.join("report.json");
    save_json(&report_path, &report)?;
    let trials_path = cli.out.join("sweep_trials.csv");
    report.trials_csv()?.save(&trials_path)?;
    let summary_path = cli.out.join("sweep_summary.csv");
    report.summary_csv()?.save(&summary_path)?;
    Ok(Outcome {
        artifacts: vec![manifest, report_path, trials_path, summary_path],
        diverged: false,
    })
}

fn default_gammas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}
fn default_max_positives() -> usize {
    1_000
}
fn default_max_negatives() -> usize {
    100_000
}

/// Data for the CDF analysis: a synthetic task sampled uniformly per polarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdfConfig {
    pub schema: String,
    #[serde(default)]
    pub task: SyntheticTaskConfig,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default = "default_max_positives")]
    pub max_positives: usize,
    #[serde(default = "default_max_negatives")]
    pub max_negatives: usize,
}

/// Logits and labels of non-ignored anchors of the task, subsampled uniformly.
pub fn cdf_samples(head: &DenseHead, cfg: &CdfConfig) -> Result<(Vec<f64>, Vec<bool>)> {
    if head.num_classes != 1 {
        return Err(Error::input("loss CDFs need a single-class head"));
    }
    let (logits, labels) = match cfg.task.mode {
        TaskMode::Classification => {
            let set = gen_classification(&cfg.task)?;
            (classify(head, &set.features)?, set.labels)
        }
        TaskMode::ToyDetection => {
            let set = gen_toy_detection(&cfg.task)?;
            let (mut logits, mut labels) = (Vec::new(), Vec::new());
            for im in &set.images {
                let l = classify(head, &im.features)?;
                for (x, lab) in l.into_iter().zip(&im.assignment.labels) {
                    if !matches!(lab, AnchorLabel::Ignore) {
                        logits.push(x);
                        labels.push(lab.is_foreground());
                    }
                }
            }
            (logits, labels)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.task.seed, 7]));
    let mut keep = Vec::new();
    for (want, cap) in [(true, cfg.max_positives), (false, cfg.max_negatives)] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == want).collect();
        keep.extend(
            sample_indices(idx.len(), cap, &mut rng)
                .into_iter()
                .map(|j| idx[j]),
        );
    }
    keep.sort_unstable();
    Ok((
        keep.iter().map(|&i| logits[i]).collect(),
        keep.iter().map(|&i| labels[i]).collect(),
    ))
}

pub fn cdf_csv(curve: &CdfCurve) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["rank_fraction", "normalized_loss", "cumulative"]);
    let n = curve.losses.len() as f64;
    for (i, (l, c)) in curve.losses.iter().zip(&curve.cumulative).enumerate() {
        t.push(vec![fmt_f64((i + 1) as f64 / n), fmt_f64(*l), fmt_f64(*c)])?;
    }
    Ok(t)
}

fn cmd_cdf(cli: &Cli, model: &Path, config: &Path) -> Result<Outcome> {
    let mut cfg: CdfConfig = load_config(config, CDF_SCHEMA)?;
    if let Some(s) = cli.seed {
        cfg.task.seed = s;
    }
    cfg.task.validate()?;
    let head = DenseHead::from_json(&read_file(model)?)?;
    let manifest = write_manifest(cli, "cdf", Some(config), Some(cfg.task.seed))?;
    let (logits, labels) = cdf_samples(&head, &cfg)?;
    let curves = loss_cdf(&logits, &labels, &cfg.gammas)?;
    let mut artifacts = vec![manifest];
    let mut summary = CsvTable::new(&["polarity", "gamma", "samples", "top10_share"]);
    for c in &curves {
        let path = cli.out.join(format!(
            "cdf_{}_gamma{}.csv",
            c.polarity.name(),
            fmt_f64(c.gamma)
        ));
        cdf_csv(c)?.save(&path)?;
        artifacts.push(path);
        summary.push(vec![
            c.polarity.name().to_string(),
            fmt_f64(c.gamma),
            c.losses.len().to_string(),
            fmt_f64(c.concentration(0.1)),
        ])?;
    }
    let path = cli.out.join("cdf_summary.csv");
    summary.save(&path)?;
    artifacts.push(path);
    Ok(Outcome {
        artifacts,
        diverged: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorsRunConfig {
    pub schema: String,
    #[serde(default)]
    pub anchors: AnchorConfig,
    pub image_width: u32,
    pub image_height: u32,
}

fn cmd_anchors(cli: &Cli, a: &AnchorArgs) -> Result<Outcome> {
    let (cfg, mut w, mut h) = match &a.config {
        Some(p) => {
            let c: AnchorsRunConfig = load_config(p, ANCHORS_SCHEMA)?;
            (c.anchors, c.image_width, c.image_height)
        }
        None => (AnchorConfig::default(), 640, 640),
    };
    if let Some(x) = a.width {
        w = x;
    }
    if let Some(x) = a.height {
        h = x;
    }
    let set = generate_anchors(&cfg, w, h)?;
    let manifest = write_manifest(cli, "anchors", a.config.as_deref(), None)?;
    let mut buf = Vec::new();
    set.write_csv(&mut buf)?;
    let path = cli.out.join("anchors.csv");
    crate::io::write_file(&path, &buf)?;
    Ok(Outcome {
        artifacts: vec![manifest, path],
        diverged: false,
    })
}

/// Parses arguments, runs the command and maps the result to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(o) => {
            for p in &o.artifacts {
                println!("{}", p.display());
            }
            if o.diverged {
                eprintln!("training diverged");
            }
            o.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
