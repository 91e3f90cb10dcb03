//! Multi-setting, multi-trial training runs and their reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::detect::{detect, InferenceConfig};
use crate::experiments::metrics::{classification_metrics, detection_metrics, Metrics};
use crate::experiments::synth::{
    gen_classification, gen_toy_detection, ClassificationSet, DetectionSet, SyntheticTaskConfig,
    TaskMode,
};
use crate::io::{fmt_f64, CsvTable};
use crate::loss::LossConfig;
use crate::model::{
    classify, train, Architecture, DenseHead, Divergence, HistoryEntry, Sampler, TrainConfig,
    TrainingSet,
};
use crate::numeric::{derive_seed, seed_from_bytes};
use crate::sampler::OhemConfig;

pub const SWEEP_SCHEMA: &str = "densefocus.sweep/1";
pub const REPORT_SCHEMA: &str = "densefocus.report/1";

/// Optimiser settings shared by every cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingDefaults {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub lr_drop_points: Vec<f64>,
    pub architecture: Architecture,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        let t = TrainConfig::new(LossConfig::ce(), 1000);
        TrainingDefaults {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            iterations: t.iterations,
            lr_drop_points: t.lr_drop_points,
            architecture: Architecture::OneHidden { hidden: 4 },
        }
    }
}

impl TrainingDefaults {
    pub fn train_config(&self, setting: &Setting, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            iterations: self.iterations,
            lr_drop_points: self.lr_drop_points.clone(),
            seed,
            pi: setting.pi,
            loss: setting.loss,
            sampler: setting.sampler,
            architecture: self.architecture,
        }
    }
}

fn default_pi() -> f64 {
    0.01
}

/// One sweep cell: a loss, an init prior and a sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    #[serde(default)]
    pub name: String,
    pub loss: LossConfig,
    #[serde(default = "default_pi")]
    pub pi: f64,
    #[serde(default)]
    pub sampler: Sampler,
}

impl Setting {
    pub fn new(loss: LossConfig) -> Self {
        let mut s = Setting {
            name: String::new(),
            loss,
            pi: default_pi(),
            sampler: Sampler::AllAnchors,
        };
        s.name = s.auto_name();
        s
    }

    pub fn with_pi(mut self, pi: f64) -> Self {
        self.pi = pi;
        self.name = self.auto_name();
        self
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self.name = self.auto_name();
        self
    }

    pub fn auto_name(&self) -> String {
        let mut name = self.loss.tag();
        if self.pi != default_pi() {
            name.push_str(&format!(" pi={}", self.pi));
        }
        if let Sampler::Ohem(o) = &self.sampler {
            name.push(' ');
            name.push_str(&o.tag());
        }
        name
    }
}

/// Cartesian families of settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Grid {
    AlphaCe {
        alphas: Vec<f64>,
    },
    Focal {
        gammas: Vec<f64>,
        alphas: Vec<f64>,
    },
    FocalStar {
        gammas: Vec<f64>,
        betas: Vec<f64>,
        alpha: Option<f64>,
    },
    Ohem {
        loss: LossConfig,
        batch_sizes: Vec<usize>,
        nms_thresholds: Vec<Option<f64>>,
        ratio: Vec<bool>,
    },
}

impl Grid {
    pub fn expand(&self) -> Vec<Setting> {
        match self {
            Grid::AlphaCe { alphas } => alphas
                .iter()
                .map(|&a| Setting::new(LossConfig::alpha_ce(a)))
                .collect(),
            Grid::Focal { gammas, alphas } => gammas
                .iter()
                .flat_map(|&g| {
                    alphas
                        .iter()
                        .map(move |&a| Setting::new(LossConfig::focal(g, Some(a))))
                })
                .collect(),
            Grid::FocalStar {
                gammas,
                betas,
                alpha,
            } => gammas
                .iter()
                .flat_map(|&g| {
                    betas
                        .iter()
                        .map(move |&b| Setting::new(LossConfig::focal_star(g, b, *alpha)))
                })
                .collect(),
            Grid::Ohem {
                loss,
                batch_sizes,
                nms_thresholds,
                ratio,
            } => {
                let mut out = Vec::new();
                for &b in batch_sizes {
                    for &n in nms_thresholds {
                        for &r in ratio {
                            out.push(
                                Setting::new(*loss)
                                    .with_sampler(Sampler::Ohem(OhemConfig::new(b, n, r))),
                            );
                        }
                    }
                }
                out
            }
        }
    }
}

fn default_trials() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema: String,
    #[serde(default)]
    pub task: SyntheticTaskConfig,
    #[serde(default)]
    pub training: TrainingDefaults,
    #[serde(default)]
    pub settings: Vec<Setting>,
    #[serde(default)]
    pub grids: Vec<Grid>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl SweepConfig {
    pub fn new(
        task: SyntheticTaskConfig,
        training: TrainingDefaults,
        settings: Vec<Setting>,
        trials: usize,
        seed: u64,
    ) -> Self {
        SweepConfig {
            schema: SWEEP_SCHEMA.to_string(),
            task,
            training,
            settings,
            grids: Vec::new(),
            trials,
            seed,
            inference: InferenceConfig::default(),
        }
    }

    /// Explicit settings followed by every grid, in declaration order.
    pub fn cells(&self) -> Vec<Setting> {
        let mut cells: Vec<Setting> = self
            .settings
            .iter()
            .cloned()
            .map(|mut s| {
                if s.name.is_empty() {
                    s.name = s.auto_name();
                }
                s
            })
            .collect();
        for g in &self.grids {
            cells.extend(g.expand());
        }
        cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SWEEP_SCHEMA {
            return Err(Error::config(format!(
                "unsupported schema {:?}, expected {SWEEP_SCHEMA:?}",
                self.schema
            )));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        self.task.validate()?;
        let cells = self.cells();
        if cells.is_empty() {
            return Err(Error::config("sweep has no settings"));
        }
        for c in &cells {
            self.training
                .train_config(c, 0)
                .validate()
                .map_err(|e| Error::config(format!("setting {:?}: {e}", c.name)))?;
        }
        Ok(())
    }
}

/// Train/test split for one trial.
pub enum TrialData {
    Classification {
        train: TrainingSet,
        test: ClassificationSet,
    },
    Detection {
        train: TrainingSet,
        test: DetectionSet,
    },
}

impl TrialData {
    pub fn generate(task: &SyntheticTaskConfig, train_seed: u64, test_seed: u64) -> Result<Self> {
        Ok(match task.mode {
            TaskMode::Classification => TrialData::Classification {
                train: gen_classification(&task.with_seed(train_seed))?.to_training_set(),
                test: gen_classification(&task.with_seed(test_seed))?,
            },
            TaskMode::ToyDetection => TrialData::Detection {
                train: gen_toy_detection(&task.with_seed(train_seed))?.to_training_set(),
                test: gen_toy_detection(&task.with_seed(test_seed))?,
            },
        })
    }

    pub fn train_set(&self) -> &TrainingSet {
        match self {
            TrialData::Classification { train, .. } | TrialData::Detection { train, .. } => train,
        }
    }

    /// Held-out metrics. Classification thresholds the probability at 0.5.
    pub fn evaluate(&self, head: &DenseHead, inference: &InferenceConfig) -> Result<Metrics> {
        match self {
            TrialData::Classification { test, .. } => {
                let logits = classify(head, &test.features)?;
                classification_metrics(&logits, &test.labels, 0.0)
            }
            TrialData::Detection { test, .. } => {
                let mut dets = Vec::with_capacity(test.images.len());
                let mut gts = Vec::with_capacity(test.images.len());
                for im in &test.images {
                    dets.push(detect(head, &im.features, &test.anchors, inference)?);
                    gts.push(
                        im.objects
                            .iter()
                            .map(|o| (o.bbox, o.class_id))
                            .collect::<Vec<_>>(),
                    );
                }
                detection_metrics(&dets, &gts, 0.5, 0.5)
            }
        }
    }
}

/// Seeds of trial `trial`: shared train and test data seeds, plus the
/// initialisation seed of the cell identified by `cell_key`.
pub fn trial_seeds(base: u64, cell_key: u64, trial: usize) -> (u64, u64, u64) {
    let t = trial as u64;
    (
        derive_seed(&[base, t, 0]),
        derive_seed(&[base, t, 1]),
        derive_seed(&[base, t, 2, cell_key]),
    )
}

/// Content hash of a cell, so its seeds do not move when cells are reordered.
pub fn cell_key(setting: &Setting) -> Result<u64> {
    Ok(seed_from_bytes(serde_json::to_string(setting)?.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub final_loss: f64,
    /// `None` when training diverged.
    pub metrics: Option<Metrics>,
    pub divergence: Option<Divergence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub setting: Setting,
    /// Means over trials; a diverged trial counts as all-zero metrics.
    pub mean: Metrics,
    pub diverged: usize,
    pub trials: Vec<TrialResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub config: SweepConfig,
    pub cells: Vec<CellSummary>,
}

impl ExperimentReport {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// One row per (cell, trial).
    pub fn trials_csv(&self) -> Result<CsvTable> {
        let mut t = CsvTable::new(&[
            "setting",
            "trial",
            "seed",
            "diverged",
            "divergence_iteration",
            "final_loss",
            "precision",
            "recall",
            "f1",
            "average_precision",
        ]);
        for c in &self.cells {
            for r in &c.trials {
                let m = r.metrics.unwrap_or_default();
                t.push(vec![
                    c.name.clone(),
                    r.trial.to_string(),
                    r.seed.to_string(),
                    r.divergence.is_some().to_string(),
                    r.divergence
                        .map_or(String::new(), |d| d.iteration.to_string()),
                    fmt_f64(r.final_loss),
                    fmt_f64(m.precision),
                    fmt_f64(m.recall),
                    fmt_f64(m.f1),
                    fmt_f64(m.average_precision),
                ])?;
            }
        }
        Ok(t)
    }

    /// One row per cell with trial means.
    pub fn summary_csv(&self) -> Result<CsvTable> {
        let mut t = CsvTable::new(&[
            "setting",
            "trials",
            "diverged",
            "precision",
            "recall",
            "f1",
            "average_precision",
        ]);
        for c in &self.cells {
            t.push(vec![
                c.name.clone(),
                c.trials.len().to_string(),
                c.diverged.to_string(),
                fmt_f64(c.mean.precision),
                fmt_f64(c.mean.recall),
                fmt_f64(c.mean.f1),
                fmt_f64(c.mean.average_precision),
            ])?;
        }
        Ok(t)
    }
}

/// Outcome of one training run with its held-out metrics.
pub struct RunResult {
    pub head: DenseHead,
    pub history: Vec<HistoryEntry>,
    pub metrics: Option<Metrics>,
    pub divergence: Option<Divergence>,
}

pub fn run_one(
    cfg: &TrainConfig,
    data: &TrialData,
    inference: &InferenceConfig,
) -> Result<RunResult> {
    let out = train(cfg, data.train_set())?;
    let metrics = if out.diverged() {
        None
    } else {
        Some(data.evaluate(&out.head, inference)?)
    };
    Ok(RunResult {
        head: out.head,
        history: out.history,
        metrics,
        divergence: out.divergence,
    })
}

/// Trains every (cell, trial) pair on up to `jobs` threads. The report does
/// not depend on `jobs`.
pub fn sweep(cfg: &SweepConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cells = cfg.cells();
    let keys: Vec<u64> = cells.iter().map(cell_key).collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let data: Vec<TrialData> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let (train_seed, test_seed, _) = trial_seeds(cfg.seed, 0, t);
                TrialData::generate(&cfg.task, train_seed, test_seed)
            })
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, usize)> = (0..cells.len())
            .flat_map(|c| (0..cfg.trials).map(move |t| (c, t)))
            .collect();
        let results: Vec<TrialResult> = jobs
            .par_iter()
            .map(|&(c, t)| {
                let (_, _, seed) = trial_seeds(cfg.seed, keys[c], t);
                let tc = cfg.training.train_config(&cells[c], seed);
                let r = run_one(&tc, &data[t], &cfg.inference)?;
                Ok(TrialResult {
                    trial: t,
                    seed,
                    final_loss: r.history.last().map_or(f64::NAN, |h| h.loss),
                    metrics: r.metrics,
                    divergence: r.divergence,
                })
            })
            .collect::<Result<_>>()?;
        let mut it = results.into_iter();
        let summaries = cells
            .into_iter()
            .map(|setting| {
                let trials: Vec<TrialResult> = it.by_ref().take(cfg.trials).collect();
                let n = trials.len() as f64;
                let ms: Vec<Metrics> = trials
                    .iter()
                    .map(|r| r.metrics.unwrap_or_default())
                    .collect();
                let mean = Metrics {
                    precision: ms.iter().map(|m| m.precision).sum::<f64>() / n,
                    recall: ms.iter().map(|m| m.recall).sum::<f64>() / n,
                    f1: ms.iter().map(|m| m.f1).sum::<f64>() / n,
                    average_precision: ms.iter().map(|m| m.average_precision).sum::<f64>() / n,
                };
                CellSummary {
                    name: setting.name.clone(),
                    diverged: trials.iter().filter(|r| r.divergence.is_some()).count(),
                    setting,
                    mean,
                    trials,
                }
            })
            .collect();
        Ok(ExperimentReport {
            schema: REPORT_SCHEMA.to_string(),
            config: cfg.clone(),
            cells: summaries,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SweepConfig {
        let task = SyntheticTaskConfig {
            num_positives: 5,
            imbalance_ratio: 20.0,
            ..Default::default()
        };
        let training = TrainingDefaults {
            iterations: 20,
            ..Default::default()
        };
        SweepConfig::new(task, training, vec![Setting::new(LossConfig::ce())], 2, 3)
    }

    #[test]
    fn grids_expand_in_order() {
        let g = Grid::Focal {
            gammas: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            alphas: vec![0.25, 0.5, 0.75],
        };
        let cells = g.expand();
        assert_eq!(cells.len(), 15);
        assert_eq!(cells[1].loss, LossConfig::focal(0.0, Some(0.5)));
        let o = Grid::Ohem {
            loss: LossConfig::ce(),
            batch_sizes: vec![128, 256],
            nms_thresholds: vec![Some(0.5), Some(0.7)],
            ratio: vec![false, true],
        };
        assert_eq!(o.expand().len(), 8);
    }

    #[test]
    fn unbalanced_focal_at_gamma_zero_matches_ce() {
        let cfg = tiny();
        let data = TrialData::generate(&cfg.task, 1, 2).unwrap();
        let ce = cfg
            .training
            .train_config(&Setting::new(LossConfig::ce()), 9);
        let fl = cfg
            .training
            .train_config(&Setting::new(LossConfig::focal(0.0, None)), 9);
        let a = run_one(&ce, &data, &cfg.inference).unwrap();
        let b = run_one(&fl, &data, &cfg.inference).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.head, b.head);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn cell_seeds_follow_content_not_position() {
        let mut cfg = tiny();
        cfg.settings
            .push(Setting::new(LossConfig::focal(2.0, Some(0.25))));
        let a = sweep(&cfg, 1).unwrap();
        cfg.settings.reverse();
        let b = sweep(&cfg, 1).unwrap();
        assert_eq!(a.cells[0].trials, b.cells[1].trials);
        assert_eq!(a.cells[1].trials, b.cells[0].trials);
    }

    #[test]
    fn report_is_independent_of_jobs() {
        let mut cfg = tiny();
        cfg.settings
            .push(Setting::new(LossConfig::focal(2.0, Some(0.25))));
        let a = sweep(&cfg, 1).unwrap();
        let b = sweep(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.trials_csv().unwrap().to_string().unwrap(),
            b.trials_csv().unwrap().to_string().unwrap()
        );
    }

    #[test]
    fn schema_and_unknown_keys_are_checked() {
        let mut cfg = tiny();
        cfg.schema = "other/9".into();
        assert!(cfg.validate().is_err());
        let bad = r#"{"schema":"densefocus.sweep/1","settings":[],"trails":3}"#;
        assert!(serde_json::from_str::<SweepConfig>(bad).is_err());
    }
}
