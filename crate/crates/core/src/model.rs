//! A tiny dense head with hand-written backprop and a momentum-SGD trainer.
//!
//! The head has two branches with separate parameters: a classifier emitting
//! `K` logits per anchor and a class-agnostic regressor emitting 4 box
//! offsets per anchor. Each branch is either a single affine map or one
//! ReLU hidden layer followed by an affine map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLabel, MatchAssignment};
use crate::error::{Error, Result};
use crate::geometry::{smooth_l1, smooth_l1_grad, BBox};
use crate::loss::{check_class_ids, foreground_normalizer, per_anchor_loss_and_grad, LossConfig};
use crate::numeric::pairwise_sum;
use crate::sampler::{ohem_select, OhemConfig};

/// Standard deviation of the Gaussian weight fill.
pub const INIT_STD: f64 = 0.01;
/// Losses above this count as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;
pub const HEAD_FORMAT: &str = "densefocus-head";
pub const HEAD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Linear,
    OneHidden { hidden: usize },
}

/// Row-major `rows x cols` matrix of per-anchor features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                what: "feature data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Affine map `y = W x + b` with `W` stored row-major (`out_dim x in_dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn gaussian(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let weight = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates `dW += g x^T`, `db += g`.
    #[inline]
    fn accumulate(&mut self, g: &[f64], x: &[f64]) {
        for (row, (gb, &gi)) in self
            .weight
            .chunks_exact_mut(self.in_dim)
            .zip(self.bias.iter_mut().zip(g))
        {
            if gi == 0.0 {
                continue;
            }
            *gb += gi;
            for (w, v) in row.iter_mut().zip(x) {
                *w += gi * v;
            }
        }
    }

    /// `dx = W^T g`.
    #[inline]
    fn backprop_input(&self, g: &[f64], dx: &mut [f64]) {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (row, &gi) in self.weight.chunks_exact(self.in_dim).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (d, w) in dx.iter_mut().zip(row) {
                *d += gi * w;
            }
        }
    }

    fn check(&self) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::input(
                "dense layer parameter shapes do not match its dimensions",
            ));
        }
        if !self.weight.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::input("non-finite parameter"));
        }
        Ok(())
    }
}

/// One output branch: optional ReLU hidden layer, then an affine output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

struct BranchScratch {
    pre: Vec<f64>,
    act: Vec<f64>,
    dact: Vec<f64>,
}

impl Branch {
    fn scratch(&self) -> BranchScratch {
        let h = self.hidden.as_ref().map_or(0, |d| d.out_dim);
        BranchScratch {
            pre: vec![0.0; h],
            act: vec![0.0; h],
            dact: vec![0.0; h],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], s: &mut BranchScratch, out: &mut [f64]) {
        match &self.hidden {
            None => self.output.forward(x, out),
            Some(h) => {
                h.forward(x, &mut s.pre);
                for (a, p) in s.act.iter_mut().zip(&s.pre) {
                    *a = p.max(0.0);
                }
                self.output.forward(&s.act, out);
            }
        }
    }

    /// Backprop of `g = dL/d out` for one row whose forward pass left `s` filled.
    #[inline]
    fn backward(&self, x: &[f64], g: &[f64], s: &mut BranchScratch, grad: &mut Branch) {
        match (&self.hidden, &mut grad.hidden) {
            (None, _) => grad.output.accumulate(g, x),
            (Some(_), Some(gh)) => {
                grad.output.accumulate(g, &s.act);
                self.output.backprop_input(g, &mut s.dact);
                for (d, p) in s.dact.iter_mut().zip(&s.pre) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
                gh.accumulate(&s.dact, x);
            }
            (Some(_), None) => unreachable!("gradient branch mirrors the head"),
        }
    }

    fn zeros_like(&self) -> Branch {
        Branch {
            hidden: self
                .hidden
                .as_ref()
                .map(|h| Dense::zeros(h.in_dim, h.out_dim)),
            output: Dense::zeros(self.output.in_dim, self.output.out_dim),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseHead {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub classifier: Branch,
    pub regressor: Branch,
}

/// Output of [`forward`]: `logits` is `N x K`, `boxes` holds `(tx, ty, tw, th)` per anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

/// Classification bias giving every anchor foreground probability `pi`.
pub fn prior_bias(pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::config(format!(
            "prior pi must lie in (0, 1), got {pi}"
        )));
    }
    Ok(-((1.0 - pi) / pi).ln())
}

/// Gaussian(0, 0.01) weights, zero biases, and the prior bias on the final
/// classification layer.
pub fn init_head(
    input_dim: usize,
    num_classes: usize,
    architecture: Architecture,
    pi: f64,
    seed: u64,
) -> Result<DenseHead> {
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::config(
            "feature dimension and class count must be >= 1",
        ));
    }
    let bias = prior_bias(pi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branch = |out_dim: usize, rng: &mut ChaCha8Rng| -> Result<Branch> {
        Ok(match architecture {
            Architecture::Linear => Branch {
                hidden: None,
                output: Dense::gaussian(input_dim, out_dim, rng),
            },
            Architecture::OneHidden { hidden } => {
                if hidden == 0 {
                    return Err(Error::config("hidden width must be >= 1"));
                }
                Branch {
                    hidden: Some(Dense::gaussian(input_dim, hidden, rng)),
                    output: Dense::gaussian(hidden, out_dim, rng),
                }
            }
        })
    };
    let mut classifier = branch(num_classes, &mut rng)?;
    let regressor = branch(4, &mut rng)?;
    classifier.output.bias.iter_mut().for_each(|b| *b = bias);
    Ok(DenseHead {
        architecture,
        input_dim,
        num_classes,
        classifier,
        regressor,
    })
}

impl DenseHead {
    pub fn zeros_like(&self) -> DenseHead {
        DenseHead {
            architecture: self.architecture,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            classifier: self.classifier.zeros_like(),
            regressor: self.regressor.zeros_like(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.classifier.layers().chain(self.regressor.layers())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.classifier
            .layers_mut()
            .chain(self.regressor.layers_mut())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    /// All parameters in a fixed order: per layer, weights then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for d in self.layers() {
            out.extend_from_slice(&d.weight);
            out.extend_from_slice(&d.bias);
        }
        out
    }

    /// Inverse of [`DenseHead::flatten`].
    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if params.len() != n {
            return Err(Error::ShapeMismatch {
                what: "flat parameters",
                expected: n,
                got: params.len(),
            });
        }
        let mut at = 0;
        for d in self.layers_mut() {
            let w = d.weight.len();
            d.weight.copy_from_slice(&params[at..at + w]);
            at += w;
            let b = d.bias.len();
            d.bias.copy_from_slice(&params[at..at + b]);
            at += b;
        }
        Ok(())
    }

    /// `true` for every bias entry of [`DenseHead::flatten`].
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for d in self.layers() {
            out.extend(std::iter::repeat_n(false, d.weight.len()));
            out.extend(std::iter::repeat_n(true, d.bias.len()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for d in self.layers() {
            d.check()?;
        }
        let expect_out = |b: &Branch, out: usize| -> bool {
            let first_in = b.hidden.as_ref().map_or(b.output.in_dim, |h| h.in_dim);
            let chained = b
                .hidden
                .as_ref()
                .is_none_or(|h| h.out_dim == b.output.in_dim);
            first_in == self.input_dim && chained && b.output.out_dim == out
        };
        let arch_ok = |b: &Branch| match self.architecture {
            Architecture::Linear => b.hidden.is_none(),
            Architecture::OneHidden { hidden } => {
                b.hidden.as_ref().is_some_and(|h| h.out_dim == hidden)
            }
        };
        if !expect_out(&self.classifier, self.num_classes)
            || !expect_out(&self.regressor, 4)
            || !arch_ok(&self.classifier)
            || !arch_ok(&self.regressor)
        {
            return Err(Error::input(
                "head layer shapes are inconsistent with its architecture",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = HeadDocument {
            format: HEAD_FORMAT.to_string(),
            version: HEAD_VERSION,
            head: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: HeadDocument = serde_json::from_str(s)?;
        if doc.format != HEAD_FORMAT || doc.version != HEAD_VERSION {
            return Err(Error::config(format!(
                "unsupported head document {} v{} (expected {HEAD_FORMAT} v{HEAD_VERSION})",
                doc.format, doc.version
            )));
        }
        doc.head.validate()?;
        Ok(doc.head)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDocument {
    format: String,
    version: u32,
    head: DenseHead,
}

fn check_features(head: &DenseHead, features: &FeatureMatrix) -> Result<()> {
    if features.cols != head.input_dim {
        return Err(Error::ShapeMismatch {
            what: "feature dimension",
            expected: head.input_dim,
            got: features.cols,
        });
    }
    if features.data.len() != features.rows * features.cols {
        return Err(Error::ShapeMismatch {
            what: "feature data",
            expected: features.rows * features.cols,
            got: features.data.len(),
        });
    }
    Ok(())
}

pub fn forward(head: &DenseHead, features: &FeatureMatrix) -> Result<HeadOutput> {
    check_features(head, features)?;
    let k = head.num_classes;
    let mut logits = vec![0.0; features.rows * k];
    let mut boxes = vec![[0.0; 4]; features.rows];
    let mut cs = head.classifier.scratch();
    let mut rs = head.regressor.scratch();
    for i in 0..features.rows {
        let x = features.row(i);
        head.classifier
            .forward(x, &mut cs, &mut logits[i * k..(i + 1) * k]);
        head.regressor.forward(x, &mut rs, &mut boxes[i]);
    }
    Ok(HeadOutput { logits, boxes })
}

/// Classification logits only.
pub fn classify(head: &DenseHead, features: &FeatureMatrix) -> Result<Vec<f64>> {
    check_features(head, features)?;
    let k = head.num_classes;
    let mut logits = vec![0.0; features.rows * k];
    let mut cs = head.classifier.scratch();
    for i in 0..features.rows {
        head.classifier
            .forward(features.row(i), &mut cs, &mut logits[i * k..(i + 1) * k]);
    }
    Ok(logits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
}

/// Total loss and its gradient with respect to every head parameter.
///
/// Classification uses `loss_cfg` over all non-ignored anchor-class pairs;
/// regression is smooth-L1 on the 4 offsets of foreground anchors. Both are
/// divided by the foreground count. `mask` restricts both terms to the
/// selected anchors without changing the divisor.
pub fn loss_and_gradient(
    head: &DenseHead,
    features: &FeatureMatrix,
    assignment: &MatchAssignment,
    loss_cfg: &LossConfig,
    mask: Option<&[bool]>,
    with_regression: bool,
) -> Result<(LossBreakdown, DenseHead)> {
    loss_cfg.validate()?;
    check_features(head, features)?;
    if assignment.len() != features.rows {
        return Err(Error::ShapeMismatch {
            what: "assignment",
            expected: features.rows,
            got: assignment.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != features.rows {
            return Err(Error::ShapeMismatch {
                what: "mask",
                expected: features.rows,
                got: m.len(),
            });
        }
    }
    check_class_ids(assignment, head.num_classes)?;
    let k = head.num_classes;
    let norm = foreground_normalizer(assignment);
    let logits = classify(head, features)?;
    let (per_anchor, mut dlogits) =
        per_anchor_loss_and_grad(&logits, k, assignment, loss_cfg, mask);
    let classification = pairwise_sum(&per_anchor) / norm;
    dlogits.iter_mut().for_each(|g| *g /= norm);

    let mut grad = head.zeros_like();
    let mut cs = head.classifier.scratch();
    let mut out = vec![0.0; k];
    for i in 0..features.rows {
        let g = &dlogits[i * k..(i + 1) * k];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let x = features.row(i);
        head.classifier.forward(x, &mut cs, &mut out);
        head.classifier
            .backward(x, g, &mut cs, &mut grad.classifier);
    }

    let mut reg_terms = Vec::new();
    if with_regression {
        let mut rs = head.regressor.scratch();
        let mut pred = [0.0; 4];
        let mut g = [0.0; 4];
        for (i, label) in assignment.labels.iter().enumerate() {
            let AnchorLabel::Foreground { target, .. } = label else {
                continue;
            };
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let x = features.row(i);
            head.regressor.forward(x, &mut rs, &mut pred);
            let t = target.to_array();
            let mut term = 0.0;
            for c in 0..4 {
                let d = pred[c] - t[c];
                term += smooth_l1(d);
                g[c] = smooth_l1_grad(d) / norm;
            }
            reg_terms.push(term);
            head.regressor.backward(x, &g, &mut rs, &mut grad.regressor);
        }
    }
    let regression = pairwise_sum(&reg_terms) / norm;
    Ok((
        LossBreakdown {
            classification,
            regression,
            total: classification + regression,
        },
        grad,
    ))
}

/// Which anchors contribute to each training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    #[default]
    AllAnchors,
    Ohem(OhemConfig),
}

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_drops() -> Vec<f64> {
    vec![2.0 / 3.0, 8.0 / 9.0]
}
fn default_pi() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub iterations: usize,
    /// Fractions of `iterations` at which the learning rate is divided by 10.
    #[serde(default = "default_drops")]
    pub lr_drop_points: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pi")]
    pub pi: f64,
    pub loss: LossConfig,
    #[serde(default)]
    pub sampler: Sampler,
    pub architecture: Architecture,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, iterations: usize) -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            iterations,
            lr_drop_points: default_drops(),
            seed: 0,
            pi: default_pi(),
            loss,
            sampler: Sampler::AllAnchors,
            architecture: Architecture::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        prior_bias(self.pi)?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if self.lr_drop_points.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("lr_drop_points must be fractions in [0, 1]"));
        }
        if let Sampler::Ohem(o) = &self.sampler {
            o.validate()?;
        }
        Ok(())
    }

    /// Learning rate at `iteration`: divided by 10 at every drop point passed.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self
            .lr_drop_points
            .iter()
            .filter(|&&f| iteration >= (f * self.iterations as f64).round() as usize)
            .count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }
}

/// Momentum SGD: `v <- mu v + g + lambda w` (weights only), `w <- w - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<f64>,
    decay_mask: Vec<bool>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(head: &DenseHead, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: vec![0.0; head.num_parameters()],
            decay_mask: head.bias_mask().into_iter().map(|b| !b).collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, head: &mut DenseHead, grad: &DenseHead, lr: f64) -> Result<()> {
        let mut w = head.flatten();
        let g = grad.flatten();
        if w.len() != self.velocity.len() || g.len() != w.len() {
            return Err(Error::ShapeMismatch {
                what: "gradient",
                expected: self.velocity.len(),
                got: g.len(),
            });
        }
        for i in 0..w.len() {
            let decay = if self.decay_mask[i] {
                self.weight_decay * w[i]
            } else {
                0.0
            };
            self.velocity[i] = self.momentum * self.velocity[i] + g[i] + decay;
            w[i] -= lr * self.velocity[i];
        }
        head.set_flat(&w)
    }
}

/// Per-image training input: features, assignment, and (for OHEM's nms) anchor boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub features: FeatureMatrix,
    pub assignment: MatchAssignment,
    pub boxes: Option<Vec<BBox>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples: Vec<TrainingSample>,
    /// Whether the box-regression loss is part of the objective.
    pub regression: bool,
}

impl TrainingSet {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        for s in &self.samples {
            if s.features.cols != self.feature_dim {
                return Err(Error::ShapeMismatch {
                    what: "feature dimension",
                    expected: self.feature_dim,
                    got: s.features.cols,
                });
            }
            if s.assignment.len() != s.features.rows {
                return Err(Error::ShapeMismatch {
                    what: "assignment",
                    expected: s.features.rows,
                    got: s.assignment.len(),
                });
            }
            check_class_ids(&s.assignment, self.num_classes)?;
            if let Some(b) = &s.boxes {
                if b.len() != s.features.rows {
                    return Err(Error::ShapeMismatch {
                        what: "anchor boxes",
                        expected: s.features.rows,
                        got: b.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Mask of anchors picked by OHEM for one step.
pub fn ohem_mask(
    head: &DenseHead,
    sample: &TrainingSample,
    loss_cfg: &LossConfig,
    ohem: &OhemConfig,
) -> Result<Vec<bool>> {
    let logits = classify(head, &sample.features)?;
    let (per_anchor, _) = per_anchor_loss_and_grad(
        &logits,
        head.num_classes,
        &sample.assignment,
        loss_cfg,
        None,
    );
    let candidates: Vec<usize> = (0..sample.assignment.len())
        .filter(|&i| !matches!(sample.assignment.labels[i], AnchorLabel::Ignore))
        .collect();
    let losses: Vec<f64> = candidates.iter().map(|&i| per_anchor[i]).collect();
    let positives: Vec<bool> = candidates
        .iter()
        .map(|&i| sample.assignment.labels[i].is_foreground())
        .collect();
    let boxes: Option<Vec<BBox>> = sample
        .boxes
        .as_ref()
        .map(|b| candidates.iter().map(|&i| b[i]).collect());
    let picked = ohem_select(&losses, boxes.as_deref(), &positives, ohem)?;
    let mut mask = vec![false; sample.assignment.len()];
    for p in picked {
        mask[candidates[p]] = true;
    }
    Ok(mask)
}

/// One optimisation step on one sample. Returns the loss before the update.
///
/// Fails with [`Error::Diverged`] (leaving `head` untouched) when the loss is
/// not finite or exceeds [`DIVERGENCE_LOSS`].
pub fn backward_step(
    head: &mut DenseHead,
    opt: &mut Sgd,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    iteration: usize,
    with_regression: bool,
) -> Result<f64> {
    let mask = match &cfg.sampler {
        Sampler::AllAnchors => None,
        Sampler::Ohem(o) => Some(ohem_mask(head, sample, &cfg.loss, o)?),
    };
    let (loss, grad) = loss_and_gradient(
        head,
        &sample.features,
        &sample.assignment,
        &cfg.loss,
        mask.as_deref(),
        with_regression,
    )?;
    let total = loss.total;
    let grads_finite = grad.flatten().iter().all(|g| g.is_finite());
    if !total.is_finite() || total > DIVERGENCE_LOSS || !grads_finite {
        return Err(Error::Diverged {
            iteration,
            loss: total,
        });
    }
    opt.step(head, &grad, cfg.lr_at(iteration))?;
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: DenseHead,
    pub history: Vec<HistoryEntry>,
    pub divergence: Option<Divergence>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Trains a freshly initialised head, cycling through the samples in order.
///
/// Divergence stops training and is reported in the outcome rather than as an error.
pub fn train(cfg: &TrainConfig, data: &TrainingSet) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let mut head = init_head(
        data.feature_dim,
        data.num_classes,
        cfg.architecture,
        cfg.pi,
        cfg.seed,
    )?;
    let mut opt = Sgd::new(&head, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let sample = &data.samples[it % data.samples.len()];
        match backward_step(&mut head, &mut opt, sample, cfg, it, data.regression) {
            Ok(loss) => history.push(HistoryEntry {
                iteration: it,
                loss,
                lr: cfg.lr_at(it),
            }),
            Err(Error::Diverged { iteration, loss }) => {
                history.push(HistoryEntry {
                    iteration: it,
                    loss,
                    lr: cfg.lr_at(it),
                });
                return Ok(TrainOutcome {
                    head,
                    history,
                    divergence: Some(Divergence { iteration, loss }),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        head,
        history,
        divergence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RegressionTarget;
    use crate::loss::{loss_value, BinaryLabel};

    fn fg(target: RegressionTarget) -> AnchorLabel {
        AnchorLabel::Foreground {
            gt_index: 0,
            class_id: 0,
            target,
        }
    }

    #[test]
    fn prior_bias_values() {
        assert!((prior_bias(0.01).unwrap() - -4.595_119_850_134_59).abs() < 1e-12);
        assert_eq!(prior_bias(0.5).unwrap(), 0.0);
        assert!(prior_bias(0.0).is_err());
        assert!(prior_bias(1.0).is_err());
    }

    #[test]
    fn zero_features_give_prior_probability() {
        let head = init_head(5, 2, Architecture::Linear, 0.01, 3).unwrap();
        let logits = classify(&head, &FeatureMatrix::zeros(4, 5)).unwrap();
        for l in logits {
            assert!((crate::loss::stable_sigmoid(l).unwrap() - 0.01).abs() < 1e-15);
        }
        assert!(init_head(0, 1, Architecture::Linear, 0.01, 0).is_err());
        assert!(init_head(2, 1, Architecture::OneHidden { hidden: 0 }, 0.01, 0).is_err());
    }

    #[test]
    fn init_fills_gaussian_weights_and_zero_biases() {
        let head = init_head(50, 1, Architecture::OneHidden { hidden: 40 }, 0.01, 9).unwrap();
        let h = head.classifier.hidden.as_ref().unwrap();
        let n = h.weight.len() as f64;
        let mean = h.weight.iter().sum::<f64>() / n;
        let std = (h.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3 && (std - INIT_STD).abs() < 1e-3);
        assert!(h.bias.iter().all(|b| *b == 0.0));
        assert!(head.regressor.output.bias.iter().all(|b| *b == 0.0));
        assert_ne!(head.classifier.output.bias[0], 0.0);
    }

    #[test]
    fn forward_examples() {
        let mut head = init_head(1, 1, Architecture::Linear, 0.5, 0).unwrap();
        head.classifier.output.weight = vec![0.0];
        head.classifier.output.bias = vec![1.5];
        let f = FeatureMatrix::new(2, 1, vec![3.0, -7.0]).unwrap();
        assert_eq!(forward(&head, &f).unwrap().logits, vec![1.5, 1.5]);
        head.classifier.output.weight = vec![2.0];
        assert_eq!(forward(&head, &f).unwrap().logits, vec![7.5, -12.5]);

        // negative pre-activations are zeroed, leaving the output bias
        let mut deep = init_head(2, 1, Architecture::OneHidden { hidden: 3 }, 0.5, 0).unwrap();
        let c = &mut deep.classifier;
        c.hidden.as_mut().unwrap().weight = vec![1.0, 1.0, 2.0, 0.5, -1.0, 3.0];
        c.hidden.as_mut().unwrap().bias = vec![-10.0, -10.0, -10.0];
        c.output.weight = vec![4.0, 5.0, 6.0];
        c.output.bias = vec![0.25];
        let f = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(forward(&deep, &f).unwrap().logits, vec![0.25]);

        assert!(forward(&head, &FeatureMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_head_unchanged() {
        let mut cfg = TrainConfig::new(LossConfig::focal(2.0, Some(0.25)), 1);
        cfg.learning_rate = 0.0;
        let mut head = init_head(2, 1, Architecture::OneHidden { hidden: 3 }, 0.01, 1).unwrap();
        let before = head.clone();
        let sample = TrainingSample {
            features: FeatureMatrix::new(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            assignment: MatchAssignment::from_labels(vec![
                fg(RegressionTarget::zero()),
                AnchorLabel::Background,
            ]),
            boxes: None,
        };
        let mut opt = Sgd::new(&head, 0.9, 1e-4);
        let loss = backward_step(&mut head, &mut opt, &sample, &cfg, 0, true).unwrap();
        assert!(loss > 0.0);
        assert_eq!(head, before);
    }

    #[test]
    fn single_parameter_step_matches_hand_computation() {
        // one anchor, one class, features x = 2, logit = w x + b, CE, no regression
        let mut head = init_head(1, 1, Architecture::Linear, 0.5, 0).unwrap();
        head.classifier.output.weight = vec![0.3];
        head.classifier.output.bias = vec![-0.1];
        let sample = TrainingSample {
            features: FeatureMatrix::new(1, 1, vec![2.0]).unwrap(),
            assignment: MatchAssignment::from_labels(vec![fg(RegressionTarget::zero())]),
            boxes: None,
        };
        let mut cfg = TrainConfig::new(LossConfig::ce(), 10);
        cfg.learning_rate = 0.1;
        cfg.momentum = 0.9;
        cfg.weight_decay = 0.01;
        let mut opt = Sgd::new(&head, cfg.momentum, cfg.weight_decay);

        let (w, b, x, lr, wd) = (0.3f64, -0.1f64, 2.0f64, 0.1, 0.01);
        let z = w * x + b;
        let p = 1.0 / (1.0 + (-z).exp());
        let dz = p - 1.0;
        let w1 = w - lr * (dz * x + wd * w);
        let b1 = b - lr * dz;
        let loss = backward_step(&mut head, &mut opt, &sample, &cfg, 0, false).unwrap();
        assert!(
            (loss - loss_value(z, BinaryLabel::Positive, &LossConfig::ce()).unwrap()).abs() < 1e-12
        );
        assert!((head.classifier.output.weight[0] - w1).abs() < 1e-9);
        assert!((head.classifier.output.bias[0] - b1).abs() < 1e-9);

        // second step carries momentum
        let z1 = w1 * x + b1;
        let dz1 = 1.0 / (1.0 + (-z1).exp()) - 1.0;
        let vw = 0.9 * (dz * x + wd * w) + dz1 * x + wd * w1;
        let vb = 0.9 * dz + dz1;
        backward_step(&mut head, &mut opt, &sample, &cfg, 1, false).unwrap();
        assert!((head.classifier.output.weight[0] - (w1 - lr * vw)).abs() < 1e-9);
        assert!((head.classifier.output.bias[0] - (b1 - lr * vb)).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::new(LossConfig::ce(), 90);
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(59), 0.01);
        assert!((cfg.lr_at(60) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(80) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_reported() {
        let mut head = init_head(1, 1, Architecture::Linear, 0.5, 0).unwrap();
        head.classifier.output.weight = vec![1e5];
        let sample = TrainingSample {
            features: FeatureMatrix::new(2, 1, vec![100.0, 100.0]).unwrap(),
            assignment: MatchAssignment::from_labels(vec![AnchorLabel::Background; 2]),
            boxes: None,
        };
        let cfg = TrainConfig::new(LossConfig::ce(), 1);
        let mut opt = Sgd::new(&head, 0.9, 0.0);
        let err = backward_step(&mut head, &mut opt, &sample, &cfg, 7, false).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 7, .. }));
    }

    #[test]
    fn json_round_trip() {
        let head = init_head(3, 2, Architecture::OneHidden { hidden: 4 }, 0.01, 5).unwrap();
        let s = head.to_json().unwrap();
        assert_eq!(DenseHead::from_json(&s).unwrap(), head);
        let wrong = s.replace("\"version\": 1", "\"version\": 9");
        assert!(DenseHead::from_json(&wrong).is_err());
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let head = init_head(1, 1, Architecture::Linear, 0.01, 0).unwrap();
        let bad = AnchorLabel::Foreground {
            gt_index: 0,
            class_id: 1,
            target: RegressionTarget::zero(),
        };
        let a = MatchAssignment::from_labels(vec![bad]);
        let f = FeatureMatrix::zeros(1, 1);
        assert!(loss_and_gradient(&head, &f, &a, &LossConfig::ce(), None, false).is_err());
        let set = TrainingSet {
            num_classes: 1,
            feature_dim: 1,
            samples: vec![TrainingSample {
                features: f,
                assignment: a,
                boxes: None,
            }],
            regression: false,
        };
        assert!(set.validate().is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let head = init_head(3, 2, Architecture::OneHidden { hidden: 4 }, 0.01, 5).unwrap();
        let flat = head.flatten();
        assert_eq!(flat.len(), head.num_parameters());
        let mut other = head.zeros_like();
        other.set_flat(&flat).unwrap();
        assert_eq!(other, head);
        assert_eq!(
            head.bias_mask().iter().filter(|b| **b).count(),
            4 + 2 + 4 + 4
        );
    }
}
