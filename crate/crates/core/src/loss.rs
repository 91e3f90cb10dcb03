//! Cross entropy, focal loss and friends for one-vs-all sigmoid classifiers.
//!
//! Every loss is evaluated from the raw logit. With `x_t = y * x` the
//! quantities `log p_t = -softplus(-x_t)` and `1 - p_t = sigmoid(-x_t)` are
//! computed directly, so saturated logits never produce `0 * -inf`.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLabel, MatchAssignment};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// Clamp used only when a loss is evaluated from a probability rather than a logit.
pub const PROB_EPS: f64 = 1e-12;

/// Ground-truth class of a binary prediction, `y ∈ {+1, -1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Positive,
    Negative,
}

impl BinaryLabel {
    pub fn from_sign(y: i32) -> Result<Self> {
        match y {
            1 => Ok(BinaryLabel::Positive),
            -1 => Ok(BinaryLabel::Negative),
            other => Err(Error::input(format!(
                "binary label must be +1 or -1, got {other}"
            ))),
        }
    }

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            BinaryLabel::Positive => 1.0,
            BinaryLabel::Negative => -1.0,
        }
    }

    #[inline]
    pub fn is_positive(self) -> bool {
        self == BinaryLabel::Positive
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Plain cross entropy.
    Ce,
    /// Cross entropy with an alpha weight on the positive class.
    AlphaCe,
    /// Focal loss, optionally alpha-balanced.
    Fl,
    /// The shifted-sigmoid focal variant `-log(sigmoid(gamma * x_t + beta)) / gamma`.
    FlStar,
    /// Hinge on the probability margin `2 p_t - 1`.
    Hinge,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::AlphaCe => "alpha_ce",
            LossKind::Fl => "fl",
            LossKind::FlStar => "fl_star",
            LossKind::Hinge => "hinge",
        }
    }
}

/// Which loss to apply and its parameters.
///
/// `alpha = None` means unbalanced (`alpha_t = 1` for both classes).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: f64,
}

impl LossConfig {
    pub fn ce() -> Self {
        LossConfig {
            kind: LossKind::Ce,
            gamma: 0.0,
            alpha: None,
            beta: 0.0,
        }
    }

    pub fn alpha_ce(alpha: f64) -> Self {
        LossConfig {
            kind: LossKind::AlphaCe,
            gamma: 0.0,
            alpha: Some(alpha),
            beta: 0.0,
        }
    }

    pub fn focal(gamma: f64, alpha: Option<f64>) -> Self {
        LossConfig {
            kind: LossKind::Fl,
            gamma,
            alpha,
            beta: 0.0,
        }
    }

    pub fn focal_star(gamma: f64, beta: f64, alpha: Option<f64>) -> Self {
        LossConfig {
            kind: LossKind::FlStar,
            gamma,
            alpha,
            beta,
        }
    }

    pub fn hinge() -> Self {
        LossConfig {
            kind: LossKind::Hinge,
            gamma: 0.0,
            alpha: None,
            beta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::config(format!(
                "beta must be finite, got {}",
                self.beta
            )));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("alpha must lie in [0, 1], got {a}")));
            }
        }
        match self.kind {
            LossKind::Ce if self.alpha.is_some() => {
                Err(Error::config("ce takes no alpha; use alpha_ce"))
            }
            LossKind::AlphaCe if self.alpha.is_none() => {
                Err(Error::config("alpha_ce requires alpha"))
            }
            LossKind::FlStar if self.gamma <= 0.0 => {
                Err(Error::config("fl_star requires gamma > 0"))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    fn alpha_t(&self, label: BinaryLabel) -> f64 {
        match (self.alpha, label) {
            (None, _) => 1.0,
            (Some(a), BinaryLabel::Positive) => a,
            (Some(a), BinaryLabel::Negative) => 1.0 - a,
        }
    }

    /// Short human-readable tag, e.g. `fl(g=2,a=0.25)`.
    pub fn tag(&self) -> String {
        let alpha = match self.alpha {
            Some(a) => format!("a={a}"),
            None => "a=none".to_string(),
        };
        match self.kind {
            LossKind::Ce => "ce".to_string(),
            LossKind::AlphaCe => format!("alpha_ce({alpha})"),
            LossKind::Fl => format!("fl(g={},{alpha})", self.gamma),
            LossKind::FlStar => format!("fl_star(g={},b={},{alpha})", self.gamma, self.beta),
            LossKind::Hinge => format!("hinge({alpha})"),
        }
    }
}

/// `1 / (1 + e^-x)` without overflow for large `|x|`.
pub fn stable_sigmoid(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::input("sigmoid of NaN"));
    }
    Ok(sigmoid(x))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`, exact to rounding for all finite `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Probability of the ground-truth class.
pub fn p_t(p: f64, y: BinaryLabel) -> f64 {
    match y {
        BinaryLabel::Positive => p,
        BinaryLabel::Negative => 1.0 - p,
    }
}

fn check_logit(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!("logit must be finite, got {x}")))
    }
}

pub fn loss_value(x: f64, y: BinaryLabel, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check_logit(x)?;
    Ok(loss_and_grad_unchecked(x, y, cfg).0)
}

/// Derivative of [`loss_value`] with respect to the logit `x`.
pub fn loss_grad(x: f64, y: BinaryLabel, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check_logit(x)?;
    Ok(loss_and_grad_unchecked(x, y, cfg).1)
}

/// Loss and `d loss / d x` for a config that has already been validated.
#[inline]
pub(crate) fn loss_and_grad_unchecked(x: f64, y: BinaryLabel, cfg: &LossConfig) -> (f64, f64) {
    let s = y.sign();
    let xt = s * x;
    let at = cfg.alpha_t(y);
    match cfg.kind {
        LossKind::Ce | LossKind::AlphaCe => {
            // d/dx softplus(-y x) = -y sigmoid(-x_t) = y (p_t - 1)
            (at * softplus(-xt), -at * s * sigmoid(-xt))
        }
        LossKind::Fl => {
            let pt = sigmoid(xt);
            let q = sigmoid(-xt);
            let nll = softplus(-xt);
            let m = q.powf(cfg.gamma);
            let loss = at * m * nll;
            // y (1-p_t)^g (g p_t log p_t + p_t - 1)
            let grad = at * s * m * (-cfg.gamma * pt * nll - q);
            (loss, grad)
        }
        LossKind::FlStar => {
            let z = cfg.gamma * xt + cfg.beta;
            (at * softplus(-z) / cfg.gamma, -at * s * sigmoid(-z))
        }
        LossKind::Hinge => {
            let pt = sigmoid(xt);
            let q = sigmoid(-xt);
            let margin = pt - q;
            let slack = 1.0 - margin;
            if slack > 0.0 {
                // d margin / d x = 2 p_t (1 - p_t) y
                (at * slack, -at * 2.0 * pt * q * s)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Loss evaluated from a probability instead of a logit.
///
/// `p_t` is clamped to `[PROB_EPS, 1 - PROB_EPS]` so the result stays finite
/// at `p_t = 0`. Prefer [`loss_value`] whenever the logit is available.
pub fn loss_value_from_prob(p: f64, y: BinaryLabel, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::input(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    let pt = p_t(p, y).clamp(PROB_EPS, 1.0 - PROB_EPS);
    let at = cfg.alpha_t(y);
    let v = match cfg.kind {
        LossKind::Ce | LossKind::AlphaCe => -at * pt.ln(),
        LossKind::Fl => -at * (1.0 - pt).powf(cfg.gamma) * pt.ln(),
        LossKind::FlStar => {
            let xt = (pt / (1.0 - pt)).ln();
            at * softplus(-(cfg.gamma * xt + cfg.beta)) / cfg.gamma
        }
        LossKind::Hinge => at * (1.0 - (2.0 * pt - 1.0)).max(0.0),
    };
    Ok(v)
}

/// Binary target of class `class` for an anchor with the given label, or
/// `None` for ignored anchors.
#[inline]
pub(crate) fn class_target(label: &AnchorLabel, class: usize) -> Option<BinaryLabel> {
    match label {
        AnchorLabel::Foreground { class_id, .. } if *class_id == class => {
            Some(BinaryLabel::Positive)
        }
        AnchorLabel::Foreground { .. } | AnchorLabel::Background => Some(BinaryLabel::Negative),
        AnchorLabel::Ignore => None,
    }
}

pub(crate) fn check_class_ids(assignment: &MatchAssignment, num_classes: usize) -> Result<()> {
    match assignment.labels.iter().find_map(|l| match l {
        AnchorLabel::Foreground { class_id, .. } if *class_id >= num_classes => Some(*class_id),
        _ => None,
    }) {
        Some(bad) => Err(Error::input(format!(
            "class id {bad} out of range for {num_classes} classes"
        ))),
        None => Ok(()),
    }
}

fn check_batch_shape(
    logits: &[f64],
    num_classes: usize,
    assignment: &MatchAssignment,
) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::input("num_classes must be >= 1"));
    }
    let expected = assignment.len() * num_classes;
    if logits.len() != expected {
        return Err(Error::ShapeMismatch {
            what: "logits",
            expected,
            got: logits.len(),
        });
    }
    check_class_ids(assignment, num_classes)?;
    if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::input(format!("logit must be finite, got {x}")));
    }
    Ok(())
}

/// Per-anchor classification loss summed over classes, plus its gradient with
/// respect to every logit. Ignored anchors (and anchors outside `mask`) get 0.
pub(crate) fn per_anchor_loss_and_grad(
    logits: &[f64],
    num_classes: usize,
    assignment: &MatchAssignment,
    cfg: &LossConfig,
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let n = assignment.len();
    let mut per_anchor = vec![0.0; n];
    let mut grad = vec![0.0; logits.len()];
    for (a, label) in assignment.labels.iter().enumerate() {
        if mask.is_some_and(|m| !m[a]) {
            continue;
        }
        let row = a * num_classes;
        let mut acc = 0.0;
        for k in 0..num_classes {
            if let Some(y) = class_target(label, k) {
                let (l, g) = loss_and_grad_unchecked(logits[row + k], y, cfg);
                acc += l;
                grad[row + k] = g;
            }
        }
        per_anchor[a] = acc;
    }
    (per_anchor, grad)
}

/// Normalisation divisor: number of foreground anchors, clamped to 1.
pub fn foreground_normalizer(assignment: &MatchAssignment) -> f64 {
    assignment.num_foreground().max(1) as f64
}

/// Total classification loss of a dense prediction.
///
/// `logits` is row-major `num_anchors x num_classes`. Every non-ignored
/// anchor-class pair contributes; the sum is divided by the number of
/// foreground anchors (at least 1).
pub fn batch_loss(
    logits: &[f64],
    num_classes: usize,
    assignment: &MatchAssignment,
    cfg: &LossConfig,
) -> Result<f64> {
    masked_loss(logits, num_classes, assignment, cfg, None)
}

pub(crate) fn masked_loss(
    logits: &[f64],
    num_classes: usize,
    assignment: &MatchAssignment,
    cfg: &LossConfig,
    mask: Option<&[bool]>,
) -> Result<f64> {
    cfg.validate()?;
    check_batch_shape(logits, num_classes, assignment)?;
    if let Some(m) = mask {
        if m.len() != assignment.len() {
            return Err(Error::ShapeMismatch {
                what: "mask",
                expected: assignment.len(),
                got: m.len(),
            });
        }
    }
    let (per_anchor, _) = per_anchor_loss_and_grad(logits, num_classes, assignment, cfg, mask);
    Ok(pairwise_sum(&per_anchor) / foreground_normalizer(assignment))
}
