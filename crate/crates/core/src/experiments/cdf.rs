//! Cumulative distribution of normalised per-sample focal loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{loss_value, BinaryLabel, LossConfig};
use crate::numeric::pairwise_sum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfCurve {
    pub gamma: f64,
    pub polarity: Polarity,
    /// Normalised losses, ascending; they sum to 1.
    pub losses: Vec<f64>,
    /// Running sum of `losses`.
    pub cumulative: Vec<f64>,
}

impl CdfCurve {
    fn from_losses(gamma: f64, polarity: Polarity, mut losses: Vec<f64>) -> Self {
        losses.sort_by(f64::total_cmp);
        let total = pairwise_sum(&losses);
        let n = losses.len() as f64;
        if total > 0.0 {
            losses.iter_mut().for_each(|l| *l /= total);
        } else {
            losses.iter_mut().for_each(|l| *l = 1.0 / n);
        }
        let mut acc = 0.0;
        let cumulative = losses
            .iter()
            .map(|l| {
                acc += l;
                acc
            })
            .collect();
        CdfCurve {
            gamma,
            polarity,
            losses,
            cumulative,
        }
    }

    /// Share of the total loss carried by the hardest `fraction` of samples
    /// (at least one sample).
    pub fn concentration(&self, fraction: f64) -> f64 {
        let n = self.losses.len();
        let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
        pairwise_sum(&self.losses[n - k..])
    }

    /// CDF value after the lowest `fraction` of samples.
    pub fn value_at(&self, fraction: f64) -> f64 {
        let n = self.losses.len();
        let k = (fraction * n as f64).floor() as usize;
        if k == 0 {
            0.0
        } else {
            self.cumulative[k.min(n) - 1]
        }
    }
}

/// One curve per (polarity, gamma): positives first, each in `gammas` order.
///
/// Losses are unbalanced FL with the given gamma evaluated on fixed logits.
pub fn loss_cdf(logits: &[f64], labels: &[bool], gammas: &[f64]) -> Result<Vec<CdfCurve>> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "labels",
            expected: logits.len(),
            got: labels.len(),
        });
    }
    for (polarity, want) in [(Polarity::Positive, true), (Polarity::Negative, false)] {
        if !labels.contains(&want) {
            return Err(Error::EmptyPolarity(polarity.name()));
        }
    }
    let mut out = Vec::with_capacity(2 * gammas.len());
    for (polarity, want) in [(Polarity::Positive, true), (Polarity::Negative, false)] {
        let y = if want {
            BinaryLabel::Positive
        } else {
            BinaryLabel::Negative
        };
        for &gamma in gammas {
            let cfg = LossConfig::focal(gamma, None);
            let losses = logits
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == want)
                .map(|(&x, _)| loss_value(x, y, &cfg))
                .collect::<Result<Vec<f64>>>()?;
            out.push(CdfCurve::from_losses(gamma, polarity, losses));
        }
    }
    Ok(out)
}
