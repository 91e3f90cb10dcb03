//! Dense inference: score threshold, per-level top-k, decode, class-wise NMS.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::geometry::{decode, nms, score_order, Detection, RegressionTarget};
use crate::loss::stable_sigmoid;
use crate::model::{forward, DenseHead, FeatureMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    /// Candidates kept per pyramid level before NMS.
    pub top_k: usize,
    pub nms_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            top_k: 1000,
            nms_threshold: 0.5,
        }
    }
}

pub fn detect(
    head: &DenseHead,
    features: &FeatureMatrix,
    anchors: &AnchorSet,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    if features.rows != anchors.len() {
        return Err(Error::ShapeMismatch {
            what: "anchor features",
            expected: anchors.len(),
            got: features.rows,
        });
    }
    let out = forward(head, features)?;
    let k = head.num_classes;
    let mut candidates = Vec::new();
    for range in &anchors.level_offsets {
        let mut level = Vec::new();
        for a in range.clone() {
            for c in 0..k {
                let p = stable_sigmoid(out.logits[a * k + c])?;
                if p > cfg.score_threshold {
                    level.push((a, c, p));
                }
            }
        }
        let scores: Vec<f64> = level.iter().map(|x| x.2).collect();
        for i in score_order(&scores).into_iter().take(cfg.top_k) {
            let (a, c, p) = level[i];
            let bbox = decode(
                &anchors.boxes[a],
                &RegressionTarget::from_array(out.boxes[a]),
            )?;
            candidates.push(Detection {
                bbox,
                score: p,
                class_id: c,
            });
        }
    }
    nms(&candidates, cfg.nms_threshold)
}
