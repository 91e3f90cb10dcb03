//! Ranking and thresholded metrics on synthetic tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

/// Area under the precision-recall curve with all-points interpolation.
///
/// Examples with equal scores form one threshold, so the result does not
/// depend on input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::input(format!("score must not be NaN, got {s}")));
    }
    let npos = labels.iter().filter(|l| **l).count();
    if npos == 0 {
        return Err(Error::input(
            "average precision needs at least one positive",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp, tp as f64 / seen as f64));
    }
    Ok(interpolated_area(&points, npos))
}

/// `points` are (true positives, precision) at increasing depth.
fn interpolated_area(points: &[(usize, f64)], npos: usize) -> f64 {
    let mut best = 0.0f64;
    let mut interp = vec![0.0; points.len()];
    for (k, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        interp[k] = best;
    }
    let mut area = 0.0;
    let mut prev = 0;
    for (k, &(tp, _)) in points.iter().enumerate() {
        area += (tp - prev) as f64 * interp[k];
        prev = tp;
    }
    (area / npos as f64).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub average_precision: f64,
}

/// Precision, recall and F1 of `score > threshold`, plus AP of the ranking.
pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Metrics> {
    let ap = average_precision(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        average_precision: ap,
    })
}

/// Greedy matching within one image: detections in descending score order
/// (ties by position) each claim the unmatched same-class ground truth with
/// the highest IoU, if it is at least `iou_threshold`. Returns a TP flag per
/// detection.
fn match_image(dets: &[Detection], gts: &[(BBox, usize)], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &(gb, gc)) in gts.iter().enumerate() {
            if matched[g] || gc != dets[i].class_id {
                continue;
            }
            let o = iou(&dets[i].bbox, &gb);
            if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp[i] = true;
        }
    }
    tp
}

fn check_detection_input(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<(BBox, usize)>],
) -> Result<usize> {
    if detections.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch {
            what: "images",
            expected: ground_truth.len(),
            got: detections.len(),
        });
    }
    if detections.iter().flatten().any(|d| d.score.is_nan()) {
        return Err(Error::input("detection score must not be NaN"));
    }
    let npos: usize = ground_truth.iter().map(Vec::len).sum();
    if npos == 0 {
        return Err(Error::input(
            "average precision needs at least one ground-truth box",
        ));
    }
    Ok(npos)
}

/// Detection AP at an IoU threshold.
///
/// Detections are matched per image, then ranked across images by score
/// (ties by image, then position).
pub fn detection_average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<(BBox, usize)>],
    iou_threshold: f64,
) -> Result<f64> {
    let npos = check_detection_input(detections, ground_truth)?;
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (dets, gts)) in detections.iter().zip(ground_truth).enumerate() {
        for (k, tp) in match_image(dets, gts, iou_threshold)
            .into_iter()
            .enumerate()
        {
            all.push((dets[k].score, img, k, tp));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut tp = 0usize;
    let points: Vec<(usize, f64)> = all
        .iter()
        .enumerate()
        .map(|(rank, x)| {
            tp += x.3 as usize;
            (tp, tp as f64 / (rank + 1) as f64)
        })
        .collect();
    Ok(interpolated_area(&points, npos))
}

/// Detection AP, plus precision, recall and F1 of detections scoring above
/// `score_threshold` under the same matching rule.
pub fn detection_metrics(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<(BBox, usize)>],
    iou_threshold: f64,
    score_threshold: f64,
) -> Result<Metrics> {
    let ap = detection_average_precision(detections, ground_truth, iou_threshold)?;
    let npos = check_detection_input(detections, ground_truth)?;
    let (mut tp, mut ndet) = (0usize, 0usize);
    for (dets, gts) in detections.iter().zip(ground_truth) {
        let kept: Vec<Detection> = dets
            .iter()
            .copied()
            .filter(|d| d.score > score_threshold)
            .collect();
        ndet += kept.len();
        tp += match_image(&kept, gts, iou_threshold)
            .into_iter()
            .filter(|t| *t)
            .count();
    }
    let precision = if ndet == 0 {
        0.0
    } else {
        tp as f64 / ndet as f64
    };
    let recall = tp as f64 / npos as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        average_precision: ap,
    })
}
