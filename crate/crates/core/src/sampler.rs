//! Online hard example mining.

use serde::{Deserialize, Serialize};

use crate::anchors::MatchAssignment;
use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, BBox};
use crate::loss::{masked_loss, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    pub batch_size: usize,
    #[serde(default)]
    pub nms_threshold: Option<f64>,
    #[serde(default)]
    pub enforce_ratio_1to3: bool,
}

impl OhemConfig {
    pub fn new(batch_size: usize, nms_threshold: Option<f64>, enforce_ratio_1to3: bool) -> Self {
        OhemConfig {
            batch_size,
            nms_threshold,
            enforce_ratio_1to3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("OHEM batch_size must be >= 1"));
        }
        if let Some(t) = self.nms_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(format!(
                    "OHEM nms_threshold must lie in (0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Most positives a ratio-mode batch may hold.
    pub fn positive_quota(&self) -> usize {
        (self.batch_size / 4).max(1)
    }

    pub fn tag(&self) -> String {
        let nms = self
            .nms_threshold
            .map_or("none".to_string(), |t| t.to_string());
        let ratio = if self.enforce_ratio_1to3 { ",1:3" } else { "" };
        format!("ohem(batch={},nms={nms}{ratio})", self.batch_size)
    }
}

/// Picks the training minibatch from per-example losses.
///
/// Examples are visited by descending loss (lower index first on ties). With
/// an nms threshold, an example is dropped when its box overlaps an already
/// kept example by more than the threshold. Without the ratio rule the first
/// `batch_size` survivors are taken. With it, up to `batch_size / 4` positive
/// survivors are taken, then up to three negatives per positive (never more
/// than the batch holds). If no positive survives, `batch_size` negatives.
///
/// Returned indices are sorted ascending.
pub fn ohem_select(
    losses: &[f64],
    boxes: Option<&[BBox]>,
    positives: &[bool],
    cfg: &OhemConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if positives.len() != losses.len() {
        return Err(Error::ShapeMismatch {
            what: "labels",
            expected: losses.len(),
            got: positives.len(),
        });
    }
    if let Some(x) = losses.iter().find(|x| !x.is_finite()) {
        return Err(Error::input(format!("OHEM losses must be finite, got {x}")));
    }
    let boxes = match (cfg.nms_threshold, boxes) {
        (Some(_), None) => return Err(Error::input("OHEM with nms requires example boxes")),
        (Some(_), Some(b)) if b.len() != losses.len() => {
            return Err(Error::ShapeMismatch {
                what: "boxes",
                expected: losses.len(),
                got: b.len(),
            })
        }
        (_, b) => b,
    };

    let order = score_order(losses);
    let total_pos = positives.iter().filter(|p| **p).count();
    let (pos_cap, neg_cap) = if !cfg.enforce_ratio_1to3 {
        (cfg.batch_size, cfg.batch_size)
    } else if total_pos == 0 {
        (0, cfg.batch_size)
    } else {
        let q = cfg.positive_quota().min(total_pos);
        (q, (3 * q).min(cfg.batch_size - q))
    };

    // Survivors are produced lazily; scanning stops once nothing further can
    // change the selection.
    let mut kept: Vec<usize> = Vec::new();
    let mut pos_kept = Vec::new();
    let mut neg_kept = Vec::new();
    let mut index = match (cfg.nms_threshold, boxes) {
        (Some(t), Some(b)) => Some((t, KeptIndex::new(b))),
        _ => None,
    };
    for &i in &order {
        if let Some((t, idx)) = index.as_mut() {
            if idx.overlaps(i, *t) {
                continue;
            }
            idx.insert(i);
        }
        kept.push(i);
        if !cfg.enforce_ratio_1to3 {
            if kept.len() == cfg.batch_size {
                break;
            }
            continue;
        }
        if positives[i] {
            if pos_kept.len() < pos_cap {
                pos_kept.push(i);
            }
        } else if neg_kept.len() < cfg.batch_size {
            neg_kept.push(i);
        }
        if pos_kept.len() == pos_cap && neg_kept.len() >= neg_cap {
            break;
        }
    }

    let mut selected = if cfg.enforce_ratio_1to3 {
        let n_neg = if pos_kept.is_empty() {
            neg_kept.len()
        } else {
            neg_kept
                .len()
                .min(3 * pos_kept.len())
                .min(cfg.batch_size - pos_kept.len())
        };
        let mut s = pos_kept;
        s.extend_from_slice(&neg_kept[..n_neg]);
        s
    } else {
        kept
    };
    selected.sort_unstable();
    Ok(selected)
}

const MAX_GRID_SIDE: usize = 256;

/// Uniform grid over surviving boxes so each suppression test only visits
/// nearby survivors.
struct KeptIndex<'a> {
    boxes: &'a [BBox],
    x0: f64,
    y0: f64,
    cell_w: f64,
    cell_h: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
    seen: Vec<u32>,
    epoch: u32,
}

impl<'a> KeptIndex<'a> {
    fn new(boxes: &'a [BBox]) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        let mut side = 0.0;
        for b in boxes {
            x0 = x0.min(b.x1);
            y0 = y0.min(b.y1);
            x1 = x1.max(b.x2);
            y1 = y1.max(b.y2);
            side += b.width().max(b.height());
        }
        let mut side = side / boxes.len().max(1) as f64;
        if !(side.is_finite() && side > 0.0) {
            side = 1.0;
        }
        let axis = |lo: f64, hi: f64| {
            let extent = if hi > lo && (hi - lo).is_finite() {
                hi - lo
            } else {
                0.0
            };
            let w = side.max(extent / MAX_GRID_SIDE as f64);
            (w, ((extent / w) as usize + 1).min(MAX_GRID_SIDE))
        };
        let (cell_w, nx) = axis(x0, x1);
        let (cell_h, ny) = axis(y0, y1);
        KeptIndex {
            boxes,
            x0: if x0.is_finite() { x0 } else { 0.0 },
            y0: if y0.is_finite() { y0 } else { 0.0 },
            cell_w,
            cell_h,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
            seen: vec![0; boxes.len()],
            epoch: 0,
        }
    }

    fn span(&self, b: &BBox) -> (usize, usize, usize, usize) {
        let c =
            |v: f64, o: f64, w: f64, n: usize| (((v - o) / w).floor().max(0.0) as usize).min(n - 1);
        (
            c(b.x1, self.x0, self.cell_w, self.nx),
            c(b.x2, self.x0, self.cell_w, self.nx),
            c(b.y1, self.y0, self.cell_h, self.ny),
            c(b.y2, self.y0, self.cell_h, self.ny),
        )
    }

    fn insert(&mut self, i: usize) {
        let (ax, bx, ay, by) = self.span(&self.boxes[i]);
        for gy in ay..=by {
            for gx in ax..=bx {
                self.cells[gy * self.nx + gx].push(i as u32);
            }
        }
    }

    fn overlaps(&mut self, i: usize, threshold: f64) -> bool {
        self.epoch += 1;
        let b = &self.boxes[i];
        let (ax, bx, ay, by) = self.span(b);
        for gy in ay..=by {
            for gx in ax..=bx {
                for &k in &self.cells[gy * self.nx + gx] {
                    let k = k as usize;
                    if self.seen[k] == self.epoch {
                        continue;
                    }
                    self.seen[k] = self.epoch;
                    if iou(&self.boxes[k], b) > threshold {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Batch loss restricted to `selected` anchors, still normalised by the full
/// foreground count.
pub fn masked_batch_loss(
    logits: &[f64],
    num_classes: usize,
    assignment: &MatchAssignment,
    selected: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut mask = vec![false; assignment.len()];
    for &i in selected {
        if i >= mask.len() {
            return Err(Error::input(format!(
                "selected anchor {i} out of range for {} anchors",
                mask.len()
            )));
        }
        mask[i] = true;
    }
    masked_loss(logits, num_classes, assignment, cfg, Some(&mask))
}
