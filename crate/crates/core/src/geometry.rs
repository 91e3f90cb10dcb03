//! Axis-aligned boxes, IoU, box-regression parameterisation, smooth-L1 and NMS.
//!
//! Boxes use half-open pixel coordinates: `area = (x2 - x1) * (y2 - y1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound applied to `exp(tw)` / `exp(th)` when decoding.
pub const MAX_SCALE_FACTOR: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::input(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Same center, each side multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        BBox::from_center(cx, cy, self.width() * factor, self.height() * factor)
    }

    #[inline]
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union, in `[0, 1]`.
#[inline]
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Box offsets relative to an anchor: center shift in anchor units and log size ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        RegressionTarget {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

fn require_positive_size(b: &BBox, what: &str) -> Result<()> {
    b.validate()?;
    if b.width() > 0.0 && b.height() > 0.0 {
        Ok(())
    } else {
        Err(Error::input(format!(
            "{what} must have positive width and height: {b:?}"
        )))
    }
}

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<RegressionTarget> {
    require_positive_size(anchor, "anchor")?;
    require_positive_size(gt, "ground-truth box")?;
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(RegressionTarget {
        tx: (gcx - acx) / aw,
        ty: (gcy - acy) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

/// Inverse of [`encode`]. Scale factors are clamped at [`MAX_SCALE_FACTOR`].
pub fn decode(anchor: &BBox, t: &RegressionTarget) -> Result<BBox> {
    anchor.validate()?;
    let finite = t.to_array().iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::input(format!("non-finite regression target {t:?}")));
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let max_log = MAX_SCALE_FACTOR.ln();
    let w = aw * t.tw.min(max_log).exp();
    let h = ah * t.th.min(max_log).exp();
    Ok(BBox::from_center(acx + t.tx * aw, acy + t.ty * ah, w, h))
}

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Visit order for greedy suppression: score descending, lower index first on ties.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression over `boxes` visited in `order`.
///
/// Returns kept indices in visit order. When `classes` is given only boxes of
/// the same class suppress each other.
pub(crate) fn greedy_suppress(
    boxes: &[BBox],
    order: &[usize],
    classes: Option<&[usize]>,
    iou_threshold: f64,
) -> Vec<usize> {
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            if classes.is_some_and(|c| c[i] != c[j]) {
                continue;
            }
            if iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Class-wise greedy non-maximum suppression.
///
/// The output is sorted by descending score (ties by input position).
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::input(format!(
            "nms threshold must lie in [0, 1], got {iou_threshold}"
        )));
    }
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::input(format!(
            "non-finite detection score {}",
            d.score
        )));
    }
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    let order = score_order(&scores);
    Ok(
        greedy_suppress(&boxes, &order, Some(&classes), iou_threshold)
            .into_iter()
            .map(|i| dets[i])
            .collect(),
    )
}
