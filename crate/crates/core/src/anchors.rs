//! Pyramid anchors and IoU-band target assignment.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode, iou, BBox, RegressionTarget};
use crate::io::fmt_f64;

/// Anchors with max IoU at or above this are foreground.
pub const FOREGROUND_IOU: f64 = 0.5;
/// Anchors with max IoU below this are background; the band in between is ignored.
pub const BACKGROUND_IOU: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Pyramid levels; level `l` has stride `2^l` and base side `2^(l+2)`.
    pub levels: Vec<u32>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    /// Side multipliers applied to the base size within one octave.
    pub octave_scales: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            levels: vec![3, 4, 5, 6, 7],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            octave_scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.aspect_ratios.is_empty() || self.octave_scales.is_empty()
        {
            return Err(Error::config(
                "anchor levels, ratios and scales must be non-empty",
            ));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("anchor levels must be strictly ascending"));
        }
        if self.levels.iter().any(|&l| l > 20) {
            return Err(Error::config("anchor level above 20"));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.aspect_ratios.iter().all(positive) || !self.octave_scales.iter().all(positive) {
            return Err(Error::config(
                "aspect ratios and octave scales must be positive",
            ));
        }
        Ok(())
    }

    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len() * self.octave_scales.len()
    }

    pub fn stride(level: u32) -> u32 {
        1 << level
    }

    /// Base anchor area at a level: `4^l * 16`, i.e. `32^2` at level 3.
    pub fn base_area(level: u32) -> f64 {
        let side = f64::from(1u32 << (level + 2));
        side * side
    }

    /// Number of anchors for an image, from the closed form.
    pub fn anchor_count(&self, width: u32, height: u32) -> usize {
        self.levels
            .iter()
            .map(|&l| {
                let s = Self::stride(l);
                (width.div_ceil(s) as usize) * (height.div_ceil(s) as usize)
            })
            .sum::<usize>()
            * self.anchors_per_location()
    }

    /// Largest anchor scale, measured as the side of the equal-area square
    /// (`sqrt(area)`).
    pub fn max_anchor_scale(&self) -> f64 {
        let top_level = *self.levels.iter().max().unwrap_or(&0);
        let top_scale = self.octave_scales.iter().cloned().fold(0.0, f64::max);
        Self::base_area(top_level).sqrt() * top_scale
    }

    /// Smallest anchor scale, as in [`Self::max_anchor_scale`].
    pub fn min_anchor_scale(&self) -> f64 {
        let low_level = *self.levels.iter().min().unwrap_or(&0);
        let low_scale = self
            .octave_scales
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Self::base_area(low_level).sqrt() * low_scale
    }
}

#[inline]
fn anchor_size(area: f64, ratio: f64) -> (f64, f64) {
    ((area * ratio).sqrt(), (area / ratio).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    /// Index range into `boxes` for each level, in `config.levels` order.
    pub level_offsets: Vec<Range<usize>>,
    pub config: AnchorConfig,
    pub image_width: u32,
    pub image_height: u32,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level_of(&self, index: usize) -> Option<u32> {
        self.level_offsets
            .iter()
            .position(|r| r.contains(&index))
            .map(|i| self.config.levels[i])
    }

    /// Writes `level,cx,cy,w,h` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "level,cx,cy,w,h")?;
        for (range, &level) in self.level_offsets.iter().zip(&self.config.levels) {
            for b in &self.boxes[range.clone()] {
                let (cx, cy) = b.center();
                writeln!(
                    out,
                    "{level},{},{},{},{}",
                    fmt_f64(cx),
                    fmt_f64(cy),
                    fmt_f64(b.width()),
                    fmt_f64(b.height())
                )?;
            }
        }
        Ok(())
    }
}

/// Tiles anchors over every pyramid level.
///
/// Order is level, row, column, then scale-major / ratio-minor within a cell.
/// Anchors are not clipped to the image.
pub fn generate_anchors(
    cfg: &AnchorConfig,
    image_width: u32,
    image_height: u32,
) -> Result<AnchorSet> {
    cfg.validate()?;
    let coarsest = AnchorConfig::stride(*cfg.levels.last().expect("validated non-empty"));
    if image_width < coarsest || image_height < coarsest {
        return Err(Error::ImageTooSmall {
            width: image_width,
            height: image_height,
            stride: coarsest,
        });
    }
    let mut boxes = Vec::with_capacity(cfg.anchor_count(image_width, image_height));
    let mut level_offsets = Vec::with_capacity(cfg.levels.len());
    for &level in &cfg.levels {
        let start = boxes.len();
        let stride = AnchorConfig::stride(level);
        let s = f64::from(stride);
        let base = AnchorConfig::base_area(level);
        let shapes: Vec<(f64, f64)> = cfg
            .octave_scales
            .iter()
            .flat_map(|&sc| {
                cfg.aspect_ratios
                    .iter()
                    .map(move |&r| anchor_size(base * sc * sc, r))
            })
            .collect();
        for row in 0..image_height.div_ceil(stride) {
            let cy = (f64::from(row) + 0.5) * s;
            for col in 0..image_width.div_ceil(stride) {
                let cx = (f64::from(col) + 0.5) * s;
                boxes.extend(shapes.iter().map(|&(w, h)| BBox::from_center(cx, cy, w, h)));
            }
        }
        level_offsets.push(start..boxes.len());
    }
    Ok(AnchorSet {
        boxes,
        level_offsets,
        config: cfg.clone(),
        image_width,
        image_height,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "snake_case")]
pub enum AnchorLabel {
    Foreground {
        gt_index: usize,
        class_id: usize,
        target: RegressionTarget,
    },
    Background,
    Ignore,
}

impl AnchorLabel {
    pub fn is_foreground(&self) -> bool {
        matches!(self, AnchorLabel::Foreground { .. })
    }
}

/// Ground-truth object: a box and its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Best IoU of each anchor over all ground truths (0 when there are none).
    pub max_iou: Vec<f64>,
}

impl MatchAssignment {
    /// Wraps labels that did not come from IoU matching.
    pub fn from_labels(labels: Vec<AnchorLabel>) -> Self {
        let max_iou = labels
            .iter()
            .map(|l| if l.is_foreground() { 1.0 } else { 0.0 })
            .collect();
        MatchAssignment { labels, max_iou }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|l| l.is_foreground()).count()
    }

    pub fn num_background(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Background))
            .count()
    }

    pub fn num_ignored(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Ignore))
            .count()
    }
}

/// Labels each anchor by its best IoU over the ground truths.
///
/// Ties go to the lower ground-truth index. No anchor is force-matched.
pub fn assign_targets(anchors: &AnchorSet, gts: &[GroundTruth]) -> Result<MatchAssignment> {
    assign_boxes(&anchors.boxes, gts)
}

pub fn assign_boxes(anchors: &[BBox], gts: &[GroundTruth]) -> Result<MatchAssignment> {
    for g in gts {
        g.bbox.validate()?;
    }
    let mut labels = Vec::with_capacity(anchors.len());
    let mut max_iou = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(anchor, &g.bbox);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        let label = match best_gt {
            Some(gi) if best >= FOREGROUND_IOU => AnchorLabel::Foreground {
                gt_index: gi,
                class_id: gts[gi].class_id,
                target: encode(anchor, &gts[gi].bbox)?,
            },
            _ if best < BACKGROUND_IOU => AnchorLabel::Background,
            _ => AnchorLabel::Ignore,
        };
        labels.push(label);
        max_iou.push(best);
    }
    Ok(MatchAssignment { labels, max_iou })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_count_for_640() {
        let cfg = AnchorConfig::default();
        assert_eq!(cfg.anchors_per_location(), 9);
        let set = generate_anchors(&cfg, 640, 640).unwrap();
        assert_eq!(set.len(), 76_725);
        assert_eq!(cfg.anchor_count(640, 640), 76_725);
        assert_eq!(set.level_offsets[0], 0..80 * 80 * 9);
        assert_eq!(set.level_of(0), Some(3));
        assert_eq!(set.level_of(76_724), Some(7));
    }

    #[test]
    fn minimal_grid() {
        let cfg = AnchorConfig {
            levels: vec![3],
            aspect_ratios: vec![1.0],
            octave_scales: vec![1.0],
        };
        let set = generate_anchors(&cfg, 8, 8).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.boxes[0].center(), (4.0, 4.0));
        assert_eq!(set.boxes[0].width(), 32.0);
    }

    #[test]
    fn scale_range_is_32_to_813() {
        let cfg = AnchorConfig::default();
        assert_eq!(cfg.min_anchor_scale(), 32.0);
        let top = cfg.max_anchor_scale();
        assert!((top - 512.0 * 2f64.powf(2.0 / 3.0)).abs() < 1e-9);
        assert!((812.0..=813.0).contains(&top));
        // a square anchor at the top octave has exactly that side
        let set = generate_anchors(&cfg, 128, 128).unwrap();
        let largest = set
            .boxes
            .iter()
            .map(|b| b.area().sqrt())
            .fold(0.0, f64::max);
        assert!((largest - top).abs() < 1e-9);
    }

    #[test]
    fn ordering_is_scale_major_ratio_minor() {
        let cfg = AnchorConfig {
            levels: vec![3],
            ..Default::default()
        };
        let set = generate_anchors(&cfg, 8, 8).unwrap();
        let ratios: Vec<f64> = set.boxes.iter().map(|b| b.width() / b.height()).collect();
        for (i, r) in ratios.iter().enumerate() {
            assert!((r - cfg.aspect_ratios[i % 3]).abs() < 1e-12);
        }
        assert!(set.boxes[0].area() < set.boxes[3].area());
        assert!((set.boxes[0].area() - 1024.0).abs() < 1e-9);
    }

    #[test]
    fn too_small_image() {
        let cfg = AnchorConfig::default();
        assert!(matches!(
            generate_anchors(&cfg, 100, 640),
            Err(Error::ImageTooSmall { .. })
        ));
        let bad = AnchorConfig {
            levels: vec![4, 3],
            ..Default::default()
        };
        assert!(generate_anchors(&bad, 640, 640).is_err());
    }

    #[test]
    fn assignment_bands() {
        let anchors = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            // IoU with gt = 45/100 = 0.45
            BBox::new(0.0, 0.0, 10.0, 4.5).unwrap(),
            BBox::new(50.0, 50.0, 60.0, 60.0).unwrap(),
        ];
        let gts = [GroundTruth {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            class_id: 0,
        }];
        let m = assign_boxes(&anchors, &gts).unwrap();
        assert!(matches!(
            m.labels[0],
            AnchorLabel::Foreground {
                gt_index: 0,
                class_id: 0,
                ..
            }
        ));
        assert_eq!(m.max_iou[0], 1.0);
        assert_eq!(m.labels[1], AnchorLabel::Ignore);
        assert!((m.max_iou[1] - 0.45).abs() < 1e-15);
        assert_eq!(m.labels[2], AnchorLabel::Background);

        let empty = assign_boxes(&anchors, &[]).unwrap();
        assert!(empty.labels.iter().all(|l| *l == AnchorLabel::Background));
    }

    #[test]
    fn assignment_tie_goes_to_lower_index() {
        let anchors = vec![BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()];
        let g = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let gts = [
            GroundTruth {
                bbox: g,
                class_id: 3,
            },
            GroundTruth {
                bbox: g,
                class_id: 1,
            },
        ];
        let m = assign_boxes(&anchors, &gts).unwrap();
        assert!(matches!(
            m.labels[0],
            AnchorLabel::Foreground {
                gt_index: 0,
                class_id: 3,
                ..
            }
        ));
    }

    #[test]
    fn csv_dump() {
        let cfg = AnchorConfig {
            levels: vec![3],
            aspect_ratios: vec![1.0],
            octave_scales: vec![1.0],
        };
        let set = generate_anchors(&cfg, 16, 8).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "level,cx,cy,w,h\n3,4.0,4.0,32.0,32.0\n3,12.0,4.0,32.0,32.0\n"
        );
    }
}
