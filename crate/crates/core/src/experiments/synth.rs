//! Synthetic imbalanced tasks.
//!
//! Classification: positives and hard negatives are unit Gaussians on either
//! side of a boundary along feature 0; easy negatives form a tight cluster
//! displaced along features 0 and 1. All features share a common offset, so
//! they are not centred. Every example also gets a box on a virtual canvas,
//! hard negatives overlapping a positive, so box-based OHEM can run.
//!
//! Toy detection: bright rectangles on noisy grayscale images; anchors are
//! described by intensity statistics of the anchor box and its 2x context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::{
    assign_targets, generate_anchors, AnchorConfig, AnchorLabel, AnchorSet, GroundTruth,
    MatchAssignment,
};
use crate::error::{Error, Result};
use crate::geometry::{BBox, RegressionTarget};
use crate::model::{FeatureMatrix, TrainingSample, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Classification,
    ToyDetection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    pub mode: TaskMode,
    /// Negatives per positive.
    pub imbalance_ratio: f64,
    pub num_positives: usize,
    pub feature_dim: usize,
    /// Standard deviation of the positive and hard-negative clusters
    /// (classification) or of the pixel noise (detection).
    pub feature_noise: f64,
    /// Fraction of negatives drawn next to the positives.
    pub overlap_hardness: f64,
    /// Distance between the positive and hard-negative means along feature 0.
    pub separation: f64,
    /// Easy-negative mean is `(easy_along, -easy_across, 0, ...)`.
    pub easy_along: f64,
    pub easy_across: f64,
    pub easy_spread: f64,
    /// Added to every classification feature.
    pub feature_offset: f64,
    pub detection: DetectionTaskConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionTaskConfig {
    pub image_size: u32,
    pub num_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Rectangle intensity above the background mean.
    pub contrast: f64,
    pub anchors: AnchorConfig,
}

impl Default for DetectionTaskConfig {
    fn default() -> Self {
        DetectionTaskConfig {
            image_size: 128,
            num_images: 16,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 24.0,
            max_object_size: 64.0,
            contrast: 1.0,
            anchors: AnchorConfig {
                levels: vec![3, 4, 5],
                ..AnchorConfig::default()
            },
        }
    }
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            mode: TaskMode::Classification,
            imbalance_ratio: 1000.0,
            num_positives: 100,
            feature_dim: 4,
            feature_noise: 1.0,
            overlap_hardness: 0.05,
            separation: 4.0,
            easy_along: 2.0,
            easy_across: 5.0,
            easy_spread: 0.3,
            feature_offset: 3.0,
            detection: DetectionTaskConfig::default(),
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::config(format!(
                "imbalance_ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.num_positives == 0 {
            return Err(Error::config("num_positives must be >= 1"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.overlap_hardness) {
            return Err(Error::config("overlap_hardness must lie in [0, 1]"));
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("easy_spread", self.easy_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        for (name, v) in [
            ("separation", self.separation),
            ("easy_along", self.easy_along),
            ("easy_across", self.easy_across),
            ("feature_offset", self.feature_offset),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        if self.mode == TaskMode::ToyDetection {
            let d = &self.detection;
            d.anchors.validate()?;
            if d.num_images == 0 {
                return Err(Error::config("num_images must be >= 1"));
            }
            if d.min_objects > d.max_objects {
                return Err(Error::config("min_objects must not exceed max_objects"));
            }
            if !(d.min_object_size >= 2.0
                && d.min_object_size <= d.max_object_size
                && d.max_object_size < d.image_size as f64)
            {
                return Err(Error::config(
                    "object sizes must satisfy 2 <= min <= max < image_size",
                ));
            }
        }
        Ok(())
    }

    pub fn num_negatives(&self) -> usize {
        (self.num_positives as f64 * self.imbalance_ratio).round() as usize
    }

    /// Same task with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticTaskConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Flat labelled example set with one box per example.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationSet {
    pub features: FeatureMatrix,
    pub labels: Vec<bool>,
    pub boxes: Vec<BBox>,
}

impl ClassificationSet {
    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn assignment(&self) -> MatchAssignment {
        MatchAssignment::from_labels(
            self.labels
                .iter()
                .map(|&l| {
                    if l {
                        AnchorLabel::Foreground {
                            gt_index: 0,
                            class_id: 0,
                            target: RegressionTarget::zero(),
                        }
                    } else {
                        AnchorLabel::Background
                    }
                })
                .collect(),
        )
    }

    /// The whole set as one full-batch training sample without regression.
    pub fn to_training_set(&self) -> TrainingSet {
        TrainingSet {
            num_classes: 1,
            feature_dim: self.features.cols,
            samples: vec![TrainingSample {
                features: self.features.clone(),
                assignment: self.assignment(),
                boxes: Some(self.boxes.clone()),
            }],
            regression: false,
        }
    }
}

const BOX_MIN: f64 = 32.0;
const BOX_MAX: f64 = 96.0;

fn random_box(rng: &mut ChaCha8Rng, canvas: f64) -> BBox {
    let w = rng.gen_range(BOX_MIN..BOX_MAX);
    let h = rng.gen_range(BOX_MIN..BOX_MAX);
    let x = rng.gen_range(0.0..canvas - w);
    let y = rng.gen_range(0.0..canvas - h);
    BBox {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    }
}

/// Box shifted by 30-60% of its size along each axis.
fn shifted_box(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let sx = rng.gen_range(0.3..0.6) * b.width() * if rng.gen() { 1.0 } else { -1.0 };
    let sy = rng.gen_range(0.3..0.6) * b.height() * if rng.gen() { 1.0 } else { -1.0 };
    BBox {
        x1: b.x1 + sx,
        y1: b.y1 + sy,
        x2: b.x2 + sx,
        y2: b.y2 + sy,
    }
}

/// Rows are positives, then hard negatives, then easy negatives.
pub fn gen_classification(cfg: &SyntheticTaskConfig) -> Result<ClassificationSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let npos = cfg.num_positives;
    let nneg = cfg.num_negatives();
    let nhard = (nneg as f64 * cfg.overlap_hardness).round() as usize;
    let n = npos + nneg;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut push = |rng: &mut ChaCha8Rng, mean0: f64, mean1: f64, std: f64, label: bool| {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            let mean = match j {
                0 => mean0,
                1 => mean1,
                _ => 0.0,
            };
            data.push(mean + std * z + cfg.feature_offset);
        }
        labels.push(label);
    };
    let half = cfg.separation / 2.0;
    for _ in 0..npos {
        push(&mut rng, half, 0.0, cfg.feature_noise, true);
    }
    for _ in 0..nhard {
        push(&mut rng, -half, 0.0, cfg.feature_noise, false);
    }
    for _ in nhard..nneg {
        push(
            &mut rng,
            cfg.easy_along,
            -cfg.easy_across,
            cfg.easy_spread,
            false,
        );
    }
    let canvas = BOX_MAX * 4.0 * (n as f64).sqrt();
    let mut boxes: Vec<BBox> = (0..npos).map(|_| random_box(&mut rng, canvas)).collect();
    for _ in 0..nhard {
        let anchor = boxes[rng.gen_range(0..npos)];
        boxes.push(shifted_box(&mut rng, &anchor));
    }
    for _ in nhard..nneg {
        boxes.push(random_box(&mut rng, canvas));
    }
    Ok(ClassificationSet {
        features: FeatureMatrix::new(n, d, data)?,
        labels,
        boxes,
    })
}

/// Grayscale image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// Summed-area tables of intensity and squared intensity.
struct IntegralImage {
    w: usize,
    h: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl IntegralImage {
    fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width, img.height);
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        let mut sq = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..w {
                let v = img.pixels[y * w + x];
                rs += v;
                rq += v * v;
                sum[(y + 1) * (w + 1) + x + 1] = sum[y * (w + 1) + x + 1] + rs;
                sq[(y + 1) * (w + 1) + x + 1] = sq[y * (w + 1) + x + 1] + rq;
            }
        }
        IntegralImage { w, h, sum, sq }
    }

    /// Mean and variance over the pixels covered by `b`, clipped to the image.
    /// Boxes entirely outside the image read as an empty region (0, 0).
    fn stats(&self, b: &BBox) -> (f64, f64) {
        let clip = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
        let (x1, x2) = (clip(b.x1, self.w), clip(b.x2, self.w));
        let (y1, y2) = (clip(b.y1, self.h), clip(b.y2, self.h));
        if x2 <= x1 || y2 <= y1 {
            return (0.0, 0.0);
        }
        let area = ((x2 - x1) * (y2 - y1)) as f64;
        let at = |t: &[f64], x: usize, y: usize| t[y * (self.w + 1) + x];
        let rect = |t: &[f64]| at(t, x2, y2) - at(t, x1, y2) - at(t, x2, y1) + at(t, x1, y1);
        let mean = rect(&self.sum) / area;
        let var = (rect(&self.sq) / area - mean * mean).max(0.0);
        (mean, var)
    }
}

/// Number of per-anchor detection features.
pub const DETECTION_FEATURE_DIM: usize = 6;

/// `[mean_in, var_in, mean_ctx, var_ctx, mean_in - mean_ctx, var_in - var_ctx]`,
/// where `ctx` is the anchor box scaled by 2 about its centre.
fn anchor_features(ii: &IntegralImage, b: &BBox) -> [f64; DETECTION_FEATURE_DIM] {
    let (m, v) = ii.stats(b);
    let (mc, vc) = ii.stats(&b.scaled(2.0));
    [m, v, mc, vc, m - mc, v - vc]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionImage {
    pub image: GrayImage,
    pub objects: Vec<GroundTruth>,
    pub features: FeatureMatrix,
    pub assignment: MatchAssignment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub anchors: AnchorSet,
    pub images: Vec<DetectionImage>,
}

impl DetectionSet {
    pub fn to_training_set(&self) -> TrainingSet {
        TrainingSet {
            num_classes: 1,
            feature_dim: DETECTION_FEATURE_DIM,
            samples: self
                .images
                .iter()
                .map(|im| TrainingSample {
                    features: im.features.clone(),
                    assignment: im.assignment.clone(),
                    boxes: Some(self.anchors.boxes.clone()),
                })
                .collect(),
            regression: true,
        }
    }
}

/// Renders one image with the given rectangles.
pub fn render_image(
    size: u32,
    objects: &[BBox],
    noise: f64,
    contrast: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GrayImage> {
    let n = size as usize;
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut pixels: Vec<f64> = (0..n * n).map(|_| normal.sample(rng)).collect();
    for o in objects {
        let x1 = o.x1.round().max(0.0) as usize;
        let y1 = o.y1.round().max(0.0) as usize;
        let x2 = (o.x2.round().max(0.0) as usize).min(n);
        let y2 = (o.y2.round().max(0.0) as usize).min(n);
        for y in y1..y2 {
            for x in x1..x2 {
                pixels[y * n + x] = contrast + normal.sample(rng);
            }
        }
    }
    Ok(GrayImage {
        width: n,
        height: n,
        pixels,
    })
}

/// Per-anchor features of an image.
pub fn image_features(image: &GrayImage, anchors: &AnchorSet) -> FeatureMatrix {
    let ii = IntegralImage::new(image);
    let mut data = Vec::with_capacity(anchors.len() * DETECTION_FEATURE_DIM);
    for b in &anchors.boxes {
        data.extend_from_slice(&anchor_features(&ii, b));
    }
    FeatureMatrix {
        rows: anchors.len(),
        cols: DETECTION_FEATURE_DIM,
        data,
    }
}

pub fn gen_toy_detection(cfg: &SyntheticTaskConfig) -> Result<DetectionSet> {
    let mut c = cfg.clone();
    c.mode = TaskMode::ToyDetection;
    c.validate()?;
    let d = &c.detection;
    let anchors = generate_anchors(&d.anchors, d.image_size, d.image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let size = d.image_size as f64;
    let mut images = Vec::with_capacity(d.num_images);
    for _ in 0..d.num_images {
        let count = rng.gen_range(d.min_objects..=d.max_objects);
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let w = rng.gen_range(d.min_object_size..=d.max_object_size);
            let h = rng.gen_range(d.min_object_size..=d.max_object_size);
            let x = rng.gen_range(0.0..=size - w).round();
            let y = rng.gen_range(0.0..=size - h).round();
            boxes.push(BBox {
                x1: x,
                y1: y,
                x2: x + w.round(),
                y2: y + h.round(),
            });
        }
        let image = render_image(d.image_size, &boxes, c.feature_noise, d.contrast, &mut rng)?;
        let objects: Vec<GroundTruth> = boxes
            .iter()
            .map(|&bbox| GroundTruth { bbox, class_id: 0 })
            .collect();
        let features = image_features(&image, &anchors);
        let assignment = assign_targets(&anchors, &objects)?;
        images.push(DetectionImage {
            image,
            objects,
            features,
            assignment,
        });
    }
    Ok(DetectionSet { anchors, images })
}

/// Uniform random subset of `k` indices from `0..n`, sorted.
pub fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}
