//! Box geometry, box-prompt jitter and cross-detector fusion.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{ClassSet, WEED};
use crate::rng;

/// Axis-aligned pixel box, min inclusive and max exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BBox {
    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    #[inline]
    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0
            && self.y_min >= 0
            && self.x_max <= width as i64
            && self.y_max <= height as i64
    }

    /// Grows every side by `margin` pixels.
    pub fn expand(&self, margin: i64) -> BBox {
        BBox {
            x_min: self.x_min - margin,
            y_min: self.y_min - margin,
            x_max: self.x_max + margin,
            y_max: self.y_max + margin,
        }
    }
}

/// Intersection over union of the half-open pixel areas.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Intersection of `bbox` with the `width` x `height` image rectangle.
pub fn clip_box(bbox: &BBox, width: usize, height: usize) -> Result<BBox> {
    BBox::new(
        bbox.x_min.max(0),
        bbox.y_min.max(0),
        bbox.x_max.min(width as i64),
        bbox.y_max.min(height as i64),
    )
    .map_err(|_| Error::BoxOutOfBounds { width, height })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    PrimaryDetector,
    SecondaryDetector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u8,
    pub score: f64,
    pub source: Source,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u8, score: f64, source: Source) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore(score));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
            source,
        })
    }
}

/// Amplitude and seed of the box-prompt augmentation. Each coordinate moves
/// by at most `min(fraction * side, cap)` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterPolicy {
    pub fraction: f64,
    pub cap: f64,
    pub seed: u64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            fraction: 0.10,
            cap: 20.0,
            seed: 0,
        }
    }
}

impl JitterPolicy {
    pub fn none() -> Self {
        JitterPolicy {
            fraction: 0.0,
            cap: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction >= 0.0 && self.fraction.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "jitter fraction must be >= 0, got {}",
                self.fraction
            )));
        }
        if !(self.cap >= 0.0 && self.cap.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "jitter cap must be >= 0, got {}",
                self.cap
            )));
        }
        Ok(())
    }

    /// Largest whole-pixel displacement allowed for a box side of `side` px.
    pub fn amplitude(&self, side: i64) -> i64 {
        (self.fraction * side as f64).min(self.cap).floor().max(0.0) as i64
    }
}

const JITTER_STREAM: u64 = 0x6a69_7474_6572;

/// Perturbed coordinates before clipping, as `[x_min, y_min, x_max, y_max]`.
///
/// Offsets are uniform integers in `[-A, A]` with `A` the policy amplitude
/// for the box width (x coordinates) or height (y coordinates).
pub fn jitter_unclipped(bbox: &BBox, policy: &JitterPolicy, stream_key: u64) -> [i64; 4] {
    let ax = policy.amplitude(bbox.width());
    let ay = policy.amplitude(bbox.height());
    let mut rng = rng::stream(policy.seed, &[JITTER_STREAM, stream_key]);
    let mut offset = |a: i64| if a == 0 { 0 } else { rng.random_range(-a..=a) };
    [
        bbox.x_min + offset(ax),
        bbox.y_min + offset(ay),
        bbox.x_max + offset(ax),
        bbox.y_max + offset(ay),
    ]
}

fn repair_axis(lo: i64, hi: i64, limit: i64) -> (i64, i64) {
    if lo < hi {
        return (lo, hi);
    }
    let at = ((lo + hi) / 2).clamp(0, limit - 1);
    (at, at + 1)
}

/// Applies the box-prompt augmentation to `bbox`.
///
/// The perturbed box is clipped to the image and a collapsed axis is
/// repaired to a 1 px extent. Output depends only on `(policy.seed,
/// stream_key)`.
pub fn jitter_box(
    bbox: &BBox,
    policy: &JitterPolicy,
    width: usize,
    height: usize,
    stream_key: u64,
) -> Result<BBox> {
    policy.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::Dimensions { width, height });
    }
    if !bbox.within(width, height) {
        return Err(Error::BoxOutOfBounds { width, height });
    }
    let [x0, y0, x1, y1] = jitter_unclipped(bbox, policy, stream_key);
    let (w, h) = (width as i64, height as i64);
    let (x0, x1) = repair_axis(x0.clamp(0, w), x1.clamp(0, w), w);
    let (y0, y1) = repair_axis(y0.clamp(0, h), y1.clamp(0, h), h);
    BBox::new(x0, y0, x1, y1)
}

/// Parameters of the cross-detector merge rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuseParams {
    pub iou_thresh: f64,
    pub min_w: i64,
    pub min_h: i64,
    /// Classes for which secondary detections are considered at all.
    pub class_filter: ClassSet,
}

impl Default for FuseParams {
    fn default() -> Self {
        FuseParams {
            iou_thresh: 0.5,
            min_w: 50,
            min_h: 50,
            class_filter: ClassSet::of(&[WEED]),
        }
    }
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Output order: class, descending score, then `x_min`, `y_min`.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then_with(|| by_score_desc(a, b))
            .then_with(|| a.bbox.x_min.cmp(&b.bbox.x_min))
            .then_with(|| a.bbox.y_min.cmp(&b.bbox.y_min))
    });
}

/// Whether a secondary candidate clears the size rule: strictly larger than
/// the minimum in both width and height.
pub fn passes_size(d: &Detection, params: &FuseParams) -> bool {
    d.bbox.width() > params.min_w && d.bbox.height() > params.min_h
}

/// Merges secondary detections into the primary list.
///
/// Every primary detection is kept. Secondary candidates of a filtered class
/// are visited in descending score order and accepted when they pass the size
/// rule and overlap no already-accepted detection of the same class at
/// `iou_thresh` or more.
pub fn fuse_detections(
    primary: &[Detection],
    secondary: &[Detection],
    params: &FuseParams,
) -> Vec<Detection> {
    let mut accepted: Vec<Detection> = primary.to_vec();
    let mut candidates: Vec<&Detection> = secondary
        .iter()
        .filter(|d| params.class_filter.contains(d.class_id))
        .collect();
    candidates.sort_by(|a, b| by_score_desc(a, b));

    for d in candidates {
        if !passes_size(d, params) {
            continue;
        }
        let duplicate = accepted
            .iter()
            .any(|p| p.class_id == d.class_id && box_iou(&p.bbox, &d.bbox) >= params.iou_thresh);
        if !duplicate {
            accepted.push(*d);
        }
    }
    sort_detections(&mut accepted);
    accepted
}
