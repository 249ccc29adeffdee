//! Semantic IoU, panoptic quality and the hierarchical six-column report.
//!
//! Everything accumulated before [`finalize`] is an integer count, so
//! accumulators can be merged in any order or tree shape and still finalize
//! to bit-identical results.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{
    ensure_same_dims, remap_classes, segments_of, ClassRemap, ClassSet, LabelMap, PanopticSample,
    Segment, CROP, IGNORE, NUM_CLASSES, SOIL, WEED,
};

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn class_count(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel pair. Ground-truth pixels equal to
    /// [`IGNORE`] or listed in `ignore` are skipped.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: ClassSet) -> Result<()> {
        ensure_same_dims(pred.dims(), gt.dims())?;
        let n = self.n;
        let check = |c: u8| {
            if (c as usize) < n {
                Ok(c as usize)
            } else {
                Err(Error::ClassOutOfRange { class: c, count: n })
            }
        };
        // validate first so a failed update leaves the counts untouched
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE || ignore.contains(g) {
                continue;
            }
            check(g)?;
            check(p)?;
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE || ignore.contains(g) {
                continue;
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::ConfigMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU: diagonal over (row sum + column sum - diagonal). `None`
/// for classes absent from both ground truth and prediction.
pub fn iou_per_class(confusion: &ConfusionMatrix) -> Vec<Option<f64>> {
    let n = confusion.n;
    (0..n)
        .map(|c| {
            let diag = confusion.get(c, c);
            let row: u64 = (0..n).map(|p| confusion.get(c, p)).sum();
            let col: u64 = (0..n).map(|g| confusion.get(g, c)).sum();
            let denom = row + col - diag;
            (denom > 0).then(|| diag as f64 / denom as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchedPair {
    /// Index into the ground-truth segment list.
    pub gt: usize,
    /// Index into the predicted segment list.
    pub pred: usize,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegMatching {
    pub tp: Vec<MatchedPair>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

fn single_class(segs: &[Segment]) -> Result<Option<u8>> {
    let class = segs.first().map(|s| s.class_id);
    if segs.iter().any(|s| Some(s.class_id) != class) {
        return Err(Error::MixedClasses);
    }
    Ok(class)
}

/// Whether `intersection / union` strictly exceeds `threshold`.
#[inline]
pub fn exceeds(intersection: u64, union: u64, threshold: f64) -> bool {
    union > 0 && intersection as f64 > threshold * union as f64
}

/// Matches predicted to ground-truth segments of one class.
///
/// A pair is a true positive when its pixel IoU is strictly above
/// `threshold`. For thresholds of at least 0.5 each segment can overlap at
/// most one partner that much, so the matching is unique.
pub fn match_segments(pred: &[Segment], gt: &[Segment], threshold: f64) -> Result<SegMatching> {
    if !(0.5..1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "matching threshold must lie in [0.5, 1), got {threshold}"
        )));
    }
    let pc = single_class(pred)?;
    let gc = single_class(gt)?;
    if let (Some(p), Some(g)) = (pc, gc) {
        if p != g {
            return Err(Error::MixedClasses);
        }
    }

    let mut pred_matched = vec![false; pred.len()];
    let mut out = SegMatching::default();
    for (gi, g) in gt.iter().enumerate() {
        let mut hit = None;
        for (pi, p) in pred.iter().enumerate() {
            if pred_matched[pi] {
                continue;
            }
            let (inter, union) = g.iou(p);
            if exceeds(inter, union, threshold) {
                hit = Some(MatchedPair {
                    gt: gi,
                    pred: pi,
                    intersection: inter,
                    union,
                });
                break;
            }
        }
        match hit {
            Some(m) => {
                pred_matched[m.pred] = true;
                out.tp.push(m);
            }
            None => out.fn_.push(gi),
        }
    }
    out.fp = (0..pred.len()).filter(|&i| !pred_matched[i]).collect();
    Ok(out)
}

/// PQ with its SQ and RQ factors, as ratios in `[0, 1]` or as percentages
/// depending on context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PqValues {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl PqValues {
    fn scaled(self, k: f64) -> PqValues {
        PqValues {
            pq: self.pq * k,
            sq: self.sq * k,
            rq: self.rq * k,
        }
    }
}

fn pq_from_sorted_ratios(
    ratios: impl Iterator<Item = f64>,
    tp: u64,
    fp: u64,
    fn_: u64,
) -> Option<PqValues> {
    if tp + fp + fn_ == 0 {
        return None;
    }
    let iou_sum: f64 = ratios.sum();
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    let rq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    Some(PqValues {
        pq: sq * rq,
        sq,
        rq,
    })
}

/// PQ = SQ x RQ from matched `(intersection, union)` pairs and the FP/FN
/// counts. `None` when there is nothing to score.
///
/// Pair ratios are summed in sorted order so the result does not depend on
/// the order of `tp_pairs`.
pub fn pq_from_counts(tp_pairs: &[(u64, u64)], fp: u64, fn_: u64) -> Option<PqValues> {
    let mut pairs = tp_pairs.to_vec();
    pairs.sort_unstable();
    pq_from_sorted_ratios(
        pairs.iter().map(|&(i, u)| i as f64 / u as f64),
        pairs.len() as u64,
        fp,
        fn_,
    )
}

/// Integer PQ state for one thing category.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PqCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Multiset of matched `(intersection, union)` pairs.
    pub pairs: BTreeMap<(u64, u64), u64>,
}

impl PqCounts {
    pub fn add_matching(&mut self, m: &SegMatching) {
        self.tp += m.tp.len() as u64;
        self.fp += m.fp.len() as u64;
        self.fn_ += m.fn_.len() as u64;
        for p in &m.tp {
            *self.pairs.entry((p.intersection, p.union)).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &PqCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        for (k, v) in &other.pairs {
            *self.pairs.entry(*k).or_default() += v;
        }
    }

    pub fn values(&self) -> Option<PqValues> {
        let ratios = self
            .pairs
            .iter()
            .flat_map(|(&(i, u), &n)| std::iter::repeat_n(i as f64 / u as f64, n as usize));
        pq_from_sorted_ratios(ratios, self.tp, self.fp, self.fn_)
    }
}

/// Options shared by every evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub class_count: usize,
    /// Applied to both prediction and ground truth before scoring.
    pub remap: ClassRemap,
    /// Ground-truth classes whose pixels are left out of every metric.
    pub ignore_classes: ClassSet,
    pub match_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            class_count: NUM_CLASSES,
            remap: ClassRemap::fold_partials(),
            ignore_classes: ClassSet::empty(),
            match_threshold: 0.5,
        }
    }
}

/// Mergeable evaluation state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsAccumulator {
    pub confusion: ConfusionMatrix,
    /// Crop plants, matched on the plant-instance layer.
    pub crop: PqCounts,
    /// Leaves, matched on the leaf-instance layer.
    pub leaf: PqCounts,
    pub samples: u64,
}

impl MetricsAccumulator {
    pub fn new(class_count: usize) -> Self {
        MetricsAccumulator {
            confusion: ConfusionMatrix::new(class_count),
            crop: PqCounts::default(),
            leaf: PqCounts::default(),
            samples: 0,
        }
    }

    pub fn for_config(cfg: &EvalConfig) -> Self {
        Self::new(cfg.class_count)
    }

    pub fn confusion_update(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        ignore: ClassSet,
    ) -> Result<()> {
        self.confusion.update(pred, gt, ignore)
    }

    pub fn merge_from(&mut self, other: &MetricsAccumulator) -> Result<()> {
        self.confusion.merge(&other.confusion)?;
        self.crop.merge(&other.crop);
        self.leaf.merge(&other.leaf);
        self.samples += other.samples;
        Ok(())
    }
}

/// Elementwise sum of two accumulators.
pub fn merge(a: &MetricsAccumulator, b: &MetricsAccumulator) -> Result<MetricsAccumulator> {
    let mut out = a.clone();
    out.merge_from(b)?;
    Ok(out)
}

fn layer_counts(
    pred_sem: &LabelMap,
    pred_inst: &crate::mask::InstanceMap,
    gt_sem: &LabelMap,
    gt_inst: &crate::mask::InstanceMap,
    threshold: f64,
) -> Result<SegMatching> {
    let things = ClassSet::of(&[CROP]);
    let gt_segs = segments_of(gt_sem, gt_inst, things)?;
    let pred_segs = segments_of(pred_sem, pred_inst, things)?;
    match_segments(&pred_segs, &gt_segs, threshold)
}

/// Scores one prediction against its ground truth and adds the counts to
/// `acc`.
///
/// Semantics feed the confusion matrix. Crop plants are matched on the plant
/// layer and leaves on the leaf layer; weeds are scored only semantically.
/// Ignored ground-truth pixels only leave the confusion matrix; there is no
/// void rule for segments, so an unmatched prediction is always a full FP.
pub fn evaluate_sample(
    acc: &mut MetricsAccumulator,
    pred: &PanopticSample,
    gt: &PanopticSample,
    cfg: &EvalConfig,
) -> Result<()> {
    if acc.confusion.class_count() != cfg.class_count {
        return Err(Error::ConfigMismatch);
    }
    ensure_same_dims(pred.dims(), gt.dims())?;
    let gt_sem = remap_classes(&gt.semantics, &cfg.remap)?;
    let pred_sem = remap_classes(&pred.semantics, &cfg.remap)?;

    let mut local = MetricsAccumulator::new(cfg.class_count);
    local
        .confusion
        .update(&pred_sem, &gt_sem, cfg.ignore_classes)?;

    let plant = layer_counts(
        &pred_sem,
        &pred.plant_instances,
        &gt_sem,
        &gt.plant_instances,
        cfg.match_threshold,
    )?;
    let leaf = layer_counts(
        &pred_sem,
        &pred.leaf_instances,
        &gt_sem,
        &gt.leaf_instances,
        cfg.match_threshold,
    )?;
    local.crop.add_matching(&plant);
    local.leaf.add_matching(&leaf);
    local.samples = 1;
    acc.merge_from(&local)
}

/// The six-column result row, in percent. `None` marks an undefined value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HierReport {
    pub iou_soil: Option<f64>,
    pub iou_weed: Option<f64>,
    pub pq_leaf: Option<f64>,
    pub pq_crop: Option<f64>,
    pub pq: Option<f64>,
    pub pq_plus: Option<f64>,
    pub crop: Option<PqValues>,
    pub leaf: Option<PqValues>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// PQ and PQ+ from the four per-class columns (any scale, usually percent).
///
/// PQ is the mean of the leaf and crop PQ; PQ+ the mean of soil IoU, weed
/// IoU, leaf PQ and crop PQ. Undefined inputs are left out of each mean.
pub fn hierarchical_means(
    iou_soil: Option<f64>,
    iou_weed: Option<f64>,
    pq_leaf: Option<f64>,
    pq_crop: Option<f64>,
) -> (Option<f64>, Option<f64>) {
    (
        mean_defined(&[pq_leaf, pq_crop]),
        mean_defined(&[iou_soil, iou_weed, pq_leaf, pq_crop]),
    )
}

pub fn finalize(acc: &MetricsAccumulator) -> HierReport {
    let ious = iou_per_class(&acc.confusion);
    let pct = |v: Option<f64>| v.map(|v| v * 100.0);
    let iou_soil = pct(ious.get(SOIL as usize).copied().flatten());
    let iou_weed = pct(ious.get(WEED as usize).copied().flatten());
    let crop = acc.crop.values().map(|v| v.scaled(100.0));
    let leaf = acc.leaf.values().map(|v| v.scaled(100.0));
    let pq_crop = crop.map(|v| v.pq);
    let pq_leaf = leaf.map(|v| v.pq);
    let (pq, pq_plus) = hierarchical_means(iou_soil, iou_weed, pq_leaf, pq_crop);

    let mut warnings = Vec::new();
    for (name, v) in [
        ("iou_soil", iou_soil),
        ("iou_weed", iou_weed),
        ("pq_leaf", pq_leaf),
        ("pq_crop", pq_crop),
    ] {
        if v.is_none() {
            let msg = format!(
                "{name} is undefined (no pixels or segments) and was left out of the means"
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    HierReport {
        iou_soil,
        iou_weed,
        pq_leaf,
        pq_crop,
        pq,
        pq_plus,
        crop,
        leaf,
        warnings,
    }
}

/// Formats `value` with two decimals, rounding half up on its shortest
/// decimal representation.
pub fn round_half_up_2dp(value: f64) -> String {
    let neg = value < 0.0;
    let s = format!("{}", value.abs());
    let (int_part, frac_part) = s.split_once('.').unwrap_or((&s, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(2))
        .map(|b| b - b'0')
        .collect();
    if frac_part.as_bytes().get(2).is_some_and(|&d| d >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 2;
    let text: String = digits.iter().map(|d| (d + b'0') as char).collect();
    format!(
        "{}{}.{}",
        if neg { "-" } else { "" },
        &text[..split],
        &text[split..]
    )
}

impl fmt::Display for HierReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), round_half_up_2dp);
        write!(
            f,
            "IoU(soil) {}  IoU(weed) {}  PQ(leaf) {}  PQ(crop) {}  PQ {}  PQ+ {}",
            show(self.iou_soil),
            show(self.iou_weed),
            show(self.pq_leaf),
            show(self.pq_crop),
            show(self.pq),
            show(self.pq_plus)
        )
    }
}
