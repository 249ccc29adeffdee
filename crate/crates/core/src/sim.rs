//! Synthetic crop/weed samples and a mock of the detect, prompt, segment
//! pipeline.
//!
//! The detector and segmenter are stand-ins driven by corruption knobs
//! ([`SimConfig`]) applied to ground truth. All randomness is drawn from
//! streams keyed by `(seed, sample, level, profile, instance)`, so samples
//! and instances can be processed in any order.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::boxprompt::{
    clip_box, fuse_detections, jitter_box, BBox, Detection, FuseParams, JitterPolicy, Source,
};
use crate::error::{Error, Result};
use crate::mask::{
    boxes_from_instances, segments_of, BinaryMask, ClassSet, InstanceMap, LabelMap, PanopticSample,
    CROP, MAX_INSTANCES, SOIL, WEED,
};
use crate::rng;

const GEN_STREAM: u64 = 0x67656e;
const DETECT_STREAM: u64 = 0x646574;
const SPURIOUS_STREAM: u64 = 0x737075;
const SEGMENT_STREAM: u64 = 0x736567;

/// Fraction of a spurious prompt's box filled by its elliptical mask.
pub const SPURIOUS_FILL: f64 = 0.6;

const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Plant,
    Leaf,
}

impl Level {
    fn key(self) -> u64 {
        match self {
            Level::Plant => 1,
            Level::Leaf => 2,
        }
    }

    pub fn instances(self, sample: &PanopticSample) -> &InstanceMap {
        match self {
            Level::Plant => &sample.plant_instances,
            Level::Leaf => &sample.leaf_instances,
        }
    }
}

/// Corruption knobs standing in for real detector and segmenter error.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Probability that a ground-truth instance gets no box.
    pub detector_dropout: f64,
    /// Expected number of spurious boxes per image and level.
    pub spurious_rate: f64,
    pub box_jitter: JitterPolicy,
    /// Erosion applied to each mask, in pixels.
    pub mask_erosion: u32,
    /// Per-pixel flip probability on mask boundaries.
    pub mask_noise: f64,
    pub seed: u64,
    /// Simulate a second detector at plant level and fuse its boxes in.
    pub secondary_detector: bool,
    /// Minimum side length for fused secondary boxes.
    pub fuse_min_size: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            detector_dropout: 0.1,
            spurious_rate: 0.5,
            box_jitter: JitterPolicy::default(),
            mask_erosion: 1,
            mask_noise: 0.1,
            seed: 0,
            secondary_detector: false,
            fuse_min_size: 50,
        }
    }
}

impl SimConfig {
    /// Configuration under which the pipeline reproduces ground truth.
    pub fn zero_corruption() -> Self {
        SimConfig {
            detector_dropout: 0.0,
            spurious_rate: 0.0,
            box_jitter: JitterPolicy::none(),
            mask_erosion: 0,
            mask_noise: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {v}"
                )))
            }
        };
        prob("detector_dropout", self.detector_dropout)?;
        prob("mask_noise", self.mask_noise)?;
        if !(self.spurious_rate >= 0.0 && self.spurious_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spurious_rate must be >= 0, got {}",
                self.spurious_rate
            )));
        }
        if self.fuse_min_size < 0 {
            return Err(Error::InvalidParameter("fuse_min_size must be >= 0".into()));
        }
        self.box_jitter.validate()
    }

    /// Parses `key = value` lines. Keys are the field names, with the jitter
    /// policy spelled `box_jitter.fraction`, `box_jitter.cap` and
    /// `box_jitter.seed`. Missing keys keep their defaults.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut cfg = SimConfig::default();
        for entry in parse_kv(text, source)? {
            let KvEntry { line, key, value } = entry;
            let bad = |reason: String| Error::Parse {
                path: source.to_path_buf(),
                line,
                reason,
            };
            match key.as_str() {
                "detector_dropout" => cfg.detector_dropout = parse_num(&value, line, source)?,
                "spurious_rate" => cfg.spurious_rate = parse_num(&value, line, source)?,
                "box_jitter.fraction" => cfg.box_jitter.fraction = parse_num(&value, line, source)?,
                "box_jitter.cap" => cfg.box_jitter.cap = parse_num(&value, line, source)?,
                "box_jitter.seed" => cfg.box_jitter.seed = parse_num(&value, line, source)?,
                "mask_erosion" => cfg.mask_erosion = parse_num(&value, line, source)?,
                "mask_noise" => cfg.mask_noise = parse_num(&value, line, source)?,
                "seed" => cfg.seed = parse_num(&value, line, source)?,
                "secondary_detector" => cfg.secondary_detector = parse_num(&value, line, source)?,
                "fuse_min_size" => cfg.fuse_min_size = parse_num(&value, line, source)?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "detector_dropout = {}\nspurious_rate = {}\nbox_jitter.fraction = {}\nbox_jitter.cap = {}\nbox_jitter.seed = {}\nmask_erosion = {}\nmask_noise = {}\nseed = {}\nsecondary_detector = {}\nfuse_min_size = {}\n",
            self.detector_dropout,
            self.spurious_rate,
            self.box_jitter.fraction,
            self.box_jitter.cap,
            self.box_jitter.seed,
            self.mask_erosion,
            self.mask_noise,
            self.seed,
            self.secondary_detector,
            self.fuse_min_size,
        )
    }
}

/// Parameters of one synthetic field image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub crop_count: usize,
    pub weed_count: usize,
    /// Inclusive range of leaves per crop plant.
    pub leaves_per_crop: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 256,
            height: 256,
            crop_count: 4,
            weed_count: 6,
            leaves_per_crop: (3, 6),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::InvalidParameter(format!(
                "synthetic images must be at least 64x64, got {}x{}",
                self.width, self.height
            )));
        }
        let (lo, hi) = self.leaves_per_crop;
        if lo == 0 || lo > hi || hi > 16 {
            return Err(Error::InvalidParameter(format!(
                "leaves_per_crop must be a range within 1..=16, got {lo}..{hi}"
            )));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `leaves_per_crop` is `n` or `min..max`
    /// (inclusive).
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for KvEntry { line, key, value } in parse_kv(text, source)? {
            match key.as_str() {
                "width" => spec.width = parse_num(&value, line, source)?,
                "height" => spec.height = parse_num(&value, line, source)?,
                "crop_count" => spec.crop_count = parse_num(&value, line, source)?,
                "weed_count" => spec.weed_count = parse_num(&value, line, source)?,
                "seed" => spec.seed = parse_num(&value, line, source)?,
                "leaves_per_crop" => {
                    spec.leaves_per_crop = match value.split_once("..") {
                        Some((a, b)) => (
                            parse_num(a.trim(), line, source)?,
                            parse_num(b.trim().trim_start_matches('='), line, source)?,
                        ),
                        None => {
                            let n = parse_num(&value, line, source)?;
                            (n, n)
                        }
                    }
                }
                other => {
                    return Err(Error::Parse {
                        path: source.to_path_buf(),
                        line,
                        reason: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

struct KvEntry {
    line: usize,
    key: String,
    value: String,
}

fn parse_kv(text: &str, source: &Path) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            reason: format!("expected key = value, got {line:?}"),
        })?;
        let key = key.trim().to_string();
        if out.iter().any(|e| e.key == key) {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                reason: format!("duplicate key {key:?}"),
            });
        }
        out.push(KvEntry {
            line: i + 1,
            key,
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, source: &Path) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        path: source.to_path_buf(),
        line,
        reason: format!("invalid value {value:?}"),
    })
}

struct Placed {
    cx: f64,
    cy: f64,
    r: f64,
}

fn place(
    rng: &mut impl Rng,
    placed: &[Placed],
    (w, h): (usize, usize),
    r_range: (f64, f64),
    what: &str,
) -> Result<Placed> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = rng.random_range(r_range.0..=r_range.1);
        if 2.0 * r + 4.0 > w.min(h) as f64 {
            continue;
        }
        let cx = rng.random_range(r + 2.0..=w as f64 - r - 2.0);
        let cy = rng.random_range(r + 2.0..=h as f64 - r - 2.0);
        let clear = placed
            .iter()
            .all(|p| (p.cx - cx).hypot(p.cy - cy) > p.r + r + 3.0);
        if clear {
            return Ok(Placed { cx, cy, r });
        }
    }
    Err(Error::Capacity {
        what: what.to_string(),
        attempts: PLACEMENT_ATTEMPTS,
    })
}

fn pixel_span(c: f64, r: f64, limit: usize) -> std::ops::Range<usize> {
    let lo = (c - r - 1.0).floor().max(0.0) as usize;
    let hi = ((c + r + 1.0).ceil() as usize).min(limit);
    lo..hi
}

/// Draws a synthetic field: crops as rosettes of leaf lobes, weeds as small
/// elliptical blobs, no two plants touching.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<PanopticSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let s = w.min(h) as f64;
    let crop_r = ((s / 14.0).max(6.0), (s / 8.0).max(8.0));
    let weed_r = ((s / 40.0).max(2.0), (s / 20.0).max(3.0));
    if spec.crop_count + spec.weed_count > MAX_INSTANCES {
        return Err(Error::TooManyInstances(spec.crop_count + spec.weed_count));
    }

    let mut rng = rng::stream(spec.seed, &[GEN_STREAM]);
    let mut placed = Vec::with_capacity(spec.crop_count + spec.weed_count);
    for i in 0..spec.crop_count {
        placed.push(place(
            &mut rng,
            &placed,
            (w, h),
            crop_r,
            &format!("crop {i}"),
        )?);
    }
    for i in 0..spec.weed_count {
        placed.push(place(
            &mut rng,
            &placed,
            (w, h),
            weed_r,
            &format!("weed {i}"),
        )?);
    }

    let mut sample = PanopticSample::empty(w, h)?;
    let mut next_leaf: usize = 1;
    for (i, p) in placed.iter().enumerate() {
        let plant_id = (i + 1) as u16;
        let mut prng = rng::stream(spec.seed, &[GEN_STREAM, plant_id as u64]);
        if i < spec.crop_count {
            let k = prng.random_range(spec.leaves_per_crop.0..=spec.leaves_per_crop.1);
            let phase = prng.random_range(0.0..2.0 * PI);
            let reach: Vec<f64> = (0..k).map(|_| prng.random_range(0.75..=1.0)).collect();
            let sector = 2.0 * PI / k as f64;
            let mut used = vec![0usize; k];
            let mut lobe_of = Vec::new();
            for y in pixel_span(p.cy, p.r, h) {
                for x in pixel_span(p.cx, p.r, w) {
                    let (dx, dy) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
                    let d = dx.hypot(dy);
                    let a = (dy.atan2(dx) - phase).rem_euclid(2.0 * PI);
                    let lobe = ((a / sector) as usize).min(k - 1);
                    let local = a - (lobe as f64 + 0.5) * sector;
                    let limit = p.r * reach[lobe] * (0.55 + 0.45 * (local * k as f64 / 2.0).cos());
                    if d <= limit {
                        used[lobe] += 1;
                        lobe_of.push((x, y, lobe));
                    }
                }
            }
            // lobes too thin to hold a pixel are skipped so leaf IDs stay dense
            let mut leaf_id = vec![0u16; k];
            for (lobe, &n) in used.iter().enumerate() {
                if n > 0 {
                    if next_leaf > MAX_INSTANCES {
                        return Err(Error::TooManyInstances(next_leaf));
                    }
                    leaf_id[lobe] = next_leaf as u16;
                    next_leaf += 1;
                }
            }
            for (x, y, lobe) in lobe_of {
                sample.semantics.set(x, y, CROP);
                sample.plant_instances.set(x, y, plant_id);
                sample.leaf_instances.set(x, y, leaf_id[lobe]);
            }
        } else {
            let ax = p.r * prng.random_range(0.7..=1.0);
            let ay = p.r * prng.random_range(0.5..=0.9);
            let theta = prng.random_range(0.0..PI);
            let (c, sn) = (theta.cos(), theta.sin());
            for y in pixel_span(p.cy, p.r, h) {
                for x in pixel_span(p.cx, p.r, w) {
                    let (dx, dy) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
                    let (u, v) = (dx * c + dy * sn, -dx * sn + dy * c);
                    if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                        sample.semantics.set(x, y, WEED);
                        sample.plant_instances.set(x, y, plant_id);
                    }
                }
            }
        }
    }
    Ok(sample)
}

/// Binary mask restricted to a window of the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    pub window: BBox,
    /// Window-sized grid, origin at the window's top-left corner.
    pub mask: BinaryMask,
}

impl ObjectMask {
    pub fn empty(window: BBox) -> Self {
        let mask = BinaryMask::filled(window.width() as usize, window.height() as usize, false)
            .expect("window is non-degenerate");
        ObjectMask { window, mask }
    }

    pub fn count(&self) -> usize {
        self.mask.count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as i64, y as i64);
        if x < self.window.x_min
            || x >= self.window.x_max
            || y < self.window.y_min
            || y >= self.window.y_max
        {
            return false;
        }
        self.mask.get(
            (x - self.window.x_min) as usize,
            (y - self.window.y_min) as usize,
        )
    }

    /// Image coordinates of the foreground pixels in raster order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.mask.width();
        let (x0, y0) = (self.window.x_min as usize, self.window.y_min as usize);
        self.mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (x0 + i % w, y0 + i / w))
    }

    pub fn to_full(&self, width: usize, height: usize) -> Result<BinaryMask> {
        let mut full = BinaryMask::filled(width, height, false)?;
        for (x, y) in self.pixels() {
            if x < width && y < height {
                full.set(x, y, true);
            }
        }
        Ok(full)
    }
}

fn erode_once(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let interior = (y > 0 && y + 1 < h && x > 0 && x + 1 < w)
                && (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask.get(xx, yy)));
            if !interior {
                out.set(x, y, false);
            }
        }
    }
    out
}

fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = mask.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = mask.get(x, y);
            let differs = |xx: Option<usize>, yy: Option<usize>| match (xx, yy) {
                (Some(xx), Some(yy)) if xx < w && yy < h => mask.get(xx, yy) != v,
                _ => v,
            };
            if differs(x.checked_sub(1), Some(y))
                || differs(Some(x + 1), Some(y))
                || differs(Some(x), y.checked_sub(1))
                || differs(Some(x), Some(y + 1))
            {
                out.push((x, y));
            }
        }
    }
    out
}

/// Ground-truth lookup shared by every prompt of one level.
pub struct Segmenter<'a> {
    instances: &'a InstanceMap,
    areas: Vec<u64>,
    cfg: &'a SimConfig,
    level: Level,
    sample_key: u64,
}

impl<'a> Segmenter<'a> {
    pub fn new(gt: &'a PanopticSample, cfg: &'a SimConfig, level: Level, sample_key: u64) -> Self {
        let instances = level.instances(gt);
        let mut areas = vec![0u64; u16::MAX as usize + 1];
        for &id in instances.data() {
            areas[id as usize] += 1;
        }
        Segmenter {
            instances,
            areas,
            cfg,
            level,
            sample_key,
        }
    }

    /// Ground-truth instance the prompt box covers, if it covers at least
    /// half of that instance's pixels.
    fn target(&self, bbox: &BBox) -> Option<u16> {
        let mut counts: Vec<(u16, u64)> = Vec::new();
        for y in bbox.y_min as usize..bbox.y_max as usize {
            for x in bbox.x_min as usize..bbox.x_max as usize {
                let id = self.instances.get(x, y);
                if id == 0 {
                    continue;
                }
                match counts.iter_mut().find(|(i, _)| *i == id) {
                    Some(c) => c.1 += 1,
                    None => counts.push((id, 1)),
                }
            }
        }
        let (id, n) = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))?;
        (2 * n >= self.areas[id as usize]).then_some(id)
    }

    pub fn segment(&self, prompt: &Detection) -> Result<ObjectMask> {
        let (w, h) = self.instances.dims();
        let bbox = clip_box(&prompt.bbox, w, h)?;
        let mut rng = rng::stream(
            self.cfg.seed,
            &[
                SEGMENT_STREAM,
                self.sample_key,
                self.level.key(),
                bbox.x_min as u64,
                bbox.y_min as u64,
                bbox.x_max as u64,
                bbox.y_max as u64,
                prompt.class_id as u64,
            ],
        );

        let mut out = match self.target(&bbox) {
            Some(id) => {
                let margin = (bbox.width().max(bbox.height()) as f64 * 0.1).ceil() as i64;
                let window = clip_box(&bbox.expand(margin), w, h)?;
                let mut om = ObjectMask::empty(window);
                for y in window.y_min..window.y_max {
                    for x in window.x_min..window.x_max {
                        if self.instances.get(x as usize, y as usize) == id {
                            om.mask.set(
                                (x - window.x_min) as usize,
                                (y - window.y_min) as usize,
                                true,
                            );
                        }
                    }
                }
                om
            }
            None => spurious_mask(bbox),
        };

        for _ in 0..self.cfg.mask_erosion {
            if out.is_empty() {
                break;
            }
            out.mask = erode_once(&out.mask);
        }
        if self.cfg.mask_noise > 0.0 && !out.is_empty() {
            for (x, y) in boundary(&out.mask) {
                if rng.random::<f64>() < self.cfg.mask_noise {
                    let v = out.mask.get(x, y);
                    out.mask.set(x, y, !v);
                }
            }
        }
        Ok(out)
    }
}

fn spurious_mask(bbox: BBox) -> ObjectMask {
    let mut om = ObjectMask::empty(bbox);
    // inscribed ellipse covers pi/4 of the box; shrink it to SPURIOUS_FILL
    let k = (SPURIOUS_FILL / (PI / 4.0)).sqrt();
    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    let (ax, ay) = (bw / 2.0 * k, bh / 2.0 * k);
    for y in 0..bbox.height() as usize {
        for x in 0..bbox.width() as usize {
            let (dx, dy) = (x as f64 + 0.5 - bw / 2.0, y as f64 + 0.5 - bh / 2.0);
            if (dx / ax).powi(2) + (dy / ay).powi(2) <= 1.0 {
                om.mask.set(x, y, true);
            }
        }
    }
    om
}

/// Mock detector: one jittered box per surviving ground-truth instance plus
/// spurious boxes.
///
/// `profile` distinguishes simulated detectors (0 primary, 1 secondary).
pub fn mock_detect(
    gt: &PanopticSample,
    cfg: &SimConfig,
    level: Level,
    sample_key: u64,
    profile: u64,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (w, h) = gt.dims();
    let source = if profile == 0 {
        Source::PrimaryDetector
    } else {
        Source::SecondaryDetector
    };
    let instances = level.instances(gt);
    let classes: Vec<(u16, u8)> = match level {
        Level::Plant => segments_of(&gt.semantics, instances, ClassSet::of(&[CROP, WEED]))?
            .into_iter()
            .map(|s| (s.instance_id, s.class_id))
            .collect(),
        Level::Leaf => Vec::new(),
    };
    let class_of = |id: u16| match level {
        Level::Leaf => CROP,
        Level::Plant => classes
            .binary_search_by_key(&id, |c| c.0)
            .map(|i| classes[i].1)
            .unwrap_or(CROP),
    };

    let mut out = Vec::new();
    for (id, bbox) in boxes_from_instances(instances) {
        let keys = [DETECT_STREAM, sample_key, level.key(), profile, id as u64];
        let mut irng = rng::stream(cfg.seed, &keys);
        // dropout draw comes first so survivors are nested across dropout levels
        if irng.random::<f64>() < cfg.detector_dropout {
            continue;
        }
        let score = 0.5 + 0.5 * irng.random::<f64>();
        let jittered = jitter_box(
            &bbox,
            &cfg.box_jitter,
            w,
            h,
            rng::derive_key(cfg.seed, &keys),
        )?;
        out.push(Detection::new(jittered, class_of(id), score, source)?);
    }

    if cfg.spurious_rate > 0.0 {
        let mut srng = rng::stream(
            cfg.seed,
            &[SPURIOUS_STREAM, sample_key, level.key(), profile],
        );
        let n = Poisson::new(cfg.spurious_rate)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(&mut srng) as usize;
        let s = w.min(h) as f64;
        for _ in 0..n {
            let bw = srng.random_range((s / 16.0).max(2.0)..=(s / 6.0).max(3.0)) as i64;
            let bh = srng.random_range((s / 16.0).max(2.0)..=(s / 6.0).max(3.0)) as i64;
            let (bw, bh) = (bw.min(w as i64), bh.min(h as i64));
            let x0 = srng.random_range(0..=w as i64 - bw);
            let y0 = srng.random_range(0..=h as i64 - bh);
            let class_id = match level {
                Level::Plant if srng.random::<bool>() => WEED,
                _ => CROP,
            };
            let score = srng.random_range(0.05..0.5);
            out.push(Detection::new(
                BBox::new(x0, y0, x0 + bw, y0 + bh)?,
                class_id,
                score,
                source,
            )?);
        }
    }
    Ok(out)
}

/// Mock promptable segmenter for a single prompt.
///
/// The prompt selects the ground-truth instance it covers best; that
/// instance's pixels inside a margin-expanded box are eroded and boundary
/// flipped. A box covering no instance adequately yields an ellipse filling
/// [`SPURIOUS_FILL`] of the box.
pub fn mock_segment(
    prompt: &Detection,
    gt: &PanopticSample,
    cfg: &SimConfig,
    level: Level,
    sample_key: u64,
) -> Result<ObjectMask> {
    Segmenter::new(gt, cfg, level, sample_key).segment(prompt)
}

/// Flattens masks into one label layer and one instance layer.
///
/// Instance IDs follow input order over non-empty masks. A pixel claimed by
/// several masks goes to the higher score, then the lower instance ID.
pub fn assemble_layer(
    masks: &[(Detection, ObjectMask)],
    width: usize,
    height: usize,
) -> Result<(LabelMap, InstanceMap)> {
    let mut labels = LabelMap::filled(width, height, SOIL)?;
    let mut instances = InstanceMap::filled(width, height, 0)?;
    let live: Vec<(u16, &(Detection, ObjectMask))> = masks
        .iter()
        .filter(|(_, m)| !m.is_empty())
        .enumerate()
        .map(|(i, m)| {
            if i >= MAX_INSTANCES {
                Err(Error::TooManyInstances(i + 1))
            } else {
                Ok(((i + 1) as u16, m))
            }
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..live.len()).collect();
    order.sort_by(|&a, &b| {
        live[b]
            .1
             .0
            .score
            .total_cmp(&live[a].1 .0.score)
            .then(live[a].0.cmp(&live[b].0))
    });
    let mut claimed = BinaryMask::filled(width, height, false)?;
    for i in order {
        let (id, (det, mask)) = live[i];
        let is_plant = det.class_id == CROP || det.class_id == WEED;
        for (x, y) in mask.pixels() {
            if x >= width || y >= height || claimed.get(x, y) {
                continue;
            }
            claimed.set(x, y, true);
            labels.set(x, y, det.class_id);
            if is_plant {
                instances.set(x, y, id);
            }
        }
    }
    Ok((labels, instances))
}

/// Builds a panoptic prediction from plant-level and leaf-level masks.
///
/// Semantics come from the plant layer. Leaf pixels that do not land on a
/// predicted crop are dropped to keep the hierarchy consistent.
pub fn assemble_panoptic(
    plant_masks: &[(Detection, ObjectMask)],
    leaf_masks: &[(Detection, ObjectMask)],
    width: usize,
    height: usize,
) -> Result<PanopticSample> {
    let (semantics, plant_instances) = assemble_layer(plant_masks, width, height)?;
    let (_, mut leaf_instances) = assemble_layer(leaf_masks, width, height)?;
    for ((leaf, &class), &plant) in leaf_instances
        .data_mut()
        .iter_mut()
        .zip(semantics.data())
        .zip(plant_instances.data())
    {
        if class != CROP || plant == 0 {
            *leaf = 0;
        }
    }
    PanopticSample::new(semantics, plant_instances, leaf_instances)
}

fn segment_all(
    dets: Vec<Detection>,
    gt: &PanopticSample,
    cfg: &SimConfig,
    level: Level,
    sample_key: u64,
) -> Result<Vec<(Detection, ObjectMask)>> {
    let seg = Segmenter::new(gt, cfg, level, sample_key);
    dets.into_iter()
        .map(|d| Ok((d, seg.segment(&d)?)))
        .collect()
}

/// Plant-level prompts, fused with the secondary detector when enabled.
pub fn plant_prompts(
    gt: &PanopticSample,
    cfg: &SimConfig,
    sample_key: u64,
) -> Result<Vec<Detection>> {
    let primary = mock_detect(gt, cfg, Level::Plant, sample_key, 0)?;
    if !cfg.secondary_detector {
        return Ok(primary);
    }
    let secondary = mock_detect(gt, cfg, Level::Plant, sample_key, 1)?;
    let params = FuseParams {
        min_w: cfg.fuse_min_size,
        min_h: cfg.fuse_min_size,
        ..FuseParams::default()
    };
    Ok(fuse_detections(&primary, &secondary, &params))
}

/// Runs detect, prompt, segment and assemble on one sample.
///
/// `sample_key` separates the random streams of different samples that
/// share a seed.
pub fn run_pipeline_keyed(
    gt: &PanopticSample,
    cfg: &SimConfig,
    sample_key: u64,
) -> Result<PanopticSample> {
    cfg.validate()?;
    let (w, h) = gt.dims();
    let plants = plant_prompts(gt, cfg, sample_key)?;
    let leaves = mock_detect(gt, cfg, Level::Leaf, sample_key, 0)?;
    let plant_masks = segment_all(plants, gt, cfg, Level::Plant, sample_key)?;
    let leaf_masks = segment_all(leaves, gt, cfg, Level::Leaf, sample_key)?;
    assemble_panoptic(&plant_masks, &leaf_masks, w, h)
}

pub fn run_pipeline(gt: &PanopticSample, cfg: &SimConfig) -> Result<PanopticSample> {
    run_pipeline_keyed(gt, cfg, 0)
}

/// Stable key for a sample ID string (FNV-1a).
pub fn sample_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
