//! Label maps, instance maps and the segment representation used for
//! panoptic matching.
//!
//! Coordinates follow raster conventions: `x` is the column, `y` the row,
//! origin at the top-left. All grids are stored row-major.

use std::fmt;
use std::str::FromStr;

use crate::boxprompt::BBox;
use crate::error::{Error, Result};

pub const SOIL: u8 = 0;
pub const CROP: u8 = 1;
pub const WEED: u8 = 2;
pub const PARTIAL_CROP: u8 = 3;
pub const PARTIAL_WEED: u8 = 4;

/// Reserved label excluded from every metric.
pub const IGNORE: u8 = 255;

/// Number of semantic classes in the full schema (soil, crop, weed and the
/// two partial classes).
pub const NUM_CLASSES: usize = 5;

/// Largest number of instances an [`InstanceMap`] may hold.
pub const MAX_INSTANCES: usize = 65534;

/// Fixed-size set of 8-bit class IDs.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ClassSet([u64; 4]);

impl ClassSet {
    pub const fn empty() -> Self {
        ClassSet([0; 4])
    }

    pub fn of(classes: &[u8]) -> Self {
        let mut set = Self::empty();
        for &c in classes {
            set.insert(c);
        }
        set
    }

    pub fn insert(&mut self, class: u8) {
        self.0[(class >> 6) as usize] |= 1 << (class & 63);
    }

    #[inline]
    pub fn contains(&self, class: u8) -> bool {
        self.0[(class >> 6) as usize] & (1 << (class & 63)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|w| *w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(move |c| self.contains(*c))
    }
}

impl fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Dimensions { width, height });
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::DataLength {
            width,
            height,
            actual: len,
        });
    }
    Ok(())
}

macro_rules! grid_type {
    ($(#[$meta:meta])* $name:ident, $elem:ty) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq)]
        pub struct $name {
            width: usize,
            height: usize,
            data: Vec<$elem>,
        }

        impl $name {
            pub fn new(width: usize, height: usize, data: Vec<$elem>) -> Result<Self> {
                check_dims(width, height, data.len())?;
                Ok(Self { width, height, data })
            }

            pub fn filled(width: usize, height: usize, value: $elem) -> Result<Self> {
                check_dims(width, height, width.saturating_mul(height))?;
                Ok(Self {
                    width,
                    height,
                    data: vec![value; width * height],
                })
            }

            #[inline]
            pub fn width(&self) -> usize {
                self.width
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.height
            }

            #[inline]
            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            #[inline]
            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            #[inline]
            pub fn data_mut(&mut self) -> &mut [$elem] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<$elem> {
                self.data
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> $elem {
                self.data[y * self.width + x]
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, value: $elem) {
                self.data[y * self.width + x] = value;
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.debug_struct(stringify!($name))
                    .field("width", &self.width)
                    .field("height", &self.height)
                    .finish_non_exhaustive()
            }
        }
    };
}

grid_type!(
    /// Per-pixel semantic class IDs.
    LabelMap,
    u8
);
grid_type!(
    /// Per-pixel instance IDs; 0 means no instance.
    InstanceMap,
    u16
);
grid_type!(
    /// Foreground/background grid.
    BinaryMask,
    bool
);

impl LabelMap {
    /// Checks that every pixel is either below `class_count` or [`IGNORE`].
    pub fn validate_classes(&self, class_count: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&c| c != IGNORE && c as usize >= class_count)
        {
            Some(&class) => Err(Error::ClassOutOfRange {
                class,
                count: class_count,
            }),
            None => Ok(()),
        }
    }

    /// Foreground mask of the pixels whose class is in `classes`.
    pub fn mask_of(&self, classes: ClassSet) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&c| classes.contains(c)).collect(),
        }
    }
}

impl InstanceMap {
    /// Number of distinct nonzero IDs.
    pub fn instance_count(&self) -> usize {
        let mut seen = vec![false; u16::MAX as usize + 1];
        let mut n = 0;
        for &id in &self.data {
            if id != 0 && !seen[id as usize] {
                seen[id as usize] = true;
                n += 1;
            }
        }
        n
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

pub(crate) fn ensure_same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            left_width: a.0,
            left_height: a.1,
            right_width: b.0,
            right_height: b.1,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            other => Err(Error::InvalidParameter(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        // slot 0 is background and never used as a label
        UnionFind { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Labels the maximal connected foreground regions of `mask`.
///
/// Two-pass union-find. Final IDs are `1..=K`, assigned in the raster order
/// in which each component is first encountered.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Result<InstanceMap> {
    let (w, h) = mask.dims();
    let mut provisional = vec![0u32; w * h];
    let mut uf = UnionFind::new();

    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let i = row + x;
            if !mask.data[i] {
                continue;
            }
            let mut label = 0u32;
            let mut join = |l: u32, uf: &mut UnionFind| {
                if l != 0 {
                    label = if label == 0 { l } else { uf.union(label, l) };
                }
            };
            if x > 0 {
                join(provisional[i - 1], &mut uf);
            }
            if y > 0 {
                join(provisional[i - w], &mut uf);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        join(provisional[i - w - 1], &mut uf);
                    }
                    if x + 1 < w {
                        join(provisional[i - w + 1], &mut uf);
                    }
                }
            }
            provisional[i] = if label == 0 { uf.make() } else { label };
        }
    }

    let mut final_id = vec![0u32; uf.parent.len()];
    let mut next = 0usize;
    let mut out = vec![0u16; w * h];
    for (o, &p) in out.iter_mut().zip(&provisional) {
        if p == 0 {
            continue;
        }
        let root = uf.find(p) as usize;
        if final_id[root] == 0 {
            next += 1;
            if next > MAX_INSTANCES {
                return Err(Error::TooManyInstances(next));
            }
            final_id[root] = next as u32;
        }
        *o = final_id[root] as u16;
    }
    InstanceMap::new(w, h, out)
}

/// Pixel set stored as horizontal runs over raster indices. Runs never
/// cross a row boundary and are sorted by start index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rle {
    width: u32,
    runs: Vec<(u32, u32)>,
}

impl Rle {
    pub fn new(width: usize) -> Self {
        Rle {
            width: width as u32,
            runs: Vec::new(),
        }
    }

    /// Appends the pixel at raster index `idx`. Indices must be pushed in
    /// increasing order.
    pub fn push(&mut self, idx: u32) {
        if let Some(last) = self.runs.last_mut() {
            let end = last.0 + last.1;
            if end == idx && !idx.is_multiple_of(self.width) {
                last.1 += 1;
                return;
            }
        }
        self.runs.push((idx, 1));
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|r| r.1 as u64).sum()
    }

    /// Iterates over `(x, y)` of every pixel in the set.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.runs.iter().flat_map(move |&(start, len)| {
            let (y, x0) = (start / w, start % w);
            (x0..x0 + len).map(move |x| (x as usize, y as usize))
        })
    }

    /// Number of pixels shared with `other`.
    pub fn intersection(&self, other: &Rle) -> u64 {
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j) = (0, 0);
        let mut total = 0u64;
        while i < a.len() && j < b.len() {
            let (a0, a1) = (a[i].0, a[i].0 + a[i].1);
            let (b0, b1) = (b[j].0, b[j].0 + b[j].1);
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if hi > lo {
                total += (hi - lo) as u64;
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }
}

/// One instance of a thing class: the unit of panoptic matching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub class_id: u8,
    pub instance_id: u16,
    pub area: u64,
    pub bbox: BBox,
    pub pixels: Rle,
}

impl Segment {
    /// Builds a segment from its run-length pixels; `None` when empty.
    pub fn from_rle(class_id: u8, instance_id: u16, pixels: Rle) -> Option<Self> {
        let w = pixels.width;
        let mut bounds: Option<(u32, u32, u32, u32)> = None;
        for &(start, len) in &pixels.runs {
            let (y, x0) = (start / w, start % w);
            let x1 = x0 + len;
            bounds = Some(match bounds {
                None => (x0, y, x1, y + 1),
                Some((a, b, c, d)) => (a.min(x0), b.min(y), c.max(x1), d.max(y + 1)),
            });
        }
        let (x_min, y_min, x_max, y_max) = bounds?;
        Some(Segment {
            class_id,
            instance_id,
            area: pixels.area(),
            bbox: BBox::new(x_min as i64, y_min as i64, x_max as i64, y_max as i64).ok()?,
            pixels,
        })
    }

    pub fn iou(&self, other: &Segment) -> (u64, u64) {
        if !self.bbox.overlaps(&other.bbox) {
            return (0, self.area + other.area);
        }
        let inter = self.pixels.intersection(&other.pixels);
        (inter, self.area + other.area - inter)
    }
}

struct SegmentBuilder {
    class_counts: Vec<u64>,
    pixels: Rle,
}

/// Extracts one [`Segment`] per nonzero instance ID.
///
/// Only pixels whose semantic class is in `thing_classes` contribute. The
/// segment's class is the majority class over those pixels, lower class ID
/// on ties. Segments are returned in ascending instance ID order.
pub fn segments_of(
    labels: &LabelMap,
    instances: &InstanceMap,
    thing_classes: ClassSet,
) -> Result<Vec<Segment>> {
    ensure_same_dims(labels.dims(), instances.dims())?;
    let width = labels.width();
    let mut slot = vec![u32::MAX; u16::MAX as usize + 1];
    let mut builders: Vec<SegmentBuilder> = Vec::new();

    for (idx, (&class, &inst)) in labels.data.iter().zip(&instances.data).enumerate() {
        if inst == 0 || !thing_classes.contains(class) {
            continue;
        }
        let s = &mut slot[inst as usize];
        if *s == u32::MAX {
            *s = builders.len() as u32;
            builders.push(SegmentBuilder {
                class_counts: vec![0; 256],
                pixels: Rle::new(width),
            });
        }
        let b = &mut builders[*s as usize];
        b.class_counts[class as usize] += 1;
        b.pixels.push(idx as u32);
    }

    let mut out = Vec::with_capacity(builders.len());
    for (inst, &s) in slot.iter().enumerate() {
        if s == u32::MAX {
            continue;
        }
        let b = &mut builders[s as usize];
        let mut best = 0usize;
        for (c, &n) in b.class_counts.iter().enumerate() {
            if n > b.class_counts[best] {
                best = c;
            }
        }
        let pixels = std::mem::replace(&mut b.pixels, Rle::new(width));
        if let Some(seg) = Segment::from_rle(best as u8, inst as u16, pixels) {
            out.push(seg);
        }
    }
    Ok(out)
}

/// Total mapping from source class IDs to target IDs (or [`IGNORE`]).
#[derive(Clone, PartialEq, Eq)]
pub struct ClassRemap {
    table: Vec<Option<u8>>,
}

impl fmt::Debug for ClassRemap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(
                self.table
                    .iter()
                    .enumerate()
                    .filter_map(|(s, t)| t.map(|t| (s, t))),
            )
            .finish()
    }
}

impl ClassRemap {
    /// Maps each of `0..class_count` to itself.
    pub fn identity(class_count: usize) -> Self {
        let mut table = vec![None; 256];
        for (c, t) in table.iter_mut().enumerate().take(class_count.min(255)) {
            *t = Some(c as u8);
        }
        ClassRemap { table }
    }

    /// Folds partial crop into crop and partial weed into weed.
    pub fn fold_partials() -> Self {
        let mut remap = Self::identity(NUM_CLASSES);
        remap.set(PARTIAL_CROP, CROP);
        remap.set(PARTIAL_WEED, WEED);
        remap
    }

    pub fn set(&mut self, source: u8, target: u8) {
        self.table[source as usize] = Some(target);
    }

    pub fn get(&self, source: u8) -> Option<u8> {
        if source == IGNORE {
            return Some(IGNORE);
        }
        self.table[source as usize]
    }

    /// Parses `src:dst` pairs separated by commas on top of the identity
    /// over the full schema. `dst` may be `ignore`; the literal `none`
    /// yields the identity.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut remap = Self::identity(NUM_CLASSES);
        let spec = spec.trim();
        if spec.is_empty() || spec == "none" {
            return Ok(remap);
        }
        for pair in spec.split(',') {
            let bad = || Error::InvalidParameter(format!("bad remap entry {pair:?}"));
            let (src, dst) = pair.split_once(':').ok_or_else(bad)?;
            let src: u8 = src.trim().parse().map_err(|_| bad())?;
            let dst = match dst.trim() {
                "ignore" => IGNORE,
                d => d.parse().map_err(|_| bad())?,
            };
            if src == IGNORE {
                return Err(bad());
            }
            remap.set(src, dst);
        }
        Ok(remap)
    }

    fn lut(&self) -> [Option<u8>; 256] {
        let mut lut = [None; 256];
        for (s, l) in lut.iter_mut().enumerate() {
            *l = self.get(s as u8);
        }
        lut
    }
}

impl Default for ClassRemap {
    fn default() -> Self {
        Self::fold_partials()
    }
}

impl fmt::Display for ClassRemap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (s, t) in self.table.iter().enumerate() {
            if let Some(t) = t {
                if !first {
                    f.write_str(",")?;
                }
                first = false;
                if *t == IGNORE {
                    write!(f, "{s}:ignore")?;
                } else {
                    write!(f, "{s}:{t}")?;
                }
            }
        }
        Ok(())
    }
}

/// Applies `remap` pointwise. [`IGNORE`] pixels stay ignored.
pub fn remap_classes(labels: &LabelMap, remap: &ClassRemap) -> Result<LabelMap> {
    let lut = remap.lut();
    let data = labels
        .data
        .iter()
        .map(|&c| lut[c as usize].ok_or(Error::UnmappedClass(c)))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(labels.width, labels.height, data)
}

/// Tight box of every nonzero instance, ascending by ID.
pub fn boxes_from_instances(instances: &InstanceMap) -> Vec<(u16, BBox)> {
    let mut extent: Vec<Option<(usize, usize, usize, usize)>> = vec![None; u16::MAX as usize + 1];
    let w = instances.width;
    for (y, row) in instances.data.chunks_exact(w).enumerate() {
        for (x, &id) in row.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let e = &mut extent[id as usize];
            *e = Some(match *e {
                None => (x, y, x + 1, y + 1),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
            });
        }
    }
    extent
        .iter()
        .enumerate()
        .filter_map(|(id, e)| {
            e.map(|(a, b, c, d)| {
                let bbox = BBox::new(a as i64, b as i64, c as i64, d as i64)
                    .expect("tight extent is non-degenerate");
                (id as u16, bbox)
            })
        })
        .collect()
}

/// The three aligned layers of a hierarchical panoptic annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticSample {
    pub semantics: LabelMap,
    pub plant_instances: InstanceMap,
    pub leaf_instances: InstanceMap,
}

impl PanopticSample {
    pub fn new(
        semantics: LabelMap,
        plant_instances: InstanceMap,
        leaf_instances: InstanceMap,
    ) -> Result<Self> {
        ensure_same_dims(semantics.dims(), plant_instances.dims())?;
        ensure_same_dims(semantics.dims(), leaf_instances.dims())?;
        Ok(PanopticSample {
            semantics,
            plant_instances,
            leaf_instances,
        })
    }

    /// All-soil sample without instances.
    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Ok(PanopticSample {
            semantics: LabelMap::filled(width, height, SOIL)?,
            plant_instances: InstanceMap::filled(width, height, 0)?,
            leaf_instances: InstanceMap::filled(width, height, 0)?,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.semantics.dims()
    }

    /// Checks the hierarchy: plant pixels are crop or weed, and every leaf
    /// pixel lies on a crop plant.
    pub fn check_hierarchy(&self) -> std::result::Result<(), String> {
        let sem = self.semantics.data();
        let plants = self.plant_instances.data();
        for (i, &leaf) in self.leaf_instances.data().iter().enumerate() {
            let (x, y) = (i % self.semantics.width, i / self.semantics.width);
            if plants[i] != 0 && sem[i] != CROP && sem[i] != WEED {
                return Err(format!("plant pixel ({x}, {y}) has class {}", sem[i]));
            }
            if leaf != 0 && (plants[i] == 0 || sem[i] != CROP) {
                return Err(format!("leaf pixel ({x}, {y}) is not on a crop plant"));
            }
        }
        Ok(())
    }
}
