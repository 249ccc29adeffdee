//! Label-map images, dataset directories, detection lists and reports.
//!
//! Semantics are single-channel 8-bit PNGs (grayscale or palette indices),
//! instance maps single-channel 16-bit grayscale PNGs. A dataset root holds
//! `semantics/`, `plant_instances/` and `leaf_instances/`; a sample is the
//! shared file stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxprompt::{BBox, Detection, Source};
use crate::error::{Error, Result};
use crate::mask::{InstanceMap, LabelMap, PanopticSample};
use crate::metrics::HierReport;

pub const SEMANTICS_DIR: &str = "semantics";
pub const PLANT_DIR: &str = "plant_instances";
pub const LEAF_DIR: &str = "leaf_instances";

struct Raster {
    width: usize,
    height: usize,
    bytes: Vec<u8>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn decode_err(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => {
            Error::io(path, io)
        }
        other => Error::Truncated {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn read_header<R: BufRead + Seek>(path: &Path, r: R) -> Result<png::Reader<R>> {
    let mut decoder = png::Decoder::new(r);
    decoder.set_transformations(png::Transformations::IDENTITY);
    decoder.read_info().map_err(|e| decode_err(path, e))
}

fn read_raster(path: &Path, bit_depth: u8) -> Result<Raster> {
    let mut reader = read_header(path, open(path)?)?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    if channels != 1 {
        return Err(Error::ChannelCount {
            path: path.to_path_buf(),
            found: channels,
        });
    }
    let found = info.bit_depth as u8;
    if found != bit_depth {
        return Err(Error::BitDepth {
            path: path.to_path_buf(),
            expected: bit_depth,
            found,
        });
    }
    if bit_depth == 16 && info.color_type == png::ColorType::Indexed {
        return Err(Error::BitDepth {
            path: path.to_path_buf(),
            expected: 16,
            found: 8,
        });
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            reason: "image too large".into(),
        })?;
    let mut bytes = vec![0; size];
    let out = reader
        .next_frame(&mut bytes)
        .map_err(|e| decode_err(path, e))?;
    bytes.truncate(out.buffer_size());
    Ok(Raster {
        width,
        height,
        bytes,
    })
}

fn write_raster(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let r = read_raster(path, 8)?;
    LabelMap::new(r.width, r.height, r.bytes)
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    write_raster(
        path,
        map.width(),
        map.height(),
        png::BitDepth::Eight,
        map.data(),
    )
}

pub fn read_instance_map(path: &Path) -> Result<InstanceMap> {
    let r = read_raster(path, 16)?;
    let data = r
        .bytes
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    InstanceMap::new(r.width, r.height, data)
}

pub fn write_instance_map(path: &Path, map: &InstanceMap) -> Result<()> {
    let bytes: Vec<u8> = map.data().iter().flat_map(|v| v.to_be_bytes()).collect();
    write_raster(
        path,
        map.width(),
        map.height(),
        png::BitDepth::Sixteen,
        &bytes,
    )
}

fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let reader = read_header(path, open(path)?)?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

/// Paths of one dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn semantics(&self, id: &str) -> PathBuf {
        self.root.join(SEMANTICS_DIR).join(format!("{id}.png"))
    }

    pub fn plant_instances(&self, id: &str) -> PathBuf {
        self.root.join(PLANT_DIR).join(format!("{id}.png"))
    }

    pub fn leaf_instances(&self, id: &str) -> PathBuf {
        self.root.join(LEAF_DIR).join(format!("{id}.png"))
    }

    /// Creates the three layer directories.
    pub fn create(&self) -> Result<()> {
        for dir in [SEMANTICS_DIR, PLANT_DIR, LEAF_DIR] {
            let p = self.root.join(dir);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<PanopticSample> {
        PanopticSample::new(
            read_label_map(&self.semantics(id))?,
            read_instance_map(&self.plant_instances(id))?,
            read_instance_map(&self.leaf_instances(id))?,
        )
    }

    pub fn store(&self, id: &str, sample: &PanopticSample) -> Result<()> {
        write_label_map(&self.semantics(id), &sample.semantics)?;
        write_instance_map(&self.plant_instances(id), &sample.plant_instances)?;
        write_instance_map(&self.leaf_instances(id), &sample.leaf_instances)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetScan {
    /// Complete samples, sorted.
    pub ids: Vec<String>,
    pub warnings: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Lists the complete samples under `root`.
///
/// A sample is complete when all three layer files exist and their headers
/// agree on the dimensions. Incomplete samples are reported as warnings.
pub fn scan_dataset(root: &Path) -> Result<DatasetScan> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let layout = DatasetLayout::new(root);
    let dirs = [SEMANTICS_DIR, PLANT_DIR, LEAF_DIR];
    let stems: Vec<BTreeSet<String>> = dirs
        .iter()
        .map(|d| png_stems(&root.join(d)))
        .collect::<Result<_>>()?;
    let all: BTreeSet<&String> = stems.iter().flatten().collect();

    let mut scan = DatasetScan::default();
    for id in all {
        let missing: Vec<&str> = dirs
            .iter()
            .zip(&stems)
            .filter(|(_, s)| !s.contains(id))
            .map(|(d, _)| *d)
            .collect();
        if !missing.is_empty() {
            scan.warnings
                .push(format!("sample {id}: missing {}", missing.join(", ")));
            continue;
        }
        let dims: Result<Vec<_>> = [
            layout.semantics(id),
            layout.plant_instances(id),
            layout.leaf_instances(id),
        ]
        .iter()
        .map(|p| image_dims(p))
        .collect();
        match dims {
            Ok(d) if d[0] == d[1] && d[0] == d[2] => scan.ids.push(id.clone()),
            Ok(d) => scan
                .warnings
                .push(format!("sample {id}: layer dimensions differ {d:?}")),
            Err(e) => scan.warnings.push(format!("sample {id}: {e}")),
        }
    }
    Ok(scan)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    class_id: u8,
    x_min: i64,
    y_min: i64,
    x_max: i64,
    y_max: i64,
    score: f64,
    source: Source,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        DetectionRecord {
            class_id: d.class_id,
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            score: d.score,
            source: d.source,
        }
    }
}

impl DetectionRecord {
    fn into_detection(self) -> std::result::Result<Detection, String> {
        if self.x_min < 0 || self.y_min < 0 {
            return Err("box coordinates must be non-negative".into());
        }
        let bbox =
            BBox::new(self.x_min, self.y_min, self.x_max, self.y_max).map_err(|e| e.to_string())?;
        Detection::new(bbox, self.class_id, self.score, self.source).map_err(|e| e.to_string())
    }
}

/// Parses line-delimited detection records. Blank lines are skipped.
pub fn parse_detections(text: &str, source: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: DetectionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(rec.into_detection().map_err(err)?);
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(&DetectionRecord::from(d)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    std::fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

/// Six-column values of one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleReport {
    pub id: String,
    pub iou_soil: Option<f64>,
    pub iou_weed: Option<f64>,
    pub pq_leaf: Option<f64>,
    pub pq_crop: Option<f64>,
    pub pq: Option<f64>,
    pub pq_plus: Option<f64>,
}

impl SampleReport {
    pub fn new(id: impl Into<String>, r: &HierReport) -> Self {
        SampleReport {
            id: id.into(),
            iou_soil: r.iou_soil,
            iou_weed: r.iou_weed,
            pq_leaf: r.pq_leaf,
            pq_crop: r.pq_crop,
            pq: r.pq,
            pq_plus: r.pq_plus,
        }
    }
}

/// Evaluation output: dataset-level report, per-sample breakdown and an echo
/// of the options used.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportDocument {
    pub tool_version: String,
    /// Unix seconds; the only field that changes between identical runs.
    pub generated_at: u64,
    pub config: BTreeMap<String, String>,
    #[serde(flatten)]
    pub summary: HierReport,
    pub skipped: Vec<String>,
    pub samples: Vec<SampleReport>,
}

pub const TIMESTAMP_KEY: &str = "generated_at";

pub fn format_report(report: &ReportDocument) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_report(path: &Path, report: &ReportDocument) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(format_report(report).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Report text with the timestamp line removed.
pub fn report_body(text: &str) -> String {
    let key = format!("\"{TIMESTAMP_KEY}\"");
    text.lines()
        .filter(|l| !l.trim_start().starts_with(&key))
        .collect::<Vec<_>>()
        .join("\n")
}
