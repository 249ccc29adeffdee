//! Browser bindings for the demo page in `www/`.
//!
//! Three operations are exposed: box jitter, detection fusion, and a
//! synthetic simulate-then-evaluate round that returns RGBA buffers for a
//! canvas plus the metric report as JSON.

use std::path::Path;

use wasm_bindgen::prelude::*;

use cropweed::boxprompt::{fuse_detections, jitter_box, FuseParams};
use cropweed::io::{format_detections, parse_detections};
use cropweed::mask::{CROP, IGNORE, PARTIAL_CROP, PARTIAL_WEED, SOIL, WEED};
use cropweed::metrics::{evaluate_sample, finalize};
use cropweed::sim::{gen_synthetic, run_pipeline, SimConfig, SyntheticSpec};
use cropweed::{BBox, EvalConfig, JitterPolicy, MetricsAccumulator, PanopticSample};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Jitters one box `count` times with consecutive stream keys and returns
/// the results flattened as `[x_min, y_min, x_max, y_max, ...]`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn jitter_boxes(
    x_min: i32,
    y_min: i32,
    x_max: i32,
    y_max: i32,
    width: u32,
    height: u32,
    fraction: f64,
    cap: f64,
    seed: u64,
    count: u32,
) -> Result<Vec<i32>, JsError> {
    let bbox = BBox::new(x_min.into(), y_min.into(), x_max.into(), y_max.into()).map_err(js_err)?;
    let policy = JitterPolicy {
        fraction,
        cap,
        seed,
    };
    policy.validate().map_err(js_err)?;
    let mut out = Vec::with_capacity(count as usize * 4);
    for key in 0..count {
        let b = jitter_box(&bbox, &policy, width as usize, height as usize, key.into())
            .map_err(js_err)?;
        out.extend([b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v as i32));
    }
    Ok(out)
}

/// Fuses two detection lists given as JSON lines; returns JSON lines.
#[wasm_bindgen]
pub fn fuse(
    primary: &str,
    secondary: &str,
    iou_thresh: f64,
    min_size: i32,
) -> Result<String, JsError> {
    let primary = parse_detections(primary, Path::new("primary")).map_err(js_err)?;
    let secondary = parse_detections(secondary, Path::new("secondary")).map_err(js_err)?;
    let params = FuseParams {
        iou_thresh,
        min_w: min_size.into(),
        min_h: min_size.into(),
        ..FuseParams::default()
    };
    Ok(format_detections(&fuse_detections(
        &primary, &secondary, &params,
    )))
}

/// One synthetic scene, its simulated prediction and their scores.
#[wasm_bindgen]
pub struct Simulation {
    gt: PanopticSample,
    pred: PanopticSample,
    report: String,
}

#[wasm_bindgen]
impl Simulation {
    #[wasm_bindgen(constructor)]
    pub fn new(
        size: u32,
        seed: u64,
        dropout: f64,
        jitter_fraction: f64,
        erosion: u32,
        noise: f64,
    ) -> Result<Simulation, JsError> {
        let spec = SyntheticSpec {
            width: size as usize,
            height: size as usize,
            seed,
            ..SyntheticSpec::default()
        };
        let gt = gen_synthetic(&spec).map_err(js_err)?;
        let mut cfg = SimConfig {
            detector_dropout: dropout,
            mask_erosion: erosion,
            mask_noise: noise,
            seed,
            ..SimConfig::default()
        };
        cfg.box_jitter.fraction = jitter_fraction;
        cfg.box_jitter.seed = seed;
        let pred = run_pipeline(&gt, &cfg).map_err(js_err)?;

        let eval = EvalConfig::default();
        let mut acc = MetricsAccumulator::for_config(&eval);
        evaluate_sample(&mut acc, &pred, &gt, &eval).map_err(js_err)?;
        let report = serde_json::to_string(&finalize(&acc)).map_err(js_err)?;
        Ok(Simulation { gt, pred, report })
    }

    pub fn width(&self) -> u32 {
        self.gt.dims().0 as u32
    }

    pub fn height(&self) -> u32 {
        self.gt.dims().1 as u32
    }

    /// Ground truth as RGBA pixels.
    pub fn gt_rgba(&self) -> Vec<u8> {
        render(&self.gt)
    }

    /// Prediction as RGBA pixels.
    pub fn pred_rgba(&self) -> Vec<u8> {
        render(&self.pred)
    }

    /// Summary metrics as a JSON object (percent values, `null` when undefined).
    pub fn report_json(&self) -> String {
        self.report.clone()
    }
}

fn class_color(c: u8) -> [u8; 3] {
    match c {
        SOIL => [92, 64, 51],
        CROP | PARTIAL_CROP => [60, 170, 70],
        WEED | PARTIAL_WEED => [210, 60, 50],
        IGNORE => [40, 40, 40],
        _ => [200, 200, 200],
    }
}

/// Semantic colours with leaf (or plant) boundaries darkened.
fn render(s: &PanopticSample) -> Vec<u8> {
    let (w, h) = s.dims();
    let labels = s.semantics.data();
    let leaves = s.leaf_instances.data();
    let plants = s.plant_instances.data();
    let mut out = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let id = if leaves[i] != 0 { leaves[i] } else { plants[i] };
            let edge = id != 0
                && [
                    (x > 0, i.wrapping_sub(1)),
                    (x + 1 < w, i + 1),
                    (y > 0, i.wrapping_sub(w)),
                    (y + 1 < h, i + w),
                ]
                .into_iter()
                .any(|(ok, j)| ok && (if leaves[i] != 0 { leaves[j] } else { plants[j] }) != id);
            let [r, g, b] = class_color(labels[i]);
            if edge {
                out.extend([r / 2, g / 2, b / 2, 255]);
            } else {
                out.extend([r, g, b, 255]);
            }
        }
    }
    out
}
