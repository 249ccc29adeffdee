//! Command-line front end: `evaluate`, `fuse`, `jitter`, `simulate` and
//! `synth`.
//!
//! Exit codes: 0 on success, 1 on internal (I/O) failure, 2 on usage or
//! validation errors. Progress goes to stderr; results go to files or stdout.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use cropweed::boxprompt::{fuse_detections, jitter_box, FuseParams, JitterPolicy};
use cropweed::io::{
    format_detections, read_detections, scan_dataset, write_detections, write_report,
    DatasetLayout, ReportDocument, SampleReport,
};
use cropweed::mask::{ClassRemap, ClassSet};
use cropweed::metrics::{evaluate_sample, finalize, EvalConfig, MetricsAccumulator};
use cropweed::rng::derive_key;
use cropweed::sim::{gen_synthetic, run_pipeline_keyed, sample_key, SimConfig, SyntheticSpec};
use cropweed::{Error, PanopticSample};

#[derive(Debug, Parser)]
#[command(
    name = "cropweed",
    version,
    about = "Crop/weed hierarchical panoptic evaluation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a predicted dataset against ground truth (IoU, PQ, PQ+).
    Evaluate(EvaluateArgs),
    /// Merge a secondary detection list into a primary one.
    Fuse(FuseArgs),
    /// Apply box-prompt jitter to a detection list.
    Jitter(JitterArgs),
    /// Run the mock detect/segment pipeline over a ground-truth dataset.
    Simulate(SimulateArgs),
    /// Generate a synthetic crop/weed dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Dataset root holding the predictions.
    pub pred_root: PathBuf,
    /// Dataset root holding the ground truth.
    pub gt_root: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Class remap applied before scoring, as `src:dst` pairs (`dst` may be
    /// `ignore`), or `none`.
    #[arg(long, default_value = "3:1,4:2")]
    pub remap: String,
    /// Ground-truth class excluded from every metric (repeatable).
    #[arg(long = "ignore-class")]
    pub ignore_class: Vec<u8>,
    /// Segment matching threshold; a pair matches when IoU is strictly above it.
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    /// Skip samples that fail to load or disagree in size instead of failing.
    #[arg(long)]
    pub lenient: bool,
    /// Report file.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    /// Primary detections (JSON lines).
    pub primary: PathBuf,
    /// Secondary detections (JSON lines).
    pub secondary: PathBuf,
    /// Secondary boxes overlapping an accepted box of the same class at this IoU are dropped.
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    /// Secondary boxes must exceed this many pixels in width and height.
    #[arg(long, default_value_t = 50)]
    pub min_size: i64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct JitterArgs {
    /// Detections to perturb (JSON lines).
    pub detections: PathBuf,
    /// Image size as WIDTHxHEIGHT.
    pub bounds: String,
    /// Noise amplitude as a fraction of the box side.
    #[arg(long, default_value_t = 0.10)]
    pub fraction: f64,
    /// Noise amplitude cap in pixels.
    #[arg(long, default_value_t = 20.0)]
    pub cap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Ground-truth dataset root.
    pub gt_root: PathBuf,
    /// Simulation config (key = value lines).
    pub config: PathBuf,
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Synthetic spec (key = value lines).
    pub spec: PathBuf,
    /// Number of samples.
    pub count: usize,
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input or configuration; exit code 2.
    Validation(String),
    /// Anything else; exit code 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => CliError::Internal(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Evaluate(a) => {
            let outcome = cmd_evaluate(&a)?;
            println!("{}", outcome.document.summary);
            Ok(())
        }
        Command::Fuse(a) => cmd_fuse(&a),
        Command::Jitter(a) => cmd_jitter(&a),
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
    }
}

impl EvaluateArgs {
    pub fn new(
        pred_root: impl Into<PathBuf>,
        gt_root: impl Into<PathBuf>,
        out: impl Into<PathBuf>,
    ) -> Self {
        EvaluateArgs {
            pred_root: pred_root.into(),
            gt_root: gt_root.into(),
            threads: 0,
            remap: "3:1,4:2".into(),
            ignore_class: Vec::new(),
            iou_thresh: 0.5,
            lenient: false,
            out: out.into(),
        }
    }

    pub fn eval_config(&self) -> CliResult<EvalConfig> {
        if !(0.5..1.0).contains(&self.iou_thresh) {
            return Err(CliError::Validation(format!(
                "--iou-thresh must lie in [0.5, 1) for evaluation, got {}",
                self.iou_thresh
            )));
        }
        Ok(EvalConfig {
            remap: ClassRemap::parse(&self.remap)?,
            ignore_classes: ClassSet::of(&self.ignore_class),
            match_threshold: self.iou_thresh,
            ..EvalConfig::default()
        })
    }
}

pub struct EvalOutcome {
    pub document: ReportDocument,
    pub accumulator: MetricsAccumulator,
}

enum SampleResult {
    Scored(MetricsAccumulator),
    Skipped(String),
}

fn evaluate_one(
    pred: &DatasetLayout,
    gt: &DatasetLayout,
    id: &str,
    cfg: &EvalConfig,
) -> cropweed::Result<MetricsAccumulator> {
    let p = pred.load(id)?;
    let g = gt.load(id)?;
    let mut acc = MetricsAccumulator::for_config(cfg);
    evaluate_sample(&mut acc, &p, &g, cfg)?;
    Ok(acc)
}

/// Evaluates `pairs` on `threads` workers and merges the per-sample
/// accumulators. Results do not depend on the worker count.
pub fn evaluate_in_memory(
    pairs: &[(&PanopticSample, &PanopticSample)],
    cfg: &EvalConfig,
    threads: usize,
) -> CliResult<MetricsAccumulator> {
    let accs: Vec<MetricsAccumulator> = pool(threads)?.install(|| {
        pairs
            .par_iter()
            .map(|(pred, gt)| {
                let mut acc = MetricsAccumulator::for_config(cfg);
                evaluate_sample(&mut acc, pred, gt, cfg).map(|_| acc)
            })
            .collect::<cropweed::Result<_>>()
    })?;
    let mut total = MetricsAccumulator::for_config(cfg);
    for a in &accs {
        total.merge_from(a)?;
    }
    Ok(total)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<EvalOutcome> {
    let cfg = args.eval_config()?;
    let pred_scan = scan_dataset(&args.pred_root)
        .map_err(|e| CliError::Validation(format!("prediction root: {e}")))?;
    let gt_scan = scan_dataset(&args.gt_root)
        .map_err(|e| CliError::Validation(format!("ground-truth root: {e}")))?;
    let mut skipped: Vec<String> = Vec::new();
    let scan_warnings = pred_scan
        .warnings
        .iter()
        .map(|w| format!("prediction {w}"))
        .chain(gt_scan.warnings.iter().map(|w| format!("ground truth {w}")));
    for w in scan_warnings {
        if !args.lenient {
            return Err(CliError::Validation(format!("{w} (use --lenient to skip)")));
        }
        log::warn!("{w}");
        skipped.push(w);
    }

    let shared: Vec<String> = gt_scan
        .ids
        .iter()
        .filter(|id| pred_scan.ids.binary_search(id).is_ok())
        .cloned()
        .collect();
    for id in gt_scan
        .ids
        .iter()
        .filter(|id| pred_scan.ids.binary_search(id).is_err())
    {
        let w = format!("sample {id}: no prediction");
        log::warn!("{w}");
        skipped.push(w);
    }
    if shared.is_empty() {
        return Err(CliError::Validation(
            "no samples shared between prediction and ground-truth roots".into(),
        ));
    }
    eprintln!("evaluating {} samples", shared.len());

    let pred = DatasetLayout::new(&args.pred_root);
    let gt = DatasetLayout::new(&args.gt_root);
    let results: Vec<CliResult<SampleResult>> = pool(args.threads)?.install(|| {
        shared
            .par_iter()
            .map(|id| match evaluate_one(&pred, &gt, id, &cfg) {
                Ok(acc) => Ok(SampleResult::Scored(acc)),
                Err(e @ Error::Io { .. }) => Err(CliError::from(e)),
                Err(e) if args.lenient => Ok(SampleResult::Skipped(format!("sample {id}: {e}"))),
                Err(e) => Err(CliError::Validation(format!("sample {id}: {e}"))),
            })
            .collect()
    });

    let mut total = MetricsAccumulator::for_config(&cfg);
    let mut samples = Vec::new();
    for (id, r) in shared.iter().zip(results) {
        match r? {
            SampleResult::Scored(acc) => {
                samples.push(SampleReport::new(id.clone(), &finalize(&acc)));
                total.merge_from(&acc)?;
            }
            SampleResult::Skipped(w) => {
                log::warn!("{w}");
                skipped.push(w);
            }
        }
    }
    if samples.is_empty() {
        return Err(CliError::Validation(
            "every shared sample was skipped".into(),
        ));
    }

    let mut config = BTreeMap::new();
    config.insert("pred_root".into(), args.pred_root.display().to_string());
    config.insert("gt_root".into(), args.gt_root.display().to_string());
    config.insert("remap".into(), cfg.remap.to_string());
    config.insert(
        "ignore_classes".into(),
        cfg.ignore_classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    config.insert("iou_thresh".into(), cfg.match_threshold.to_string());
    config.insert("lenient".into(), args.lenient.to_string());

    let document = ReportDocument {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        generated_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config,
        summary: finalize(&total),
        skipped,
        samples,
    };
    write_report(&args.out, &document)?;
    Ok(EvalOutcome {
        document,
        accumulator: total,
    })
}

fn emit(out: &Option<PathBuf>, dets: &[cropweed::Detection]) -> CliResult<()> {
    match out {
        Some(p) => write_detections(p, dets).map_err(Into::into),
        None => std::io::stdout()
            .write_all(format_detections(dets).as_bytes())
            .map_err(|e| CliError::Internal(e.to_string())),
    }
}

pub fn cmd_fuse(args: &FuseArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.iou_thresh) || args.min_size < 0 {
        return Err(CliError::Validation(
            "--iou-thresh must lie in [0, 1] and --min-size must be >= 0".into(),
        ));
    }
    let primary = read_detections(&args.primary)?;
    let secondary = read_detections(&args.secondary)?;
    let params = FuseParams {
        iou_thresh: args.iou_thresh,
        min_w: args.min_size,
        min_h: args.min_size,
        ..FuseParams::default()
    };
    let fused = fuse_detections(&primary, &secondary, &params);
    eprintln!(
        "fused {} primary + {} secondary -> {}",
        primary.len(),
        secondary.len(),
        fused.len()
    );
    emit(&args.out, &fused)
}

pub fn parse_bounds(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Validation(format!("bounds must be WIDTHxHEIGHT, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h): (usize, usize) = (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?);
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

pub fn cmd_jitter(args: &JitterArgs) -> CliResult<()> {
    let (w, h) = parse_bounds(&args.bounds)?;
    let policy = JitterPolicy {
        fraction: args.fraction,
        cap: args.cap,
        seed: args.seed,
    };
    policy.validate()?;
    let dets = read_detections(&args.detections)?;
    let out = dets
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let bbox = jitter_box(&d.bbox, &policy, w, h, i as u64)
                .map_err(|e| CliError::Validation(format!("record {}: {e}", i + 1)))?;
            Ok(cropweed::Detection { bbox, ..*d })
        })
        .collect::<CliResult<Vec<_>>>()?;
    emit(&args.out, &out)
}

/// Returns the IDs written.
pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<Vec<String>> {
    let mut cfg = SimConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let scan = scan_dataset(&args.gt_root)
        .map_err(|e| CliError::Validation(format!("ground-truth root: {e}")))?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let gt = DatasetLayout::new(&args.gt_root);
    let out = DatasetLayout::new(&args.out);
    out.create()?;
    eprintln!("simulating {} samples", scan.ids.len());
    pool(args.threads)?.install(|| {
        scan.ids.par_iter().try_for_each(|id| -> CliResult<()> {
            let sample = gt.load(id)?;
            let pred = run_pipeline_keyed(&sample, &cfg, sample_key(id))?;
            out.store(id, &pred)?;
            Ok(())
        })
    })?;
    Ok(scan.ids)
}

pub fn synth_id(i: usize) -> String {
    format!("sample_{i:04}")
}

/// Returns the IDs written.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<Vec<String>> {
    let mut spec = SyntheticSpec::from_file(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = DatasetLayout::new(&args.out);
    out.create()?;
    let ids: Vec<String> = (0..args.count).map(synth_id).collect();
    eprintln!("generating {} samples", ids.len());
    pool(args.threads)?.install(|| {
        ids.par_iter()
            .enumerate()
            .try_for_each(|(i, id)| -> CliResult<()> {
                let s = SyntheticSpec {
                    seed: derive_key(spec.seed, &[i as u64]),
                    ..spec.clone()
                };
                out.store(id, &gen_synthetic(&s)?)?;
                Ok(())
            })
    })?;
    Ok(ids)
}

/// Writes `spec` in the key = value format read by `synth`.
pub fn write_synth_spec(path: &Path, spec: &SyntheticSpec) -> std::io::Result<()> {
    std::fs::write(
        path,
        format!(
            "width = {}\nheight = {}\ncrop_count = {}\nweed_count = {}\nleaves_per_crop = {}..{}\nseed = {}\n",
            spec.width,
            spec.height,
            spec.crop_count,
            spec.weed_count,
            spec.leaves_per_crop.0,
            spec.leaves_per_crop.1,
            spec.seed
        ),
    )
}
