//! Evaluation and prompt plumbing for hierarchical crop/weed panoptic
//! segmentation.
//!
//! - [`mask`]: label and instance maps, connected components, segments.
//! - [`boxprompt`]: box geometry, prompt jitter and detector fusion.
//! - [`metrics`]: semantic IoU, PQ and the six-column hierarchical report.
//! - [`sim`]: synthetic samples and a mock detect, prompt, segment pipeline.
//! - [`io`]: label map images, dataset layout, detections and reports.

pub mod boxprompt;
pub mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod rng;
pub mod sim;

pub use boxprompt::{BBox, Detection, JitterPolicy, Source};
pub use error::{Error, Result};
pub use mask::{ClassRemap, ClassSet, InstanceMap, LabelMap, PanopticSample, Segment};
pub use metrics::{EvalConfig, HierReport, MetricsAccumulator};
