//! Multi-detector bounding-box fusion with greedy NMS ensembling, AP/mAP
//! evaluation, and the dataset tooling around them.
//!
//! - [`geometry`]: normalized boxes, YOLO conversions, IoU.
//! - [`detio`]: label/prediction files, class tables, dataset manifests.
//! - [`nms`]: confidence filtering, greedy NMS, ensemble fusion.
//! - [`eval`]: matching, precision/recall curves, AP and mAP.
//! - [`dataset`]: class statistics, grouped k-fold splits, label audits.
//! - [`simulate`]: synthetic scenes and detectors for end-to-end experiments.

pub mod dataset;
pub mod detio;
pub mod eval;
pub mod geometry;
pub mod nms;
pub mod simulate;

pub use detio::{ClassTable, DatasetManifest, Detection, GroundTruthBox};
pub use eval::{EvalReport, IouSpec};
pub use geometry::{BBox, YoloBox};
pub use nms::{ensemble_fuse, greedy_nms, FusionConfig};
