//! Region-of-interest tooling for chest radiograph datasets: multi-rater
//! consensus, segmentation and classification metrics, preprocessing,
//! weak localization and dataset assembly.

pub mod augment;
pub mod beta;
pub mod cls_metrics;
pub mod components;
pub mod error;
pub mod io;
pub mod manifest;
pub mod model;
mod parallel;
pub mod polygon;
pub mod preprocess;
pub mod seg_metrics;
pub mod staple;
pub mod tversky;
pub mod via;
pub mod weak_loc;

pub use components::{label_components, Component, Connectivity, Labeling};
pub use error::{Error, Result};
pub use manifest::{DatasetManifest, ManifestEntry, Provenance, Split};
pub use model::{
    box_iou, boxes_to_mask, mask_iou, mask_to_boxes, BinaryMask, BoundingBox, ConfusionCounts, ImagePlane,
    ProbabilityMap,
};
