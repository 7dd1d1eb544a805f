//! VGG Image Annotator (VIA) projects and multi-rater box consensus.
//!
//! Both the bare image-metadata export and the full project file (with the
//! `_via_img_metadata` wrapper) are accepted, with regions stored either as
//! an array or as an index-keyed object. Only rectangles become boxes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::components::Connectivity;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_json, write_mask_png, write_pfm};
use crate::model::{boxes_to_mask, BinaryMask, BoundingBox, ProbabilityMap};
use crate::staple::{
    consensus_boxes, consensus_mask, staple_fuse, Prior, RaterPerformance, StapleProblem, DEFAULT_CONSENSUS_THRESHOLD,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegionIssue {
    pub image: String,
    pub region: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ViaImport {
    /// Boxes per image id (the VIA `filename`), in region order.
    pub boxes: BTreeMap<String, Vec<BoundingBox>>,
    /// Regions with a shape other than `rect`.
    pub skipped: Vec<RegionIssue>,
    /// Rectangles with negative corners or an empty extent.
    pub errors: Vec<RegionIssue>,
}

fn number(attrs: &Map<String, Value>, key: &str) -> std::result::Result<f64, String> {
    attrs
        .get(key)
        .and_then(|v| v.as_f64().or_else(|| v.as_str().and_then(|s| s.trim().parse().ok())))
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("rect is missing a numeric {key:?}"))
}

fn rect_box(attrs: &Map<String, Value>) -> std::result::Result<BoundingBox, String> {
    let x = number(attrs, "x")?.round();
    let y = number(attrs, "y")?.round();
    let w = number(attrs, "width")?.round();
    let h = number(attrs, "height")?.round();
    if x < 0.0 || y < 0.0 {
        return Err(format!("rect corner ({x}, {y}) is negative"));
    }
    if w <= 0.0 || h <= 0.0 {
        return Err(format!("rect extent {w}x{h} is not positive"));
    }
    Ok(BoundingBox {
        x: x as usize,
        y: y as usize,
        w: w as usize,
        h: h as usize,
    })
}

/// Parses VIA JSON text; `origin` is used in error messages.
pub fn parse_via(text: &[u8], origin: &Path) -> Result<ViaImport> {
    let root: Value = serde_json::from_slice(text).map_err(|e| Error::json(origin, e))?;
    let root = root
        .as_object()
        .ok_or_else(|| Error::format(origin, "VIA project must be a JSON object"))?;
    let images = match root.get("_via_img_metadata") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(Error::format(origin, "_via_img_metadata must be an object")),
        None => root,
    };

    let mut out = ViaImport::default();
    for (key, meta) in images {
        let meta = meta
            .as_object()
            .ok_or_else(|| Error::format(origin, format!("image entry {key:?} is not an object")))?;
        let image = meta.get("filename").and_then(Value::as_str).unwrap_or(key).to_string();
        let regions: Vec<&Value> = match meta.get("regions") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a.iter().collect(),
            Some(Value::Object(m)) => {
                let mut keyed: Vec<(&String, &Value)> = m.iter().collect();
                keyed.sort_by_key(|(k, _)| (k.parse::<u64>().unwrap_or(u64::MAX), k.as_str()));
                keyed.into_iter().map(|(_, v)| v).collect()
            }
            Some(_) => return Err(Error::format(origin, format!("regions of {image:?} must be a list"))),
        };
        let list = out.boxes.entry(image.clone()).or_default();
        for (region, r) in regions.into_iter().enumerate() {
            let issue = |message: String| RegionIssue {
                image: image.clone(),
                region,
                message,
            };
            let Some(attrs) = r.get("shape_attributes").and_then(Value::as_object) else {
                out.errors.push(issue("region has no shape_attributes".into()));
                continue;
            };
            let shape = attrs.get("name").and_then(Value::as_str).unwrap_or("");
            if shape != "rect" {
                out.skipped.push(issue(format!("unsupported shape {shape:?}")));
                continue;
            }
            match rect_box(attrs) {
                Ok(b) => list.push(b),
                Err(m) => out.errors.push(issue(m)),
            }
        }
    }
    Ok(out)
}

pub fn import_via(path: &Path) -> Result<ViaImport> {
    parse_via(&read_bytes(path)?, path)
}

/// Flat VIA image-metadata JSON holding one rect region per box.
pub fn export_via(boxes: &BTreeMap<String, Vec<BoundingBox>>) -> Value {
    let mut root = Map::new();
    for (image, list) in boxes {
        let regions: Vec<Value> = list
            .iter()
            .map(|b| {
                json!({
                    "shape_attributes": {"name": "rect", "x": b.x, "y": b.y, "width": b.w, "height": b.h},
                    "region_attributes": {}
                })
            })
            .collect();
        root.insert(
            image.clone(),
            json!({"filename": image, "size": -1, "regions": regions, "file_attributes": {}}),
        );
    }
    Value::Object(root)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusParams {
    /// Foreground prior; `None` uses the mean rater foreground fraction.
    pub prior: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            prior: None,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            threshold: DEFAULT_CONSENSUS_THRESHOLD,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Frame size per image, with an optional fallback for unlisted images.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameSizes {
    pub default: Option<(usize, usize)>,
    pub per_image: BTreeMap<String, (usize, usize)>,
}

impl FrameSizes {
    pub fn uniform(width: usize, height: usize) -> Self {
        Self {
            default: Some((width, height)),
            per_image: BTreeMap::new(),
        }
    }

    pub fn get(&self, image: &str) -> Option<(usize, usize)> {
        self.per_image.get(image).copied().or(self.default)
    }
}

#[derive(Debug, Clone)]
pub struct ImageConsensus {
    pub image: String,
    pub posterior: ProbabilityMap,
    pub mask: BinaryMask,
    pub boxes: Vec<BoundingBox>,
    pub performance: Vec<RaterPerformance>,
    pub iterations: usize,
    pub converged: bool,
    /// Raters (by position) that had no entry for this image.
    pub missing_raters: Vec<usize>,
}

pub fn pipeline_consensus(
    raters: &[ViaImport],
    frames: &FrameSizes,
    params: &ConsensusParams,
) -> Result<Vec<ImageConsensus>> {
    if raters.len() < 2 {
        return Err(Error::invalid(format!(
            "consensus needs at least 2 annotation files, got {}",
            raters.len()
        )));
    }
    let mut images: Vec<&String> = raters.iter().flat_map(|r| r.boxes.keys()).collect();
    images.sort();
    images.dedup();

    images
        .par_iter()
        .map(|image| {
            let (w, h) = frames
                .get(image)
                .ok_or_else(|| Error::invalid(format!("no frame size for image {image:?}")))?;
            let mut missing_raters = Vec::new();
            let masks = raters
                .iter()
                .enumerate()
                .map(|(i, r)| match r.boxes.get(*image) {
                    Some(b) => boxes_to_mask(b, w, h),
                    None => {
                        missing_raters.push(i);
                        BinaryMask::zeros(w, h)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let prior = params.prior.map_or(Prior::Auto, Prior::Scalar);
            let problem = StapleProblem::new(masks)?
                .with_prior(prior)
                .with_tol(params.tol)
                .with_max_iter(params.max_iter);
            let result = staple_fuse(&problem)?;
            Ok(ImageConsensus {
                image: (*image).clone(),
                mask: consensus_mask(&result, params.threshold)?,
                boxes: consensus_boxes(&result, params.threshold, params.connectivity)?,
                posterior: result.posterior,
                performance: result.performance,
                iterations: result.iterations,
                converged: result.converged,
                missing_raters,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsensusRecord {
    pub image: String,
    pub mask: PathBuf,
    pub boxes_file: PathBuf,
    pub boxes: Vec<BoundingBox>,
    pub performance: Vec<RaterPerformance>,
    pub iterations: usize,
    pub converged: bool,
    pub missing_raters: Vec<usize>,
}

fn output_stem(image: &str) -> String {
    Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.to_string())
}

/// Writes `<stem>_consensus.png`, `<stem>_consensus.json` (boxes) and
/// `<stem>_posterior.pfm` per image into `out_dir`.
pub fn write_consensus_outputs(out_dir: &Path, results: &[ImageConsensus]) -> Result<Vec<ConsensusRecord>> {
    results
        .par_iter()
        .map(|r| {
            let stem = output_stem(&r.image);
            let mask = out_dir.join(format!("{stem}_consensus.png"));
            let boxes_file = out_dir.join(format!("{stem}_consensus.json"));
            write_mask_png(&mask, &r.mask)?;
            write_json(&boxes_file, &r.boxes)?;
            write_pfm(&out_dir.join(format!("{stem}_posterior.pfm")), &r.posterior.to_plane())?;
            Ok(ConsensusRecord {
                image: r.image.clone(),
                mask,
                boxes_file,
                boxes: r.boxes.clone(),
                performance: r.performance.clone(),
                iterations: r.iterations,
                converged: r.converged,
                missing_raters: r.missing_raters.clone(),
            })
        })
        .collect()
}
