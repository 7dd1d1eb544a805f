//! Class-selective relevance maps (CRM) and weak ROI masks derived from them.
//!
//! A CRM scores each spatial cell of the deepest convolutional feature map
//! by how much the classifier outputs move when that cell's features are
//! zeroed (the global-average divisor stays `H·W`). With a GAP + dense
//! head the change in class score `k` is `Σ_c w_ck f_c(x,y) / (H·W)`, and
//! the raw relevance is the sum of squared changes over the selected
//! classes.
//!
//! Heat maps become masks by thresholding, dropping small components,
//! tracing each component into a polygon and rasterizing the polygons.
//! Holes inside a component are filled by that last step.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{label_components, Connectivity};
use crate::error::{Error, Result};
use crate::io::{decode_pfm, read_bytes, read_json, read_pfm, read_plane, write_mask_png};
use crate::manifest::{resolve, DatasetManifest, ManifestEntry, Provenance, Split};
use crate::model::{BinaryMask, ImagePlane, ProbabilityMap};
use crate::polygon::{component_polygons, rasterize_polygons, Polygon};
use crate::preprocess::{resize, ResizeMode};

/// Activations laid out `H × W × C`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureStack {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("feature stack dimensions must be positive"));
        }
        if values.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "feature stack {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    /// Stacks equally sized planes as channels.
    pub fn from_planes(planes: &[ImagePlane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("feature stack needs at least one channel"))?;
        let (w, h) = first.dims();
        for p in planes {
            crate::model::ensure_same_dims((w, h), p.dims())?;
        }
        let c = planes.len();
        let mut values = vec![0.0; w * h * c];
        for (ci, p) in planes.iter().enumerate() {
            for (i, v) in p.pixels().iter().enumerate() {
                values[i * c + ci] = *v;
            }
        }
        Self::new(w, h, c, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// Features of one cell, one value per channel.
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Dense layer on top of global average pooling: `weights[c][k]`, `bias[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl DenseHead {
    pub fn channels(&self) -> usize {
        self.weights.len()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.bias.len();
        if k == 0 || self.weights.is_empty() {
            return Err(Error::invalid("dense head needs at least one channel and one class"));
        }
        if let Some((c, row)) = self.weights.iter().enumerate().find(|(_, r)| r.len() != k) {
            return Err(Error::invalid(format!(
                "weight row {c} has {} entries, expected {k} classes",
                row.len()
            )));
        }
        if self.weights.iter().flatten().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dense head parameters must be finite"));
        }
        Ok(())
    }

    /// Class scores for pooled features.
    pub fn scores(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|k| self.bias[k] + self.weights.iter().zip(pooled).map(|(row, f)| row[k] * f).sum::<f64>())
            .collect()
    }
}

/// Which output nodes contribute to the relevance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSelection {
    #[default]
    All,
    Single(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    /// Min-max normalized relevance.
    pub map: ProbabilityMap,
    pub raw: ImagePlane,
}

impl RelevanceMap {
    /// Normalizes `raw` to `[0, 1]`; a flat map becomes all zeros.
    pub fn from_raw(raw: ImagePlane) -> Self {
        let (min, max) = min_max(raw.pixels());
        let (w, h) = raw.dims();
        let probs = if max > min {
            raw.pixels()
                .iter()
                .map(|&v| ((v - min) / (max - min)).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; w * h]
        };
        Self {
            map: ProbabilityMap::new(w, h, probs).expect("normalized values lie in [0, 1]"),
            raw,
        }
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

pub fn crm(features: &FeatureStack, head: &DenseHead, classes: ClassSelection) -> Result<RelevanceMap> {
    head.validate()?;
    if head.channels() != features.channels() {
        return Err(Error::invalid(format!(
            "dense head expects {} channels, features have {}",
            head.channels(),
            features.channels()
        )));
    }
    let selected: Vec<usize> = match classes {
        ClassSelection::All => (0..head.classes()).collect(),
        ClassSelection::Single(k) if k < head.classes() => vec![k],
        ClassSelection::Single(k) => {
            return Err(Error::invalid(format!(
                "class {k} out of range for a {}-class head",
                head.classes()
            )))
        }
    };
    let (w, h) = (features.width(), features.height());
    let cells = (w * h) as f64;
    let raw = ImagePlane::from_fn(w, h, |x, y| {
        let f = features.cell(x, y);
        selected
            .iter()
            .map(|&k| {
                let delta: f64 = head.weights.iter().zip(f).map(|(row, v)| row[k] * v).sum::<f64>() / cells;
                delta * delta
            })
            .sum()
    })?;
    Ok(RelevanceMap::from_raw(raw))
}

/// Bilinear upsampling followed by renormalization to `[0, 1]`.
pub fn upscale_relevance(map: &RelevanceMap, out_w: usize, out_h: usize) -> Result<RelevanceMap> {
    let raw = resize(&map.raw, out_w, out_h, ResizeMode::Bilinear)?;
    let up = resize(&map.map.to_plane(), out_w, out_h, ResizeMode::Bilinear)?;
    let (min, max) = min_max(up.pixels());
    let probs: Vec<f64> = if max > min {
        up.pixels()
            .iter()
            .map(|&v| ((v - min) / (max - min)).clamp(0.0, 1.0))
            .collect()
    } else {
        up.pixels().iter().map(|v| v.clamp(0.0, 1.0)).collect()
    };
    Ok(RelevanceMap {
        map: ProbabilityMap::new(out_w, out_h, probs)?,
        raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatMaskParams {
    pub threshold: f64,
    pub connectivity: Connectivity,
    pub min_area: usize,
}

impl Default for HeatMaskParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            connectivity: Connectivity::Eight,
            min_area: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMask {
    pub mask: BinaryMask,
    pub polygons: Vec<Polygon>,
}

pub fn heat_to_mask(map: &ProbabilityMap, params: &HeatMaskParams) -> Result<HeatMask> {
    if !(params.threshold > 0.0 && params.threshold < 1.0) {
        return Err(Error::invalid(format!(
            "heat-map threshold {} must lie in (0, 1)",
            params.threshold
        )));
    }
    let binary = map.threshold(params.threshold);
    let labeling = label_components(&binary, params.connectivity);
    let mut kept = labeling.clone();
    kept.components.retain(|c| c.area >= params.min_area);
    let polygons = component_polygons(&kept, params.connectivity);
    let (w, h) = map.dims();
    Ok(HeatMask {
        mask: rasterize_polygons(&polygons, w, h)?,
        polygons,
    })
}

/// Reads a multi-page PFM, or a directory of single-channel PFMs taken in
/// lexical filename order.
pub fn read_feature_stack(path: &Path) -> Result<FeatureStack> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(path, "no .pfm channel files in directory"));
        }
        let planes = files.iter().map(|f| read_pfm(f)).collect::<Result<Vec<_>>>()?;
        return FeatureStack::from_planes(&planes).map_err(|e| Error::format(path, e.to_string()));
    }
    let data = decode_pfm(&read_bytes(path)?, path)?;
    let planes = data
        .pages
        .into_iter()
        .map(|p| ImagePlane::new(data.width, data.height, p))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    FeatureStack::from_planes(&planes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_dense_head(path: &Path) -> Result<DenseHead> {
    let head: DenseHead = read_json(path)?;
    head.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(head)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakPairParams {
    /// Class label whose images receive weak masks.
    pub positive_label: String,
    pub heat: HeatMaskParams,
    /// Mask size; `None` uses each image's own size.
    pub size: Option<(usize, usize)>,
}

impl Default for WeakPairParams {
    fn default() -> Self {
        Self {
            positive_label: "1".to_string(),
            heat: HeatMaskParams::default(),
            size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub image: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakPairs {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkipReport>,
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

fn weak_entry(
    entry: &ManifestEntry,
    manifest_path: &Path,
    relevance_dir: &Path,
    mask_dir: &Path,
    params: &WeakPairParams,
) -> Result<ManifestEntry> {
    let stem = file_stem(&entry.image);
    let heat_path = relevance_dir.join(format!("{stem}.pfm"));
    if !heat_path.is_file() {
        return Err(Error::invalid(format!("no relevance map at {}", heat_path.display())));
    }
    let relevance = RelevanceMap::from_raw(read_pfm(&heat_path)?);
    let (w, h) = match params.size {
        Some(size) => size,
        None => read_plane(&resolve(manifest_path, &entry.image))?.dims(),
    };
    let relevance = upscale_relevance(&relevance, w, h)?;
    let heat = heat_to_mask(&relevance.map, &params.heat)?;
    let mask_path = mask_dir.join(format!("{stem}_weak.png"));
    write_mask_png(&mask_path, &heat.mask)?;
    Ok(ManifestEntry {
        image: entry.image.clone(),
        mask: mask_path.to_string_lossy().into_owned(),
        label: entry.label.clone(),
        patient: entry.patient.clone(),
        split: Split::Train,
        source: Some(Provenance::Weak),
    })
}

/// Builds a weak-mask training pair for every positive entry of
/// `manifest`, reading `relevance_dir/<image stem>.pfm` and writing masks
/// into `mask_dir`. Entries whose map cannot be used are reported and
/// skipped.
pub fn build_weak_pairs(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    relevance_dir: &Path,
    mask_dir: &Path,
    params: &WeakPairParams,
) -> Result<WeakPairs> {
    let positives: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.label == params.positive_label)
        .collect();
    let results: Vec<Result<ManifestEntry>> = positives
        .par_iter()
        .map(|e| weak_entry(e, manifest_path, relevance_dir, mask_dir, params))
        .collect();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (e, r) in positives.iter().zip(results) {
        match r {
            Ok(entry) => entries.push(entry),
            Err(err) => skipped.push(SkipReport {
                image: e.image.clone(),
                reason: err.to_string(),
            }),
        }
    }
    Ok(WeakPairs {
        manifest: DatasetManifest::new(entries)?,
        skipped,
    })
}
