//! Segmentation metrics: pixel confusion counts, overlap ratios, instance
//! matching and average precision over a range of IOU thresholds.
//!
//! An instance is a connected component of the binarized probability map,
//! scored by its mean probability. Matching is greedy by descending score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{label_components, Connectivity};
use crate::error::{Error, Result};
use crate::model::{
    box_iou, boxes_to_mask, ensure_same_dims, mask_iou, BinaryMask, BoundingBox, ConfusionCounts, ProbabilityMap,
};

/// How a ratio with a zero denominator was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroDenominator {
    /// Both compared sets were empty; scored 1.
    VacuousAgreement,
    /// Only one side was empty; scored 0.
    Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<ZeroDenominator>,
}

impl Ratio {
    fn of(num: u64, den: u64, vacuous: bool) -> Ratio {
        if den > 0 {
            return Ratio {
                value: num as f64 / den as f64,
                flag: None,
            };
        }
        if vacuous {
            Ratio {
                value: 1.0,
                flag: Some(ZeroDenominator::VacuousAgreement),
            }
        } else {
            Ratio {
                value: 0.0,
                flag: Some(ZeroDenominator::Undefined),
            }
        }
    }
}

pub fn pixel_confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    ensure_same_dims(gt.dims(), pred.dims())?;
    let mut c = ConfusionCounts::new(0, 0, 0, 0);
    let mut tn = 0;
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    c.tn = Some(tn);
    Ok(c)
}

/// `TP / (TP + FP + FN)`.
pub fn iou(c: &ConfusionCounts) -> Ratio {
    Ratio::of(c.tp, c.tp + c.fp + c.fn_, true)
}

/// `2 TP / (2 TP + FP + FN)`.
pub fn dice(c: &ConfusionCounts) -> Ratio {
    Ratio::of(2 * c.tp, 2 * c.tp + c.fp + c.fn_, true)
}

/// `TP / (TP + FP)`; with no predictions this is 1 only if there is also
/// nothing to find.
pub fn precision(c: &ConfusionCounts) -> Ratio {
    Ratio::of(c.tp, c.tp + c.fp, c.fn_ == 0)
}

/// `TP / (TP + FN)`; with no ground truth this is 1 only if nothing was
/// predicted either.
pub fn recall(c: &ConfusionCounts) -> Ratio {
    Ratio::of(c.tp, c.tp + c.fn_, c.fp == 0)
}

/// Dice implied by a Jaccard/IOU value, `2J / (1 + J)`.
pub fn dice_from_iou(j: f64) -> f64 {
    2.0 * j / (1.0 + j)
}

/// An instance region: either a full-frame mask or a box.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Mask(BinaryMask),
    Box(BoundingBox),
}

impl Region {
    pub fn area(&self) -> usize {
        match self {
            Region::Mask(m) => m.count_ones(),
            Region::Box(b) => b.area(),
        }
    }

    pub fn iou(&self, other: &Region) -> Result<f64> {
        match (self, other) {
            (Region::Box(a), Region::Box(b)) => Ok(box_iou(a, b)),
            (Region::Mask(a), Region::Mask(b)) => mask_iou(a, b),
            (Region::Mask(m), Region::Box(b)) | (Region::Box(b), Region::Mask(m)) => {
                let (w, h) = m.dims();
                // a box outside the frame shares no pixels with the mask
                match b.clip(w, h) {
                    Some(clipped) => {
                        let inter = (clipped.y..clipped.bottom())
                            .map(|y| (clipped.x..clipped.right()).filter(|&x| m.get(x, y)).count())
                            .sum::<usize>();
                        let union = m.count_ones() + b.area() - inter;
                        Ok(inter as f64 / union as f64)
                    }
                    None => Ok(0.0),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDetection {
    pub region: Region,
    pub score: f64,
}

impl InstanceDetection {
    pub fn new(region: Region, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("detection score {score} outside [0, 1]")));
        }
        if region.area() == 0 {
            return Err(Error::invalid("detection region is empty"));
        }
        Ok(Self { region, score })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall pairs ordered by non-decreasing recall.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApConfig {
    pub iou_thresholds: Vec<f64>,
    pub binarize_threshold: f64,
    pub min_component_area: usize,
    pub connectivity: Connectivity,
}

impl Default for ApConfig {
    /// IOU thresholds 0.50, 0.55, ..., 0.95; binarization at 0.5.
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            binarize_threshold: 0.5,
            min_component_area: 0,
            connectivity: Connectivity::Eight,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::invalid("at least one IOU threshold is required"));
        }
        for t in &self.iou_thresholds {
            check_iou_threshold(*t)?;
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("IOU thresholds must be strictly increasing"));
        }
        if !(self.binarize_threshold.is_finite()) {
            return Err(Error::invalid("binarize threshold must be finite"));
        }
        Ok(())
    }
}

fn check_iou_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("IOU threshold {t} must lie in (0, 1]")));
    }
    Ok(())
}

/// Connected components of the binarized map above the area floor, scored
/// by mean probability, highest score first (raster order on ties).
pub fn extract_instances(pred: &ProbabilityMap, config: &ApConfig) -> Vec<InstanceDetection> {
    let binary = pred.threshold(config.binarize_threshold);
    let labeling = label_components(&binary, config.connectivity);
    let mut dets: Vec<InstanceDetection> = labeling
        .components
        .iter()
        .filter(|c| c.area >= config.min_component_area.max(1))
        .map(|c| {
            let pixels = labeling.pixels_of(c.label);
            let score = pixels.iter().map(|&i| pred.probs()[i]).sum::<f64>() / pixels.len() as f64;
            InstanceDetection {
                region: Region::Mask(labeling.component_mask(c.label)),
                score: score.clamp(0.0, 1.0),
            }
        })
        .collect();
    // stable sort keeps the raster order of equal scores
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets
}

/// Ground-truth instances of a mask: one region per connected component.
pub fn mask_instances(gt: &BinaryMask, connectivity: Connectivity) -> Vec<Region> {
    let labeling = label_components(gt, connectivity);
    labeling
        .components
        .iter()
        .map(|c| Region::Mask(labeling.component_mask(c.label)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: ConfusionCounts,
    pub curve: PrCurve,
    /// `(score, is_true_positive)` per detection in ranking order.
    pub outcomes: Vec<(f64, bool)>,
    pub num_gt: usize,
}

fn ranking(dets: &[InstanceDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

fn curve_from_outcomes(outcomes: &[(f64, bool)], num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(outcomes.len());
    for (k, &(_, hit)) in outcomes.iter().enumerate() {
        tp += hit as usize;
        points.push(PrPoint {
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            precision: tp as f64 / (k + 1) as f64,
        });
    }
    PrCurve { points }
}

/// Greedy matching: detections in descending score each take the unmatched
/// ground-truth region of highest IOU (lowest index on ties) when that IOU
/// reaches `iou_threshold`.
pub fn match_instances(dets: &[InstanceDetection], gts: &[Region], iou_threshold: f64) -> Result<MatchResult> {
    check_iou_threshold(iou_threshold)?;
    let order = ranking(dets);
    let ious = iou_matrix(dets, gts)?;
    Ok(match_with_ious(dets, &order, &ious, gts.len(), iou_threshold))
}

fn iou_matrix(dets: &[InstanceDetection], gts: &[Region]) -> Result<Vec<Vec<f64>>> {
    dets.par_iter()
        .map(|d| gts.iter().map(|g| d.region.iou(g)).collect())
        .collect()
}

fn match_with_ious(
    dets: &[InstanceDetection],
    order: &[usize],
    ious: &[Vec<f64>],
    num_gt: usize,
    iou_threshold: f64,
) -> MatchResult {
    let mut taken = vec![false; num_gt];
    let mut outcomes = Vec::with_capacity(order.len());
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in ious[d].iter().enumerate() {
            if taken[g] {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let hit = match best {
            Some((g, v)) if v >= iou_threshold => {
                taken[g] = true;
                true
            }
            _ => false,
        };
        outcomes.push((dets[d].score, hit));
    }
    let tp = outcomes.iter().filter(|o| o.1).count() as u64;
    let counts = ConfusionCounts::without_tn(tp, outcomes.len() as u64 - tp, num_gt as u64 - tp);
    MatchResult {
        curve: curve_from_outcomes(&outcomes, num_gt),
        counts,
        outcomes,
        num_gt,
    }
}

/// Area under the precision envelope (each precision replaced by the
/// maximum precision at equal or higher recall), summed over recall steps.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let pts = &curve.points;
    let mut envelope: Vec<f64> = pts.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in pts.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub iou_thresholds: Vec<f64>,
    pub ap_per_threshold: Vec<f64>,
    /// Unweighted mean over the thresholds.
    pub ap_range: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// AP for one image at every configured threshold, and their mean.
pub fn ap_range(dets: &[InstanceDetection], gts: &[Region], config: &ApConfig) -> Result<ApSummary> {
    ap_range_dataset(&[(dets.to_vec(), gts.to_vec())], config)
}

/// Dataset-level AP: each image is matched on its own, then all detections
/// are ranked together by score (image order, then in-image rank, on ties).
pub fn ap_range_dataset(images: &[(Vec<InstanceDetection>, Vec<Region>)], config: &ApConfig) -> Result<ApSummary> {
    config.validate()?;
    let num_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if num_gt == 0 {
        return Err(Error::numerical(
            "AP is undefined: no ground-truth instances in the evaluation set",
        ));
    }
    let prepared: Vec<(Vec<usize>, Vec<Vec<f64>>)> = images
        .par_iter()
        .map(|(d, g)| Ok((ranking(d), iou_matrix(d, g)?)))
        .collect::<Result<_>>()?;

    let mut ap_per_threshold = Vec::with_capacity(config.iou_thresholds.len());
    for &t in &config.iou_thresholds {
        let mut outcomes: Vec<(f64, bool)> = Vec::new();
        for ((dets, gts), (order, ious)) in images.iter().zip(&prepared) {
            outcomes.extend(match_with_ious(dets, order, ious, gts.len(), t).outcomes);
        }
        outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
        ap_per_threshold.push(average_precision(&curve_from_outcomes(&outcomes, num_gt)));
    }
    let ap_range = ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64;
    Ok(ApSummary {
        iou_thresholds: config.iou_thresholds.clone(),
        ap_per_threshold,
        ap_range,
        num_gt,
        num_detections: images.iter().map(|(d, _)| d.len()).sum(),
    })
}

/// Pooled PR curve over several images at one IOU threshold.
pub fn dataset_curve(images: &[(Vec<InstanceDetection>, Vec<Region>)], iou_threshold: f64) -> Result<PrCurve> {
    let num_gt = images.iter().map(|(_, g)| g.len()).sum();
    let mut outcomes = Vec::new();
    for (d, g) in images {
        outcomes.extend(match_instances(d, g, iou_threshold)?.outcomes);
    }
    outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(curve_from_outcomes(&outcomes, num_gt))
}

/// Ground truth for one image: the pixel mask and its instance regions.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub mask: BinaryMask,
    pub instances: Vec<Region>,
}

impl GroundTruth {
    pub fn from_mask(mask: BinaryMask, connectivity: Connectivity) -> Self {
        let instances = mask_instances(&mask, connectivity);
        Self { mask, instances }
    }

    pub fn from_boxes(boxes: &[BoundingBox], width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            mask: boxes_to_mask(boxes, width, height)?,
            instances: boxes.iter().copied().map(Region::Box).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelScores {
    pub iou: Ratio,
    pub dice: Ratio,
    pub precision: Ratio,
    pub recall: Ratio,
}

impl PixelScores {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        Self {
            iou: iou(c),
            dice: dice(c),
            precision: precision(c),
            recall: recall(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub counts: ConfusionCounts,
    pub scores: PixelScores,
    /// Absent when the image has no ground-truth instances.
    pub ap: Option<ApSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEval {
    /// Scores of the summed confusion counts.
    pub pooled_counts: ConfusionCounts,
    pub pooled: PixelScores,
    /// Unweighted means of the per-image scores.
    pub mean_of_images: MeanScores,
    pub ap: ApSummary,
}

pub fn evaluate_image(
    name: &str,
    pred: &ProbabilityMap,
    gt: &GroundTruth,
    config: &ApConfig,
) -> Result<(ImageEval, Vec<InstanceDetection>)> {
    config.validate()?;
    let binary = pred.threshold(config.binarize_threshold);
    let counts = pixel_confusion(&binary, &gt.mask)?;
    let dets = extract_instances(pred, config);
    let ap = if gt.instances.is_empty() {
        None
    } else {
        Some(ap_range(&dets, &gt.instances, config)?)
    };
    Ok((
        ImageEval {
            name: name.to_string(),
            counts,
            scores: PixelScores::from_counts(&counts),
            ap,
        },
        dets,
    ))
}

/// Pooled and mean-of-images scores plus dataset-level AP.
pub fn evaluate_dataset(
    images: &[(String, ProbabilityMap, GroundTruth)],
    config: &ApConfig,
) -> Result<(Vec<ImageEval>, AggregateEval)> {
    if images.is_empty() {
        return Err(Error::invalid("no images to evaluate"));
    }
    let per: Vec<(ImageEval, Vec<InstanceDetection>)> = images
        .par_iter()
        .map(|(name, pred, gt)| evaluate_image(name, pred, gt, config))
        .collect::<Result<_>>()?;
    let pooled_counts = per
        .iter()
        .map(|(e, _)| e.counts)
        .fold(ConfusionCounts::new(0, 0, 0, 0), |a, b| a + b);
    let n = per.len() as f64;
    let mean = |f: fn(&PixelScores) -> f64| per.iter().map(|(e, _)| f(&e.scores)).sum::<f64>() / n;
    let mean_of_images = MeanScores {
        iou: mean(|s| s.iou.value),
        dice: mean(|s| s.dice.value),
        precision: mean(|s| s.precision.value),
        recall: mean(|s| s.recall.value),
    };
    let pairs: Vec<(Vec<InstanceDetection>, Vec<Region>)> = per
        .iter()
        .zip(images)
        .map(|((_, d), (_, _, gt))| (d.clone(), gt.instances.clone()))
        .collect();
    let ap = ap_range_dataset(&pairs, config)?;
    let evals = per.into_iter().map(|(e, _)| e).collect();
    Ok((
        evals,
        AggregateEval {
            pooled: PixelScores::from_counts(&pooled_counts),
            pooled_counts,
            mean_of_images,
            ap,
        },
    ))
}
