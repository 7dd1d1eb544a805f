//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use roikit::augment::{assemble_at, augment_pair, split_manifest, AugmentSpec};
use roikit::cls_metrics::{classify_report, CiOptions};
use roikit::io::{
    read_boxes, read_json, read_mask_png, read_pfm, read_plane, read_probability_pfm, read_scored_samples,
    write_atomic, write_boxes, write_json, write_mask_png, write_pfm, write_probability_pfm,
};
use roikit::manifest::resolve;
use roikit::preprocess::{lung_crop, preprocess, rescale_boxes, resize, PreprocessConfig, ResizeMode};
use roikit::seg_metrics::{dataset_curve, evaluate_dataset, extract_instances, ApConfig, GroundTruth};
use roikit::staple::{consensus_boxes, consensus_mask, staple_fuse, Prior, StapleProblem};
use roikit::tversky::{tversky_grad, tversky_index, tversky_loss, OverlapSums, TverskyParams};
use roikit::via::{export_via, import_via, pipeline_consensus, write_consensus_outputs, ConsensusParams, FrameSizes};
use roikit::weak_loc::{
    build_weak_pairs, crm, heat_to_mask, read_dense_head, read_feature_stack, upscale_relevance, ClassSelection,
    HeatMaskParams, RelevanceMap, WeakPairParams,
};
use roikit::{
    boxes_to_mask, BinaryMask, DatasetManifest, Error, ImagePlane, ManifestEntry, ProbabilityMap, Result, Split,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::Output;
use crate::{Command, StapleArgs};

pub struct Context {
    pub seed: Option<u64>,
}

fn to_value<T: Serialize + ?Sized>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::invalid(format!("cannot serialize output: {e}")))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::invalid(format!("cannot resolve {}: {e}", p.display())))
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn consensus_params(s: &StapleArgs) -> ConsensusParams {
    ConsensusParams {
        prior: s.prior,
        tol: s.tol,
        max_iter: s.max_iter,
        threshold: s.threshold,
        connectivity: s.connectivity,
    }
}

pub fn run(command: Command, ctx: &Context) -> Result<Output> {
    let value = match command {
        Command::Fuse {
            masks,
            prior_map,
            staple,
            out_dir,
        } => fuse(&masks, prior_map.as_deref(), &staple, &out_dir)?,
        Command::Consensus {
            via,
            frame,
            frames,
            staple,
            out_dir,
        } => consensus(&via, frame, frames.as_deref(), &staple, &out_dir)?,
        Command::EvalSeg {
            pred,
            gt,
            out,
            binarize,
            min_area,
            connectivity,
            iou_thresholds,
        } => {
            let mut config = ApConfig {
                binarize_threshold: binarize,
                min_component_area: min_area,
                connectivity,
                ..ApConfig::default()
            };
            if let Some(t) = iou_thresholds {
                config.iou_thresholds = t;
            }
            eval_seg(&pred, &gt, &out, &config)?
        }
        Command::EvalCls {
            scores,
            threshold,
            confidence,
            joint_sqrt,
            out,
        } => {
            let samples = read_scored_samples(&scores)?;
            let report = classify_report(&samples, threshold, CiOptions { confidence, joint_sqrt })?;
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            to_value(&report)?
        }
        Command::Preprocess {
            image,
            lung_mask,
            size,
            lo,
            hi,
            out,
            boxes,
            out_boxes,
            mask,
            out_mask,
        } => {
            let config = PreprocessConfig {
                size,
                lo_pct: lo,
                hi_pct: hi,
            };
            let extras = PreprocessExtras {
                boxes: boxes.zip(out_boxes),
                mask: mask.zip(out_mask),
            };
            preprocess_cmd(&image, &lung_mask, &config, &out, extras)?
        }
        Command::Loss {
            pred,
            gt,
            alpha,
            beta,
            smooth,
            grad_out,
        } => loss(
            &pred,
            &gt,
            TverskyParams::new(alpha, beta, smooth)?,
            grad_out.as_deref(),
        )?,
        Command::Crm {
            features,
            head,
            class,
            upscale,
            out,
            raw_out,
        } => crm_cmd(&features, &head, class, upscale, &out, raw_out.as_deref())?,
        Command::HeatToMask {
            input,
            threshold,
            min_area,
            connectivity,
            out,
            out_polys,
        } => {
            let params = HeatMaskParams {
                threshold,
                connectivity,
                min_area,
            };
            heat_to_mask_cmd(&input, &params, &out, out_polys.as_deref())?
        }
        Command::WeakPairs {
            manifest,
            relevance_dir,
            mask_dir,
            out,
            positive_label,
            threshold,
            min_area,
            connectivity,
            size,
        } => {
            let params = WeakPairParams {
                positive_label,
                heat: HeatMaskParams {
                    threshold,
                    connectivity,
                    min_area,
                },
                size,
            };
            weak_pairs(&manifest, &relevance_dir, &mask_dir, &out, &params)?
        }
        Command::Augment {
            manifest,
            spec,
            repeat,
            out_dir,
            out_manifest,
        } => {
            let mut spec: AugmentSpec = match spec {
                Some(p) => read_json(&p)?,
                None => AugmentSpec::default(),
            };
            if let Some(seed) = ctx.seed {
                spec.seed = seed;
            }
            augment(&manifest, &spec, repeat, &out_dir, &out_manifest)?
        }
        Command::Split {
            manifest,
            val_frac,
            out,
        } => {
            let m = DatasetManifest::read(&manifest)?;
            let split = split_manifest(&m, val_frac, ctx.seed.unwrap_or(0))?;
            match out {
                None => return Ok(Output::Raw(split.to_csv()?)),
                Some(out) => {
                    split.write(&out)?;
                    split_summary(&split, &out)
                }
            }
        }
        Command::AssembleAt { base, weak, out } => {
            let base = DatasetManifest::read(&base)?;
            let weak = DatasetManifest::read(&weak)?;
            let at = assemble_at(&base, &weak)?;
            at.write(&out)?;
            json!({
                "base_entries": base.len(),
                "weak_entries": weak.len(),
                "total_entries": at.len(),
                "train_entries": at.entries.iter().filter(|e| e.split == Split::Train).count(),
                "out": show(&out),
            })
        }
        Command::ViaImport {
            via,
            out,
            export_via: export,
        } => {
            let import = import_via(&via)?;
            for s in &import.skipped {
                eprintln!(
                    "warning: {}: region {} of {} skipped: {}",
                    via.display(),
                    s.region,
                    s.image,
                    s.message
                );
            }
            for s in &import.errors {
                eprintln!(
                    "warning: {}: region {} of {} rejected: {}",
                    via.display(),
                    s.region,
                    s.image,
                    s.message
                );
            }
            if let Some(out) = out {
                write_json(&out, &import.boxes)?;
            }
            if let Some(path) = export {
                write_json(&path, &export_via(&import.boxes))?;
            }
            json!({
                "images": import.boxes.len(),
                "boxes_total": import.boxes.values().map(Vec::len).sum::<usize>(),
                "boxes": to_value(&import.boxes)?,
                "skipped": to_value(&import.skipped)?,
                "errors": to_value(&import.errors)?,
            })
        }
        Command::BoxesToMask { boxes, frame, out } => {
            let list = read_boxes(&boxes)?;
            let mask = boxes_to_mask(&list, frame.0, frame.1)?;
            write_mask_png(&out, &mask)?;
            json!({
                "width": frame.0,
                "height": frame.1,
                "boxes": list.len(),
                "foreground_pixels": mask.count_ones(),
                "out": show(&out),
            })
        }
    };
    Ok(Output::Json(value))
}

fn fuse(masks: &[PathBuf], prior_map: Option<&Path>, s: &StapleArgs, out_dir: &Path) -> Result<Value> {
    let raters = masks.iter().map(|p| read_mask_png(p)).collect::<Result<Vec<_>>>()?;
    let prior = match (prior_map, s.prior) {
        (Some(p), _) => Prior::Map(read_probability_pfm(p)?),
        (None, Some(g)) => Prior::Scalar(g),
        (None, None) => Prior::Auto,
    };
    let problem = StapleProblem::new(raters)?
        .with_prior(prior)
        .with_tol(s.tol)
        .with_max_iter(s.max_iter);
    let result = staple_fuse(&problem)?;
    if !result.converged {
        eprintln!(
            "warning: STAPLE stopped after {} iterations without converging (last change {:e})",
            result.iterations, result.final_delta
        );
    }
    let mask = consensus_mask(&result, s.threshold)?;
    let boxes = consensus_boxes(&result, s.threshold, s.connectivity)?;
    let mask_path = out_dir.join("consensus.png");
    let boxes_path = out_dir.join("consensus_boxes.json");
    let posterior_path = out_dir.join("posterior.pfm");
    write_mask_png(&mask_path, &mask)?;
    write_boxes(&boxes_path, &boxes)?;
    write_probability_pfm(&posterior_path, &result.posterior)?;
    let (w, h) = problem.dims();
    Ok(json!({
        "raters": masks.iter().map(|p| show(p)).collect::<Vec<_>>(),
        "width": w,
        "height": h,
        "performance": to_value(&result.performance)?,
        "iterations": result.iterations,
        "converged": result.converged,
        "final_delta": result.final_delta,
        "log_likelihood": result.log_likelihood,
        "frozen_updates": result.frozen_updates,
        "consensus_pixels": mask.count_ones(),
        "boxes": to_value(&boxes)?,
        "outputs": {
            "mask": show(&mask_path),
            "boxes": show(&boxes_path),
            "posterior": show(&posterior_path),
        },
    }))
}

fn consensus(
    via: &[PathBuf],
    frame: Option<(usize, usize)>,
    frames: Option<&Path>,
    s: &StapleArgs,
    out_dir: &Path,
) -> Result<Value> {
    let per_image: BTreeMap<String, (usize, usize)> = match frames {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let sizes = FrameSizes {
        default: frame,
        per_image,
    };
    let imports = via.iter().map(|p| import_via(p)).collect::<Result<Vec<_>>>()?;
    let mut issues = Vec::new();
    for (p, imp) in via.iter().zip(&imports) {
        for r in imp.skipped.iter().chain(&imp.errors) {
            eprintln!(
                "warning: {}: region {} of {}: {}",
                p.display(),
                r.region,
                r.image,
                r.message
            );
            issues.push(json!({"file": show(p), "image": r.image, "region": r.region, "message": r.message}));
        }
    }
    let results = pipeline_consensus(&imports, &sizes, &consensus_params(s))?;
    for r in &results {
        for &i in &r.missing_raters {
            eprintln!(
                "warning: {} has no entry in {}; counted as an all-background rater",
                r.image,
                via[i].display()
            );
        }
    }
    let records = write_consensus_outputs(out_dir, &results)?;
    Ok(json!({
        "raters": via.iter().map(|p| show(p)).collect::<Vec<_>>(),
        "images": to_value(&records)?,
        "annotation_issues": issues,
    }))
}

fn ground_truth(gt_dir: &Path, stem: &str, pred: &ProbabilityMap, config: &ApConfig) -> Result<GroundTruth> {
    let png = gt_dir.join(format!("{stem}.png"));
    if png.is_file() {
        return Ok(GroundTruth::from_mask(read_mask_png(&png)?, config.connectivity));
    }
    let json = gt_dir.join(format!("{stem}.json"));
    if json.is_file() {
        return GroundTruth::from_boxes(&read_boxes(&json)?, pred.width(), pred.height());
    }
    Err(Error::invalid(format!(
        "no ground truth for {stem} in {} (looked for .png and .json)",
        gt_dir.display()
    )))
}

fn pfm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::invalid(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn eval_seg(pred_dir: &Path, gt_dir: &Path, out: &Path, config: &ApConfig) -> Result<Value> {
    config.validate()?;
    let files = pfm_files(pred_dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no .pfm predictions in {}", pred_dir.display())));
    }
    let images = files
        .par_iter()
        .map(|p| {
            let stem = file_stem(p);
            let pred = read_probability_pfm(p)?;
            let gt = ground_truth(gt_dir, &stem, &pred, config)?;
            Ok((stem, pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let (per_image, aggregate) = evaluate_dataset(&images, config)?;

    let pairs: Vec<_> = images
        .par_iter()
        .map(|(_, pred, gt)| (extract_instances(pred, config), gt.instances.clone()))
        .collect();
    let mut pr = csv_writer();
    pr.write_record(["iou_threshold", "recall", "precision"])
        .map_err(csv_err)?;
    for &t in &config.iou_thresholds {
        for p in dataset_curve(&pairs, t)?.points {
            pr.write_record([t.to_string(), p.recall.to_string(), p.precision.to_string()])
                .map_err(csv_err)?;
        }
    }
    let pr_path = out.with_extension("pr.csv");
    write_atomic(&pr_path, &pr.into_inner().map_err(|e| csv_err(e.into_error().into()))?)?;

    let metrics = json!({
        "config": to_value(config)?,
        "per_image": to_value(&per_image)?,
        "aggregate": to_value(&aggregate)?,
    });
    write_json(out, &metrics)?;
    Ok(json!({
        "images": per_image.len(),
        "aggregate": to_value(&aggregate)?,
        "outputs": {"metrics": show(out), "pr_curves": show(&pr_path)},
    }))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("cannot write CSV: {e}"))
}

struct PreprocessExtras {
    boxes: Option<(PathBuf, PathBuf)>,
    mask: Option<(PathBuf, PathBuf)>,
}

fn preprocess_cmd(
    image: &Path,
    lung_mask: &Path,
    config: &PreprocessConfig,
    out: &Path,
    extras: PreprocessExtras,
) -> Result<Value> {
    let img = read_plane(image)?;
    let lungs = read_mask_png(lung_mask)?;
    let result = preprocess(&img, &lungs, config)?;
    if result.contrast_degenerate {
        eprintln!(
            "warning: {}: percentile window collapsed; contrast set to zero",
            image.display()
        );
    }
    if result.stats.degenerate {
        eprintln!("warning: {}: zero variance after saturation", image.display());
    }
    write_pfm(out, &result.image)?;
    let mut outputs = json!({"image": show(out)});

    let mut dropped = Value::Null;
    if let Some((src, dst)) = extras.boxes {
        let (kept, lost) = rescale_boxes(&read_boxes(&src)?, &result.transform);
        for d in &lost {
            eprintln!(
                "warning: box #{} {:?} falls outside the lung crop and was dropped",
                d.index, d.original
            );
        }
        write_boxes(&dst, &kept)?;
        outputs["boxes"] = json!(show(&dst));
        dropped = to_value(&lost)?;
    }
    if let Some((src, dst)) = extras.mask {
        let roi = read_mask_png(&src)?;
        let plane = ImagePlane::new(
            roi.width(),
            roi.height(),
            roi.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?;
        let (cropped, _) = lung_crop(&plane, &lungs)?;
        let sized = resize(&cropped, config.size, config.size, ResizeMode::Nearest)?;
        let mask = BinaryMask::new(
            config.size,
            config.size,
            sized.pixels().iter().map(|&v| v > 0.5).collect(),
        )?;
        write_mask_png(&dst, &mask)?;
        outputs["mask"] = json!(show(&dst));
    }
    Ok(json!({
        "config": to_value(config)?,
        "transform": to_value(&result.transform)?,
        "stats": to_value(&result.stats)?,
        "contrast_degenerate": result.contrast_degenerate,
        "dropped_boxes": dropped,
        "outputs": outputs,
    }))
}

fn loss(pred: &Path, gt: &Path, params: TverskyParams, grad_out: Option<&Path>) -> Result<Value> {
    let p = read_probability_pfm(pred)?;
    let g = read_mask_png(gt)?;
    let sums = OverlapSums::compute(&p, &g)?;
    let l = tversky_loss(&p, &g, &params)?;
    let idx = tversky_index(&p, &g, &params)?;
    if let Some(path) = grad_out {
        write_pfm(path, &tversky_grad(&p, &g, &params)?)?;
    }
    Ok(json!({
        "loss": l.value,
        "index": idx.value,
        "degenerate": l.degenerate,
        "tp": sums.tp,
        "fp": sums.fp,
        "fn": sums.fn_,
        "alpha": params.alpha,
        "beta": params.beta,
        "smooth": params.smooth,
        "gradient": grad_out.map(show),
    }))
}

fn crm_cmd(
    features: &Path,
    head: &Path,
    class: Option<usize>,
    upscale: Option<(usize, usize)>,
    out: &Path,
    raw_out: Option<&Path>,
) -> Result<Value> {
    let stack = read_feature_stack(features)?;
    let head = read_dense_head(head)?;
    let selection = class.map_or(ClassSelection::All, ClassSelection::Single);
    let mut map = crm(&stack, &head, selection)?;
    if let Some((w, h)) = upscale {
        map = upscale_relevance(&map, w, h)?;
    }
    write_probability_pfm(out, &map.map)?;
    if let Some(p) = raw_out {
        write_pfm(p, &map.raw)?;
    }
    let raw = map.raw.pixels();
    Ok(json!({
        "feature_width": stack.width(),
        "feature_height": stack.height(),
        "channels": stack.channels(),
        "classes": head.classes(),
        "selection": to_value(&selection)?,
        "width": map.map.width(),
        "height": map.map.height(),
        "raw_min": raw.iter().copied().fold(f64::INFINITY, f64::min),
        "raw_max": raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "outputs": {"map": show(out), "raw": raw_out.map(show)},
    }))
}

fn heat_to_mask_cmd(input: &Path, params: &HeatMaskParams, out: &Path, out_polys: Option<&Path>) -> Result<Value> {
    let plane = read_pfm(input)?;
    let in_unit = plane.pixels().iter().all(|v| (0.0..=1.0).contains(v));
    let map = if in_unit {
        ProbabilityMap::new(plane.width(), plane.height(), plane.into_pixels())?
    } else {
        eprintln!(
            "warning: {}: values outside [0, 1]; min-max normalized",
            input.display()
        );
        RelevanceMap::from_raw(plane).map
    };
    let result = heat_to_mask(&map, params)?;
    write_mask_png(out, &result.mask)?;
    if let Some(p) = out_polys {
        write_json(p, &result.polygons)?;
    }
    Ok(json!({
        "width": map.width(),
        "height": map.height(),
        "normalized": !in_unit,
        "components": result.polygons.len(),
        "vertices": result.polygons.iter().map(|p| p.vertices.len()).collect::<Vec<_>>(),
        "foreground_pixels": result.mask.count_ones(),
        "outputs": {"mask": show(out), "polygons": out_polys.map(show)},
    }))
}

fn weak_pairs(
    manifest: &Path,
    relevance_dir: &Path,
    mask_dir: &Path,
    out: &Path,
    params: &WeakPairParams,
) -> Result<Value> {
    let m = DatasetManifest::read(manifest)?;
    let result = build_weak_pairs(&m, manifest, relevance_dir, &absolute(mask_dir)?, params)?;
    for s in &result.skipped {
        eprintln!("warning: skipped {}: {}", s.image, s.reason);
    }
    result.manifest.write(out)?;
    Ok(json!({
        "candidates": m.entries.iter().filter(|e| e.label == params.positive_label).count(),
        "pairs": result.manifest.len(),
        "skipped": to_value(&result.skipped)?,
        "out": show(out),
    }))
}

fn load_mask(manifest: &Path, entry: &ManifestEntry, width: usize, height: usize) -> Result<Option<BinaryMask>> {
    if entry.mask.trim().is_empty() {
        return Ok(None);
    }
    let path = resolve(manifest, &entry.mask);
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let mask = if is_json {
        boxes_to_mask(&read_boxes(&path)?, width, height)?
    } else {
        read_mask_png(&path)?
    };
    Ok(Some(mask))
}

fn augment(manifest: &Path, spec: &AugmentSpec, repeat: usize, out_dir: &Path, out_manifest: &Path) -> Result<Value> {
    spec.validate()?;
    let m = DatasetManifest::read(manifest)?;
    let out_dir = absolute(out_dir)?;
    let jobs: Vec<(usize, usize)> = m
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Train)
        .flat_map(|(i, _)| (0..repeat).map(move |r| (i, r)))
        .collect();
    let added = jobs
        .par_iter()
        .map(|&(i, r)| {
            let e = &m.entries[i];
            let image = read_plane(&resolve(manifest, &e.image))?;
            let (w, h) = image.dims();
            let mask = load_mask(manifest, e, w, h)?;
            let base_mask = mask.clone().unwrap_or(BinaryMask::zeros(w, h)?);
            let index = (i * repeat + r) as u64;
            let (aug_img, aug_mask) = augment_pair(&image, &base_mask, spec, index)?;
            let name = format!("{}_{i}_aug{r}", file_stem(Path::new(&e.image)));
            let img_path = out_dir.join(format!("{name}.pfm"));
            write_pfm(&img_path, &aug_img)?;
            let mask_path = match mask {
                Some(_) => {
                    let p = out_dir.join(format!("{name}_mask.png"));
                    write_mask_png(&p, &aug_mask)?;
                    show(&p)
                }
                None => String::new(),
            };
            Ok(ManifestEntry {
                image: show(&img_path),
                mask: mask_path,
                ..e.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_added = added.len();
    let mut entries = m.entries.clone();
    entries.extend(added);
    let out = DatasetManifest::new(entries)?;
    out.write(out_manifest)?;
    Ok(json!({
        "spec": to_value(spec)?,
        "repeat": repeat,
        "original_entries": m.len(),
        "augmented_entries": n_added,
        "out_manifest": show(out_manifest),
    }))
}

fn split_summary(m: &DatasetManifest, out: &Path) -> Value {
    let count = |s: Split| m.entries.iter().filter(|e| e.split == s).count();
    let mut val_patients: Vec<&str> = m
        .entries
        .iter()
        .filter(|e| e.split == Split::Val)
        .map(|e| e.patient.as_str())
        .collect();
    val_patients.sort_unstable();
    val_patients.dedup();
    json!({
        "train_entries": count(Split::Train),
        "val_entries": count(Split::Val),
        "test_entries": count(Split::Test),
        "val_patients": val_patients,
        "out": show(out),
    })
}
