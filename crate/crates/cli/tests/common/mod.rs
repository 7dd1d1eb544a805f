//! Fixture corpus and helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use roikit::io::{encode_pfm_pages, write_atomic, write_boxes, write_mask_png, write_pfm};
use roikit::{boxes_to_mask, BinaryMask, BoundingBox, ImagePlane};

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_roikit")
}

pub fn roikit(cwd: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("roikit binary runs")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn bx(x: usize, y: usize, w: usize, h: usize) -> BoundingBox {
    BoundingBox { x, y, w, h }
}

/// Chest-like intensity pattern with a bright lesion at `lesion`.
fn radiograph(seed: usize, lesion: BoundingBox) -> ImagePlane {
    ImagePlane::from_fn(64, 64, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let base = 900.0 + 250.0 * (fx / 7.0 + seed as f64).sin() * (fy / 5.0).cos();
        let ribs = 120.0 * ((fy + seed as f64 * 3.0) / 3.0).sin().abs();
        let spot = if lesion.contains(x, y) { 600.0 } else { 0.0 };
        base + ribs + spot
    })
    .unwrap()
}

fn lesion_of(i: usize) -> BoundingBox {
    bx(10 + 4 * i, 14 + 3 * i, 14, 12)
}

fn lungs() -> BinaryMask {
    boxes_to_mask(&[bx(6, 8, 22, 48), bx(36, 8, 22, 48)], 64, 64).unwrap()
}

/// Smooth probability map peaking inside `region`.
fn prediction(region: BoundingBox, strength: f64) -> ImagePlane {
    let (cx, cy) = (
        region.x as f64 + region.w as f64 / 2.0,
        region.y as f64 + region.h as f64 / 2.0,
    );
    ImagePlane::from_fn(48, 48, |x, y| {
        let d2 = ((x as f64 - cx) / region.w as f64).powi(2) + ((y as f64 - cy) / region.h as f64).powi(2);
        (strength * (-3.0 * d2).exp()).clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Copies the committed fixtures into `root` and generates the binary ones.
pub fn build_corpus(root: &Path) {
    fs::create_dir_all(root.join("via")).unwrap();
    for f in ["rater_a.json", "rater_b.json"] {
        fs::copy(Path::new(FIXTURES).join(f), root.join("via").join(f)).unwrap();
    }
    for f in ["head.json", "augment_spec.json", "scores.csv"] {
        fs::copy(Path::new(FIXTURES).join(f), root.join(f)).unwrap();
    }

    // three raters disagreeing around one lesion
    let rater_boxes = [
        vec![bx(10, 12, 20, 16), bx(40, 40, 8, 8)],
        vec![bx(12, 13, 20, 15)],
        vec![bx(9, 11, 22, 18), bx(41, 41, 7, 6)],
    ];
    for (name, boxes) in ["a", "b", "c"].iter().zip(&rater_boxes) {
        write_mask_png(
            &root.join(format!("raters/{name}.png")),
            &boxes_to_mask(boxes, 64, 64).unwrap(),
        )
        .unwrap();
    }

    let mut manifest = String::from("image,mask,label,patient,split\n");
    let rows = [
        ("1", "pt01", "train"),
        ("1", "pt02", "train"),
        ("0", "pt03", "train"),
        ("1", "pt04", "train"),
        ("0", "pt04", "train"),
        ("1", "pt05", "train"),
        ("0", "pt06", "test"),
        ("1", "pt07", "test"),
    ];
    for (i, (label, patient, split)) in rows.iter().enumerate() {
        let id = i + 1;
        let lesion = lesion_of(i);
        write_pfm(&root.join(format!("images/cxr_{id:03}.pfm")), &radiograph(i, lesion)).unwrap();
        let mask = if *label == "1" {
            let m = format!("masks/cxr_{id:03}.png");
            write_mask_png(&root.join(&m), &boxes_to_mask(&[lesion], 64, 64).unwrap()).unwrap();
            m
        } else {
            String::new()
        };
        manifest.push_str(&format!("images/cxr_{id:03}.pfm,{mask},{label},{patient},{split}\n"));
    }
    write_atomic(&root.join("manifest.csv"), manifest.as_bytes()).unwrap();

    write_mask_png(&root.join("lungs/cxr_001.png"), &lungs()).unwrap();
    write_boxes(
        &root.join("boxes/cxr_001.json"),
        &[lesion_of(0), bx(50, 50, 6, 6), bx(60, 2, 3, 3)],
    )
    .unwrap();

    // segmentation predictions against mask and box ground truth
    let gts = [
        vec![bx(8, 8, 12, 10), bx(28, 26, 10, 12)],
        vec![bx(20, 14, 16, 16)],
        vec![bx(4, 30, 10, 10)],
    ];
    let preds = [
        vec![prediction(bx(9, 8, 12, 10), 0.95), prediction(bx(27, 27, 10, 10), 0.8)],
        vec![prediction(bx(22, 16, 14, 14), 0.9), prediction(bx(2, 2, 6, 6), 0.7)],
        vec![prediction(bx(30, 30, 8, 8), 0.85)],
    ];
    for (i, (gt, parts)) in gts.iter().zip(&preds).enumerate() {
        let combined =
            ImagePlane::from_fn(48, 48, |x, y| parts.iter().map(|p| p.get(x, y)).fold(0.0, f64::max)).unwrap();
        write_pfm(&root.join(format!("pred/p{i}.pfm")), &combined).unwrap();
        if i == 1 {
            write_boxes(&root.join(format!("gt/p{i}.json")), gt).unwrap();
        } else {
            write_mask_png(&root.join(format!("gt/p{i}.png")), &boxes_to_mask(gt, 48, 48).unwrap()).unwrap();
        }
    }

    // 8x8 features with 4 channels and a hot spot
    let pages: Vec<Vec<f64>> = (0..4)
        .map(|c| {
            (0..64)
                .map(|i| {
                    let (x, y) = ((i % 8) as f64, (i / 8) as f64);
                    let hot = (-((x - 5.0).powi(2) + (y - 2.0).powi(2)) / 3.0).exp();
                    0.1 * (c as f64 + 1.0) + 2.0 * hot * (1.0 + 0.3 * c as f64)
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[f64]> = pages.iter().map(Vec::as_slice).collect();
    write_atomic(&root.join("features.pfm"), &encode_pfm_pages(8, 8, &refs)).unwrap();

    let heat = ImagePlane::from_fn(32, 32, |x, y| {
        let a = (-(((x as f64 - 8.0).powi(2) + (y as f64 - 9.0).powi(2)) / 18.0)).exp();
        let b = 0.9 * (-(((x as f64 - 23.0).powi(2) + (y as f64 - 20.0).powi(2)) / 10.0)).exp();
        a.max(b)
    })
    .unwrap();
    write_pfm(&root.join("heat.pfm"), &heat).unwrap();

    for id in [1, 2, 4] {
        let k = id as f64;
        let map = ImagePlane::from_fn(8, 8, |x, y| {
            (-(((x as f64 - 2.0 - k).powi(2) + (y as f64 - 3.0).powi(2)) / 2.5)).exp()
        })
        .unwrap();
        write_pfm(&root.join(format!("relevance/cxr_{id:03}.pfm")), &map).unwrap();
    }
}

/// Every subcommand in dependency order, writing under `out` (relative to
/// the corpus root).
pub fn pipeline(out: &str) -> Vec<(&'static str, Vec<String>)> {
    let o = |p: &str| format!("{out}/{p}");
    let v = |args: &[&str]| args.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        (
            "fuse",
            v(&[
                "fuse",
                "--masks",
                "raters/a.png",
                "raters/b.png",
                "raters/c.png",
                "--out-dir",
                &o("fuse"),
            ]),
        ),
        (
            "consensus",
            v(&[
                "consensus",
                "--via",
                "via/rater_a.json",
                "via/rater_b.json",
                "--frame",
                "256x256",
                "--out-dir",
                &o("consensus"),
            ]),
        ),
        (
            "eval-seg",
            v(&[
                "eval-seg",
                "--pred",
                "pred",
                "--gt",
                "gt",
                "--out",
                &o("eval/metrics.json"),
            ]),
        ),
        (
            "eval-cls",
            v(&["eval-cls", "--scores", "scores.csv", "--out", &o("cls.json")]),
        ),
        (
            "preprocess",
            v(&[
                "preprocess",
                "--image",
                "images/cxr_001.pfm",
                "--lung-mask",
                "lungs/cxr_001.png",
                "--size",
                "32",
                "--out",
                &o("pre/image.pfm"),
                "--boxes",
                "boxes/cxr_001.json",
                "--out-boxes",
                &o("pre/boxes.json"),
                "--mask",
                "masks/cxr_001.png",
                "--out-mask",
                &o("pre/mask.png"),
            ]),
        ),
        (
            "loss",
            v(&[
                "loss",
                "--pred",
                "pred/p0.pfm",
                "--gt",
                "gt/p0.png",
                "--grad-out",
                &o("loss_grad.pfm"),
            ]),
        ),
        (
            "crm",
            v(&[
                "crm",
                "--features",
                "features.pfm",
                "--head",
                "head.json",
                "--upscale",
                "32x32",
                "--out",
                &o("crm/heat.pfm"),
                "--raw-out",
                &o("crm/raw.pfm"),
            ]),
        ),
        (
            "heat-to-mask",
            v(&[
                "heat-to-mask",
                "--in",
                "heat.pfm",
                "--min-area",
                "4",
                "--out",
                &o("h2m/mask.png"),
                "--out-polys",
                &o("h2m/polys.json"),
            ]),
        ),
        (
            "weak-pairs",
            v(&[
                "weak-pairs",
                "--manifest",
                "manifest.csv",
                "--relevance-dir",
                "relevance",
                "--mask-dir",
                &o("weak"),
                "--out",
                &o("weak.csv"),
                "--min-area",
                "4",
            ]),
        ),
        (
            "augment",
            v(&[
                "augment",
                "--manifest",
                "manifest.csv",
                "--spec",
                "augment_spec.json",
                "--repeat",
                "2",
                "--out-dir",
                &o("aug"),
                "--out-manifest",
                &o("aug.csv"),
            ]),
        ),
        (
            "split-stdout",
            v(&[
                "--seed",
                "42",
                "split",
                "--manifest",
                "manifest.csv",
                "--val-frac",
                "0.25",
            ]),
        ),
        (
            "split",
            v(&[
                "--seed",
                "42",
                "split",
                "--manifest",
                "manifest.csv",
                "--val-frac",
                "0.25",
                "--out",
                &o("split.csv"),
            ]),
        ),
        (
            "assemble-at",
            v(&[
                "assemble-at",
                "--base",
                "manifest.csv",
                "--weak",
                &o("weak.csv"),
                "--out",
                &o("at.csv"),
            ]),
        ),
        (
            "via-import",
            v(&[
                "via-import",
                "--via",
                "via/rater_b.json",
                "--out",
                &o("via_b.json"),
                "--export-via",
                &o("via_b_flat.json"),
            ]),
        ),
        (
            "boxes-to-mask",
            v(&[
                "boxes-to-mask",
                "--boxes",
                "boxes/cxr_001.json",
                "--frame",
                "64x64",
                "--out",
                &o("b2m.png"),
            ]),
        ),
        (
            "eval-cls-csv",
            v(&["--format", "csv", "eval-cls", "--scores", "scores.csv"]),
        ),
    ]
}

fn collect_files(dir: &Path, root: &Path, into: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, root, into);
        } else {
            let key = p.strip_prefix(root).unwrap().display().to_string();
            into.insert(key, fs::read(&p).unwrap());
        }
    }
}

/// Runs the whole pipeline with `threads` workers and returns every stdout
/// and output file keyed by name. `out` is wiped first.
pub fn run_pipeline(root: &Path, threads: usize) -> BTreeMap<String, Vec<u8>> {
    let out = root.join("out");
    if out.exists() {
        fs::remove_dir_all(&out).unwrap();
    }
    let threads = threads.to_string();
    let mut artifacts = BTreeMap::new();
    for (name, args) in pipeline("out") {
        let mut full: Vec<&str> = vec!["--threads", &threads];
        full.extend(args.iter().map(String::as_str));
        let result = roikit(root, &full);
        assert!(
            result.status.success(),
            "{name} failed ({:?}): {}",
            result.status.code(),
            String::from_utf8_lossy(&result.stderr)
        );
        artifacts.insert(format!("stdout:{name}"), result.stdout);
    }
    collect_files(&out, root, &mut artifacts);
    artifacts
}
