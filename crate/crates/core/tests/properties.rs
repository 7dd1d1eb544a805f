//! Cross-module properties checked on random instances.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use proptest::prelude::*;
use roikit::augment::{apply_draw, assemble_at, draw_params, split_manifest, AugmentSpec};
use roikit::cls_metrics::{classify_report, clopper_pearson, dor, dor_from_rates, CiOptions, ScoredSample};
use roikit::polygon::rasterize_polygons;
use roikit::tversky::{tversky_index, TverskyParams};
use roikit::via::{export_via, parse_via, pipeline_consensus, ConsensusParams, FrameSizes, ViaImport};
use roikit::weak_loc::{crm, heat_to_mask, ClassSelection, DenseHead, FeatureStack, HeatMaskParams};
use roikit::{
    boxes_to_mask, label_components, BinaryMask, BoundingBox, ConfusionCounts, Connectivity, DatasetManifest,
    ImagePlane, ManifestEntry, ProbabilityMap, Provenance, Split,
};

fn bits(w: usize, h: usize, density: f64) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(proptest::bool::weighted(density), w * h)
        .prop_map(move |b| BinaryMask::new(w, h, b).unwrap())
}

fn probs(w: usize, h: usize) -> impl Strategy<Value = ProbabilityMap> {
    proptest::collection::vec(0.0f64..=1.0, w * h).prop_map(move |p| ProbabilityMap::new(w, h, p).unwrap())
}

fn boxes_in(frame: usize, max: usize) -> impl Strategy<Value = Vec<BoundingBox>> {
    proptest::collection::vec((0..frame - 1, 0..frame - 1, 1..frame / 2, 1..frame / 2), 0..max).prop_map(move |v| {
        v.into_iter()
            .map(|(x, y, w, h)| BoundingBox::new(x, y, w.min(frame - x), h.min(frame - y)).unwrap())
            .collect()
    })
}

/// Background not reachable from the frame edge under the complementary
/// connectivity.
fn has_hole(mask: &BinaryMask, conn: Connectivity) -> bool {
    let (w, h) = mask.dims();
    let bg = if conn == Connectivity::Eight {
        Connectivity::Four
    } else {
        Connectivity::Eight
    };
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !mask.get(x, y) {
                seen[y * w + x] = true;
                stack.push((x as i64, y as i64));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        for &(dx, dy) in bg.offsets() {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                let i = ny as usize * w + nx as usize;
                if !mask.bits()[i] && !seen[i] {
                    seen[i] = true;
                    stack.push((nx, ny));
                }
            }
        }
    }
    mask.bits().iter().zip(&seen).any(|(&m, &s)| !m && !s)
}

fn to_probability(m: &BinaryMask) -> ProbabilityMap {
    let (w, h) = m.dims();
    ProbabilityMap::new(w, h, m.bits().iter().map(|&b| if b { 0.9 } else { 0.1 }).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tversky_swaps_weights_when_pred_and_truth_exchange(
        a in bits(9, 7, 0.4), b in bits(9, 7, 0.5), alpha in 0.0f64..2.0, beta in 0.01f64..2.0, smooth in 0.0f64..2.0,
    ) {
        let p = TverskyParams::new(alpha, beta, smooth).unwrap();
        let q = TverskyParams::new(beta, alpha, smooth).unwrap();
        let ab = tversky_index(&to_unit(&a), &b, &p).unwrap().value;
        let ba = tversky_index(&to_unit(&b), &a, &q).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-12, "{ab} vs {ba}");
    }

    #[test]
    fn tversky_non_increasing_in_each_weight(
        pred in probs(8, 8), gt in bits(8, 8, 0.5), alpha in 0.01f64..1.0, beta in 0.01f64..1.0, step in 0.0f64..1.0,
    ) {
        let at = |a: f64, b: f64| tversky_index(&pred, &gt, &TverskyParams::new(a, b, 1.0).unwrap()).unwrap().value;
        let base = at(alpha, beta);
        prop_assert!(at(alpha + step, beta) <= base);
        prop_assert!(at(alpha, beta + step) <= base);
    }

    #[test]
    fn clopper_pearson_contains_the_proportion(n in 1u64..3000, frac in 0.0f64..=1.0, conf in 0.5f64..0.999) {
        let k = (frac * n as f64).floor() as u64;
        let (lo, hi) = clopper_pearson(k, n, conf).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0, "k={k} n={n}: ({lo}, {hi})");
    }

    #[test]
    fn dor_matches_rate_form(tp in 1u64..5000, fp in 1u64..5000, fn_ in 1u64..5000, tn in 1u64..5000) {
        let c = ConfusionCounts::new(tp, fp, fn_, tn);
        let (d, flag) = dor(&c);
        prop_assert!(flag.is_none());
        let sens = tp as f64 / (tp + fn_) as f64;
        let spec = tn as f64 / (tn + fp) as f64;
        let want = dor_from_rates(sens, spec);
        prop_assert!(((d - want) / want).abs() <= 1e-12, "{d} vs {want}");
    }

    #[test]
    fn classify_report_ignores_sample_order(
        raw in proptest::collection::vec((0u8..=20, any::<bool>()), 2..120), seed in any::<u64>(),
    ) {
        let mut samples: Vec<ScoredSample> =
            raw.iter().map(|&(s, p)| ScoredSample::new(s as f64 / 20.0, p).unwrap()).collect();
        samples[0] = ScoredSample::new(samples[0].score, true).unwrap();
        samples[1] = ScoredSample::new(samples[1].score, false).unwrap();
        let a = classify_report(&samples, 0.5, CiOptions::default()).unwrap();
        // deterministic permutation derived from the seed
        let mut keyed: Vec<(u64, ScoredSample)> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| ((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed, *s))
            .collect();
        keyed.sort_by_key(|k| k.0);
        let shuffled: Vec<ScoredSample> = keyed.into_iter().map(|k| k.1).collect();
        let b = classify_report(&shuffled, 0.5, CiOptions::default()).unwrap();
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn crm_scales_quadratically_with_head_weights(
        w in 1usize..6, h in 1usize..6, c in 1usize..5, k in 1usize..4, scale in 0.1f64..10.0,
        seed in proptest::collection::vec(-2.0f64..2.0, 400),
    ) {
        let values: Vec<f64> = seed[..w * h * c].to_vec();
        let weights: Vec<Vec<f64>> = (0..c).map(|ch| (0..k).map(|j| seed[200 + ch * 4 + j]).collect()).collect();
        let head = DenseHead { weights: weights.clone(), bias: vec![0.25; k] };
        let scaled = DenseHead {
            weights: weights.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect(),
            bias: vec![-3.0; k],
        };
        let stack = FeatureStack::new(w, h, c, values).unwrap();
        let a = crm(&stack, &head, ClassSelection::All).unwrap();
        let b = crm(&stack, &scaled, ClassSelection::All).unwrap();
        let max = a.raw.pixels().iter().copied().fold(0.0, f64::max);
        for (x, y) in a.raw.pixels().iter().zip(b.raw.pixels()) {
            prop_assert!((y - scale * scale * x).abs() <= 1e-12 * (scale * scale * max).max(1e-300));
        }
        let min = a.raw.pixels().iter().copied().fold(f64::INFINITY, f64::min);
        if max - min > 1e-9 * max {
            for (x, y) in a.map.probs().iter().zip(b.map.probs()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn heat_mask_polygons_rebuild_simple_components(
        mask in bits(14, 11, 0.45), eight in any::<bool>(), min_area in 1usize..4,
    ) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let params = HeatMaskParams { threshold: 0.5, connectivity: conn, min_area };
        let out = heat_to_mask(&to_probability(&mask), &params).unwrap();
        let labeling = label_components(&mask, conn);
        let kept: Vec<_> = labeling.components.iter().filter(|c| c.area >= min_area).collect();
        prop_assert_eq!(kept.len(), out.polygons.len());
        for (comp, poly) in kept.iter().zip(&out.polygons) {
            let want = labeling.component_mask(comp.label);
            if has_hole(&want, conn) {
                continue;
            }
            let got = rasterize_polygons(std::slice::from_ref(poly), 14, 11).unwrap();
            prop_assert_eq!(got.bits(), want.bits(), "component {}", comp.label);
        }
    }

    #[test]
    fn augmented_mask_stays_within_the_moved_region(
        (x, y, bw, bh) in (2usize..20, 2usize..20, 1usize..10, 1usize..10),
        seed in any::<u64>(), index in 0u64..1000, flip in 0.0f64..=1.0,
    ) {
        let (w, h) = (32usize, 28usize);
        let region = BoundingBox::new(x, y, bw, bh).unwrap();
        let mask = boxes_to_mask(&[region], w, h).unwrap();
        let image = ImagePlane::filled(w, h, 1.0).unwrap();
        let spec = AugmentSpec { hflip_prob: flip, max_shift_frac: 0.1, max_rotate_deg: 25.0, seed };
        let d = draw_params(&spec, index, w, h);
        let (_, moved) = apply_draw(&image, &mask, &d).unwrap();
        // forward image of each source pixel centre: flip, rotate about the centre, shift
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = d.rotate_deg.to_radians().sin_cos();
        let centres: Vec<(f64, f64)> = (region.y..region.bottom())
            .flat_map(|sy| (region.x..region.right()).map(move |sx| (sx, sy)))
            .map(|(sx, sy)| {
                let fx = if d.flip { (w - 1 - sx) as f64 } else { sx as f64 };
                let (dx, dy) = (fx - cx, sy as f64 - cy);
                (cos * dx - sin * dy + cx + d.shift_x, sin * dx + cos * dy + cy + d.shift_y)
            })
            .collect();
        let reach = 0.5f64.sqrt() + 1e-9;
        for oy in 0..h {
            for ox in 0..w {
                if moved.get(ox, oy) {
                    let near = centres.iter().any(|&(px, py)| (px - ox as f64).hypot(py - oy as f64) <= reach);
                    prop_assert!(near, "({ox}, {oy}) lies outside the moved region, draw {d:?}");
                }
            }
        }
    }

    #[test]
    fn split_keeps_patients_disjoint(
        rows in proptest::collection::vec((0u8..12, 0u8..10), 2..60), frac in 0.05f64..0.6, seed in any::<u64>(),
    ) {
        // patients 0 and 1 go to test; the others to train
        let mut entries: Vec<ManifestEntry> = rows
            .iter()
            .enumerate()
            .map(|(i, &(p, l))| {
                let split = if p < 2 { Split::Test } else { Split::Train };
                ManifestEntry::new(format!("img/{i}.png"), "", (l % 2).to_string(), format!("p{p:02}"), split)
            })
            .collect();
        entries.push(ManifestEntry::new("img/a.png", "", "0", "p90", Split::Train));
        entries.push(ManifestEntry::new("img/b.png", "", "1", "p91", Split::Train));
        let m = DatasetManifest::new(entries).unwrap();
        let s = split_manifest(&m, frac, seed).unwrap();
        prop_assert_eq!(s.to_csv().unwrap(), split_manifest(&m, frac, seed).unwrap().to_csv().unwrap());
        let patients = |split: Split| -> BTreeSet<&str> {
            s.entries.iter().filter(|e| e.split == split).map(|e| e.patient.as_str()).collect()
        };
        let (train, val, test) = (patients(Split::Train), patients(Split::Val), patients(Split::Test));
        prop_assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        prop_assert!(!train.is_empty() && !val.is_empty());
        for (a, b) in m.entries.iter().zip(&s.entries) {
            prop_assert_eq!(&a.image, &b.image);
            prop_assert_eq!(a.split == Split::Test, b.split == Split::Test);
        }
    }

    #[test]
    fn assemble_at_is_associative(n_base in 0usize..6, n1 in 0usize..5, n2 in 0usize..5) {
        let entries = |prefix: &str, n: usize| -> DatasetManifest {
            DatasetManifest {
                entries: (0..n)
                    .map(|i| ManifestEntry::new(format!("{prefix}/{i}.png"), format!("{prefix}/{i}_m.png"), "1", format!("{prefix}{i}"), Split::Train))
                    .collect(),
            }
        };
        let (base, w1, w2) = (entries("b", n_base), entries("w1", n1), entries("w2", n2));
        let left = assemble_at(&assemble_at(&base, &w1).unwrap(), &w2).unwrap();
        let joined = DatasetManifest { entries: w1.entries.iter().chain(&w2.entries).cloned().collect() };
        let right = assemble_at(&base, &joined).unwrap();
        prop_assert_eq!(&left, &right);
        let weak = left.entries.iter().filter(|e| e.source == Some(Provenance::Weak)).count();
        prop_assert_eq!(weak, n1 + n2);
    }

    #[test]
    fn via_round_trips_through_export(per_image in proptest::collection::vec(boxes_in(200, 5), 0..6)) {
        let boxes: BTreeMap<String, Vec<BoundingBox>> =
            per_image.into_iter().enumerate().map(|(i, b)| (format!("cxr_{i:03}.png"), b)).collect();
        let text = serde_json::to_vec(&export_via(&boxes)).unwrap();
        let back = parse_via(&text, Path::new("export.json")).unwrap();
        prop_assert!(back.skipped.is_empty() && back.errors.is_empty());
        prop_assert_eq!(back.boxes, boxes);
    }

    #[test]
    fn consensus_ignores_annotation_file_order(
        raters in proptest::collection::vec(proptest::collection::vec(boxes_in(40, 3), 3), 2..5),
    ) {
        let imports: Vec<ViaImport> = raters
            .iter()
            .map(|imgs| ViaImport {
                boxes: imgs.iter().enumerate().map(|(i, b)| (format!("im{i}.png"), b.clone())).collect(),
                skipped: Vec::new(),
                errors: Vec::new(),
            })
            .collect();
        let mut reversed = imports.clone();
        reversed.reverse();
        let frames = FrameSizes::uniform(40, 40);
        let params = ConsensusParams::default();
        let a = pipeline_consensus(&imports, &frames, &params).unwrap();
        let b = pipeline_consensus(&reversed, &frames, &params).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.image, &y.image);
            prop_assert_eq!(x.posterior.probs(), y.posterior.probs());
            prop_assert_eq!(&x.boxes, &y.boxes);
            let mut perf = y.performance.clone();
            perf.reverse();
            prop_assert_eq!(&x.performance, &perf);
        }
    }
}

fn to_unit(m: &BinaryMask) -> ProbabilityMap {
    let (w, h) = m.dims();
    ProbabilityMap::new(w, h, m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
}
