//! Image preprocessing: lung-mask crop, resize, percentile contrast
//! saturation, standardization and box coordinate rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ensure_same_dims, BinaryMask, BoundingBox, ImagePlane};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
    /// Set when `std == 0` and the output was zeroed.
    pub degenerate: bool,
}

/// Maps source coordinates into the processed frame:
/// `x' = (x - offset_x) * scale_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub offset_x: usize,
    pub offset_y: usize,
    pub scale_x: f64,
    pub scale_y: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl CropTransform {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            offset_x: 0,
            offset_y: 0,
            scale_x: 1.0,
            scale_y: 1.0,
            out_w: width,
            out_h: height,
        }
    }

    /// Composes with a resize of the current output frame.
    pub fn then_resize(&self, out_w: usize, out_h: usize) -> Self {
        Self {
            scale_x: self.scale_x * out_w as f64 / self.out_w as f64,
            scale_y: self.scale_y * out_h as f64 / self.out_h as f64,
            out_w,
            out_h,
            ..*self
        }
    }
}

/// Zeroes pixels outside the lung mask and crops to the mask's tight box.
pub fn lung_crop(image: &ImagePlane, lung_mask: &BinaryMask) -> Result<(ImagePlane, CropTransform)> {
    ensure_same_dims(image.dims(), lung_mask.dims())?;
    let b = lung_mask
        .bounding_box()
        .ok_or_else(|| Error::invalid("lung mask is empty; upstream lung segmentation produced no foreground"))?;
    let cropped = ImagePlane::from_fn(b.w, b.h, |x, y| {
        let (sx, sy) = (x + b.x, y + b.y);
        if lung_mask.get(sx, sy) {
            image.get(sx, sy)
        } else {
            0.0
        }
    })?;
    Ok((
        cropped,
        CropTransform {
            offset_x: b.x,
            offset_y: b.y,
            scale_x: 1.0,
            scale_y: 1.0,
            out_w: b.w,
            out_h: b.h,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Source coordinate of destination index `d` (half-pixel centres).
fn source_coord(d: usize, in_len: usize, out_len: usize) -> f64 {
    (d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

fn nearest_index(d: usize, in_len: usize, out_len: usize) -> usize {
    let s = ((d as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    s.min(in_len - 1)
}

/// Clamped bilinear taps along one axis.
fn taps(d: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = source_coord(d, in_len, out_len).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 { 0.0 } else { s - i0 as f64 };
    (i0, i1, frac)
}

/// Resamples on half-pixel centres (the "align corners = false"
/// convention), clamping at the border.
pub fn resize(image: &ImagePlane, out_w: usize, out_h: usize, mode: ResizeMode) -> Result<ImagePlane> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let (w, h) = image.dims();
    if (w, h) == (out_w, out_h) {
        return Ok(image.clone());
    }
    match mode {
        ResizeMode::Nearest => ImagePlane::from_fn(out_w, out_h, |x, y| {
            image.get(nearest_index(x, w, out_w), nearest_index(y, h, out_h))
        }),
        ResizeMode::Bilinear => {
            let xt: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
            let yt: Vec<_> = (0..out_h).map(|y| taps(y, h, out_h)).collect();
            ImagePlane::from_fn(out_w, out_h, |x, y| {
                let (x0, x1, fx) = xt[x];
                let (y0, y1, fy) = yt[y];
                let top = image.get(x0, y0) * (1.0 - fx) + image.get(x1, y0) * fx;
                let bottom = image.get(x0, y1) * (1.0 - fx) + image.get(x1, y1) * fx;
                top * (1.0 - fy) + bottom * fy
            })
        }
    }
}

/// Nearest-neighbour resize of a mask.
pub fn resize_mask(mask: &BinaryMask, out_w: usize, out_h: usize) -> Result<BinaryMask> {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(out_w, out_h, |x, y| {
        mask.get(nearest_index(x, w, out_w), nearest_index(y, h, out_h))
    })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Clips at the `lo_pct`/`hi_pct` percentiles and rescales to `[0, 1]`.
/// Returns `true` alongside an all-zero plane when the two percentiles
/// coincide.
pub fn saturate_contrast(image: &ImagePlane, lo_pct: f64, hi_pct: f64) -> Result<(ImagePlane, bool)> {
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::invalid(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    let mut sorted = image.pixels().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, lo_pct);
    let hi = percentile(&sorted, hi_pct);
    let (w, h) = image.dims();
    if hi <= lo {
        return Ok((ImagePlane::filled(w, h, 0.0)?, true));
    }
    let range = hi - lo;
    let out = image
        .pixels()
        .iter()
        .map(|&v| ((v.clamp(lo, hi) - lo) / range).clamp(0.0, 1.0))
        .collect();
    Ok((ImagePlane::new(w, h, out)?, false))
}

/// `(K - mean) / std` with the population standard deviation.
pub fn standardize(image: &ImagePlane) -> (ImagePlane, NormalizationStats) {
    let n = image.pixels().len() as f64;
    let mean = image.pixels().iter().sum::<f64>() / n;
    let var = image.pixels().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let (w, h) = image.dims();
    if std == 0.0 || !std.is_finite() {
        return (
            ImagePlane::filled(w, h, 0.0).expect("dims already valid"),
            NormalizationStats {
                mean,
                std: 0.0,
                degenerate: true,
            },
        );
    }
    let out = image.pixels().iter().map(|v| (v - mean) / std).collect();
    (
        ImagePlane::new(w, h, out).expect("dims already valid"),
        NormalizationStats {
            mean,
            std,
            degenerate: false,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedBox {
    pub index: usize,
    pub original: BoundingBox,
}

/// Maps box edges through `t`, rounds to the nearest pixel and clips to the
/// output frame. Boxes left without area are reported, not returned.
pub fn rescale_boxes(boxes: &[BoundingBox], t: &CropTransform) -> (Vec<BoundingBox>, Vec<DroppedBox>) {
    let map = |v: usize, off: usize, s: f64, limit: usize| -> i64 {
        let p = ((v as f64 - off as f64) * s).round() as i64;
        p.clamp(0, limit as i64)
    };
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (index, b) in boxes.iter().enumerate() {
        let x0 = map(b.x, t.offset_x, t.scale_x, t.out_w);
        let x1 = map(b.right(), t.offset_x, t.scale_x, t.out_w);
        let y0 = map(b.y, t.offset_y, t.scale_y, t.out_h);
        let y1 = map(b.bottom(), t.offset_y, t.scale_y, t.out_h);
        if x1 > x0 && y1 > y0 {
            kept.push(BoundingBox {
                x: x0 as usize,
                y: y0 as usize,
                w: (x1 - x0) as usize,
                h: (y1 - y0) as usize,
            });
        } else {
            dropped.push(DroppedBox { index, original: *b });
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub size: usize,
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            size: 256,
            lo_pct: 1.0,
            hi_pct: 99.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub image: ImagePlane,
    pub transform: CropTransform,
    pub stats: NormalizationStats,
    pub contrast_degenerate: bool,
}

/// Crop, resize (bilinear), saturate, standardize, in that order.
pub fn preprocess(image: &ImagePlane, lung_mask: &BinaryMask, config: &PreprocessConfig) -> Result<Preprocessed> {
    let (cropped, t) = lung_crop(image, lung_mask)?;
    let resized = resize(&cropped, config.size, config.size, ResizeMode::Bilinear)?;
    let transform = t.then_resize(config.size, config.size);
    let (saturated, contrast_degenerate) = saturate_contrast(&resized, config.lo_pct, config.hi_pct)?;
    let (image, stats) = standardize(&saturated);
    Ok(Preprocessed {
        image,
        transform,
        stats,
        contrast_degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::boxes_to_mask;
    use proptest::prelude::*;

    fn plane(w: usize, h: usize, v: &[f64]) -> ImagePlane {
        ImagePlane::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn crop_with_full_mask_is_identity() {
        let img = ImagePlane::from_fn(5, 4, |x, y| (x * 10 + y) as f64).unwrap();
        let (out, t) = lung_crop(&img, &BinaryMask::ones(5, 4).unwrap()).unwrap();
        assert_eq!(out, img);
        assert_eq!((t.offset_x, t.offset_y), (0, 0));
    }

    #[test]
    fn crop_single_pixel() {
        let img = ImagePlane::from_fn(6, 6, |x, y| (x * 10 + y) as f64).unwrap();
        let mut m = BinaryMask::zeros(6, 6).unwrap();
        m.set(3, 4, true);
        let (out, t) = lung_crop(&img, &m).unwrap();
        assert_eq!(out.dims(), (1, 1));
        assert_eq!(out.get(0, 0), 34.0);
        assert_eq!((t.offset_x, t.offset_y), (3, 4));
    }

    #[test]
    fn crop_l_shape_zeroes_outside() {
        // L: column x=1 for y=1..4, row y=3 for x=1..4
        let img = ImagePlane::filled(6, 6, 7.0).unwrap();
        let m = BinaryMask::from_fn(6, 6, |x, y| {
            (x == 1 && (1..4).contains(&y)) || (y == 3 && (1..4).contains(&x))
        })
        .unwrap();
        let (out, t) = lung_crop(&img, &m).unwrap();
        assert_eq!(out.dims(), (3, 3));
        assert_eq!((t.offset_x, t.offset_y), (1, 1));
        for y in 0..3 {
            for x in 0..3 {
                let inside = m.get(x + 1, y + 1);
                assert_eq!(out.get(x, y), if inside { 7.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn empty_lung_mask_rejected() {
        let img = ImagePlane::filled(3, 3, 1.0).unwrap();
        assert!(lung_crop(&img, &BinaryMask::zeros(3, 3).unwrap()).is_err());
    }

    #[test]
    fn resize_cases() {
        let img = plane(3, 2, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(resize(&img, 3, 2, ResizeMode::Bilinear).unwrap(), img);

        let checker = plane(2, 2, &[0., 1., 1., 0.]);
        let big = resize(&checker, 4, 4, ResizeMode::Nearest).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(big.get(x, y), checker.get(x / 2, y / 2));
            }
        }

        // source x = (d + 0.5) / 2 - 0.5 -> -0.25, 0.25, 0.75, 1.25 (clamped)
        let ramp = resize(&plane(2, 1, &[0., 1.]), 4, 1, ResizeMode::Bilinear).unwrap();
        assert_eq!(ramp.pixels(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn saturate_cases() {
        let uniform = ImagePlane::from_fn(11, 1, |x, _| x as f64 / 10.0).unwrap();
        let (out, flag) = saturate_contrast(&uniform, 0.0, 100.0).unwrap();
        assert!(!flag);
        for (a, b) in out.pixels().iter().zip(uniform.pixels()) {
            assert!((a - b).abs() < 1e-15);
        }

        // positions 0.99 * 99 = 98.01 and 0.01 * 99 = 0.99
        let ramp = ImagePlane::from_fn(100, 1, |x, _| x as f64).unwrap();
        let (out, _) = saturate_contrast(&ramp, 1.0, 99.0).unwrap();
        let (lo, hi) = (0.99, 98.01);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(99, 0), 1.0);
        assert!((out.get(50, 0) - (50.0 - lo) / (hi - lo)).abs() < 1e-12);

        let (out, flag) = saturate_contrast(&ImagePlane::filled(4, 4, 3.0).unwrap(), 1.0, 99.0).unwrap();
        assert!(flag);
        assert!(out.pixels().iter().all(|&v| v == 0.0));
        assert!(saturate_contrast(&ramp, 50.0, 50.0).is_err());
    }

    #[test]
    fn standardize_cases() {
        let (out, s) = standardize(&plane(2, 1, &[10., 12.]));
        assert_eq!(out.pixels(), &[-1.0, 1.0]);
        assert_eq!((s.mean, s.std), (11.0, 1.0));
        let (out, s) = standardize(&ImagePlane::filled(3, 3, 5.0).unwrap());
        assert!(s.degenerate);
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rescale_cases() {
        let boxes = [BoundingBox::new(12, 12, 4, 4).unwrap()];
        let (same, _) = rescale_boxes(&boxes, &CropTransform::identity(64, 64));
        assert_eq!(same, boxes);
        let t = CropTransform {
            offset_x: 10,
            offset_y: 10,
            ..CropTransform::identity(50, 50)
        };
        let (moved, dropped) = rescale_boxes(&boxes, &t);
        assert_eq!(moved, vec![BoundingBox::new(2, 2, 4, 4).unwrap()]);
        assert!(dropped.is_empty());
        let (kept, dropped) = rescale_boxes(&[BoundingBox::new(1, 12, 5, 4).unwrap()], &t);
        assert!(kept.is_empty());
        assert_eq!(dropped[0].index, 0);
    }

    proptest! {
        #[test]
        fn standardized_moments(values in proptest::collection::vec(-1e3f64..1e3, 256)) {
            let img = ImagePlane::new(16, 16, values).unwrap();
            let (out, s) = standardize(&img);
            prop_assume!(!s.degenerate);
            let n = 256.0;
            let m = out.pixels().iter().sum::<f64>() / n;
            let sd = (out.pixels().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }

        #[test]
        fn saturate_stays_in_unit_interval(
            values in proptest::collection::vec(-1e4f64..1e4, 1..200),
            lo in 0.0f64..50.0,
            span in 0.1f64..50.0,
        ) {
            let n = values.len();
            let img = ImagePlane::new(n, 1, values).unwrap();
            let (out, _) = saturate_contrast(&img, lo, lo + span).unwrap();
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn rescale_commutes_with_rasterization(
            bx in 0usize..40, by in 0usize..40, bw in 8usize..24, bh in 8usize..24,
            ox in 0usize..8, oy in 0usize..8, out in 20usize..120,
        ) {
            let (w, h) = (64usize, 64usize);
            let b = BoundingBox::new(bx, by, bw, bh).unwrap();
            let crop_w = w - ox;
            let crop_h = h - oy;
            let t = CropTransform { offset_x: ox, offset_y: oy, ..CropTransform::identity(crop_w, crop_h) }
                .then_resize(out, out);
            // rasterize, crop, resize
            let full = boxes_to_mask(&[b], w, h).unwrap();
            let cropped = BinaryMask::from_fn(crop_w, crop_h, |x, y| full.get(x + ox, y + oy)).unwrap();
            let a = resize_mask(&cropped, out, out).unwrap();
            // transform, rasterize
            let (moved, _) = rescale_boxes(&[b], &t);
            let c = boxes_to_mask(&moved, out, out).unwrap();
            let diff = a.bits().iter().zip(c.bits()).filter(|(p, q)| p != q).count();
            let union = a.bits().iter().zip(c.bits()).filter(|(p, q)| **p || **q).count();
            prop_assert!((diff as f64) < 0.02 * (out * out) as f64, "diff {diff} union {union}");
        }
    }
}
