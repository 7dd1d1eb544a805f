//! Shared raster and annotation types.
//!
//! All planes are row-major with `index = y * width + x`. Boxes use the
//! half-open pixel convention: a box `(x, y, w, h)` covers columns
//! `x..x + w` and rows `y..y + h`.

use serde::{Deserialize, Serialize};

use crate::components::{label_components, Connectivity};
use crate::error::{Error, Result};

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "plane dimensions must be positive, got {width}x{height}"
        )));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::invalid(format!(
            "plane of {width}x{height} needs {} values, got {len}",
            width.saturating_mul(height)
        )));
    }
    Ok(())
}

/// Fails unless both operands share the same frame.
pub fn ensure_same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected_w: a.0,
            expected_h: a.1,
            got_w: b.0,
            got_h: b.1,
        });
    }
    Ok(())
}

/// Real-valued intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel at index {i}")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width.saturating_mul(height)])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width.saturating_mul(height));
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

/// Foreground/background labelling of a frame (`true` = ROI).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height, bits.len())?;
        Ok(Self { width, height, bits })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width.saturating_mul(height)])
    }

    pub fn ones(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![true; width.saturating_mul(height)])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(width.saturating_mul(height));
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-frame coordinates read as background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Tight half-open box around all foreground pixels.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut min_x = usize::MAX;
        let mut min_y = usize::MAX;
        let mut max_x = 0;
        let mut max_y = 0;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (i % self.width, i / self.width);
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        (min_x != usize::MAX).then(|| BoundingBox {
            x: min_x,
            y: min_y,
            w: max_x - min_x + 1,
            h: max_y - min_y + 1,
        })
    }

    /// Foreground as 0.0/1.0 values.
    pub fn to_probability(&self) -> ProbabilityMap {
        ProbabilityMap {
            width: self.width,
            height: self.height,
            probs: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-pixel probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, probs: Vec<f64>) -> Result<Self> {
        check_dims(width, height, probs.len())?;
        if let Some(i) = probs.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "probability {} at index {i} is outside [0, 1]",
                probs[i]
            )));
        }
        Ok(Self { width, height, probs })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width.saturating_mul(height)])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut probs = Vec::with_capacity(width.saturating_mul(height));
        for y in 0..height {
            for x in 0..width {
                probs.push(f(x, y));
            }
        }
        Self::new(width, height, probs)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[y * self.width + x]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Pixels with probability `>= threshold` become foreground.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.probs.iter().map(|&p| p >= threshold).collect(),
        }
    }

    pub fn to_plane(&self) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            pixels: self.probs.clone(),
        }
    }
}

#[derive(Deserialize)]
struct RawBox {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoundingBox::from_signed(raw.x, raw.y, raw.w, raw.h)
    }
}

/// Axis-aligned half-open rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("box ({x},{y},{w},{h}) has non-positive area")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_signed(x: i64, y: i64, w: i64, h: i64) -> Result<Self> {
        if x < 0 || y < 0 {
            return Err(Error::invalid(format!("box ({x},{y},{w},{h}) has negative origin")));
        }
        if w <= 0 || h <= 0 {
            return Err(Error::invalid(format!("box ({x},{y},{w},{h}) has non-positive area")));
        }
        Self::new(x as usize, y as usize, w as usize, h as usize)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        w * h
    }

    /// Clips to a `width x height` frame; `None` if nothing remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let right = self.right().min(width);
        let bottom = self.bottom().min(height);
        (self.x < right && self.y < bottom).then(|| BoundingBox {
            x: self.x,
            y: self.y,
            w: right - self.x,
            h: bottom - self.y,
        })
    }
}

/// Confusion tallies. `tn` is absent at instance level, where true
/// negatives are not countable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tn: Option<u64>,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self {
            tp,
            fp,
            fn_,
            tn: Some(tn),
        }
    }

    pub fn without_tn(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_, tn: None }
    }

    pub fn tn_or_zero(&self) -> u64 {
        self.tn.unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn_or_zero()
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: Self) -> Self {
        let tn = match (self.tn, rhs.tn) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
        ConfusionCounts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
            tn,
        }
    }
}

/// Rasterizes boxes onto a `width x height` frame, clipping each to the
/// frame. A box with no pixel inside the frame is an error.
pub fn boxes_to_mask(boxes: &[BoundingBox], width: usize, height: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::zeros(width, height)?;
    for (index, b) in boxes.iter().enumerate() {
        let clipped = b.clip(width, height).ok_or(Error::BoxOutsideFrame {
            index,
            x: b.x as i64,
            y: b.y as i64,
            w: b.w as i64,
            h: b.h as i64,
            width,
            height,
        })?;
        for y in clipped.y..clipped.bottom() {
            let row = y * width;
            mask.bits[row + clipped.x..row + clipped.right()].fill(true);
        }
    }
    Ok(mask)
}

/// One tight box per connected foreground component, in raster order of
/// each component's first pixel.
pub fn mask_to_boxes(mask: &BinaryMask, connectivity: Connectivity) -> Vec<BoundingBox> {
    label_components(mask, connectivity)
        .components
        .into_iter()
        .map(|c| c.bbox)
        .collect()
}

/// Intersection over union of two boxes under the half-open convention.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Pixel IOU of two equally sized masks; two empty masks score 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_same_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
