//! Seeded joint image/mask augmentation and training-set assembly.
//!
//! Transform parameters for sample `index` come from a ChaCha8 stream
//! keyed by `(seed, index)`, so each sample's draw is independent of the
//! order in which samples are processed.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestEntry, Provenance, Split};
use crate::model::{ensure_same_dims, BinaryMask, ImagePlane};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    /// Largest shift as a fraction of width (x) and height (y).
    pub max_shift_frac: f64,
    pub max_rotate_deg: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            max_shift_frac: 0.05,
            max_rotate_deg: 10.0,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// No flips, shifts or rotations.
    pub fn identity(seed: u64) -> Self {
        Self {
            hflip_prob: 0.0,
            max_shift_frac: 0.0,
            max_rotate_deg: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::invalid(format!(
                "hflip_prob {} must lie in [0, 1]",
                self.hflip_prob
            )));
        }
        if !(0.0..=0.5).contains(&self.max_shift_frac) {
            return Err(Error::invalid(format!(
                "max_shift_frac {} must lie in [0, 0.5]",
                self.max_shift_frac
            )));
        }
        if !(self.max_rotate_deg >= 0.0 && self.max_rotate_deg.is_finite()) {
            return Err(Error::invalid(format!(
                "max_rotate_deg {} must be a finite non-negative angle",
                self.max_rotate_deg
            )));
        }
        Ok(())
    }
}

/// Concrete transform for one sample: flip about the vertical centre line,
/// rotate about the centre, then shift (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugmentDraw {
    pub flip: bool,
    pub shift_x: f64,
    pub shift_y: f64,
    pub rotate_deg: f64,
}

pub fn draw_params(spec: &AugmentSpec, index: u64, width: usize, height: usize) -> AugmentDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let u: [f64; 4] = std::array::from_fn(|_| rng.random());
    let symmetric = |u: f64, scale: f64| if scale == 0.0 { 0.0 } else { (2.0 * u - 1.0) * scale };
    AugmentDraw {
        flip: u[0] < spec.hflip_prob,
        shift_x: symmetric(u[1], spec.max_shift_frac * width as f64),
        shift_y: symmetric(u[2], spec.max_shift_frac * height as f64),
        rotate_deg: symmetric(u[3], spec.max_rotate_deg),
    }
}

/// Source position sampled by output pixel `(x, y)`.
fn inverse_map(d: &AugmentDraw, width: usize, height: usize) -> impl Fn(usize, usize) -> (f64, f64) {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let (sin, cos) = d.rotate_deg.to_radians().sin_cos();
    let d = *d;
    move |x, y| {
        let px = x as f64 - d.shift_x - cx;
        let py = y as f64 - d.shift_y - cy;
        let (u, v) = if d.rotate_deg == 0.0 {
            (px, py)
        } else {
            (cos * px + sin * py, -sin * px + cos * py)
        };
        let sx = u + cx;
        let sy = v + cy;
        if d.flip {
            (width as f64 - 1.0 - sx, sy)
        } else {
            (sx, sy)
        }
    }
}

fn sample_bilinear(image: &ImagePlane, sx: f64, sy: f64) -> f64 {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            image.get(x as usize, y as usize)
        }
    };
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                acc += wgt * at(x0 + dx, y0 + dy);
            }
        }
    }
    acc
}

/// Applies one drawn transform to both planes: bilinear for the image,
/// nearest for the mask, zero outside the source frame.
pub fn apply_draw(image: &ImagePlane, mask: &BinaryMask, draw: &AugmentDraw) -> Result<(ImagePlane, BinaryMask)> {
    ensure_same_dims(image.dims(), mask.dims())?;
    let (w, h) = image.dims();
    let src = inverse_map(draw, w, h);
    let out_image = ImagePlane::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        sample_bilinear(image, sx, sy)
    })?;
    let out_mask = BinaryMask::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        let (nx, ny) = ((sx + 0.5).floor(), (sy + 0.5).floor());
        nx.is_finite() && ny.is_finite() && mask.get_signed(nx as i64, ny as i64)
    })?;
    Ok((out_image, out_mask))
}

pub fn augment_pair(
    image: &ImagePlane,
    mask: &BinaryMask,
    spec: &AugmentSpec,
    index: u64,
) -> Result<(ImagePlane, BinaryMask)> {
    spec.validate()?;
    let (w, h) = image.dims();
    apply_draw(image, mask, &draw_params(spec, index, w, h))
}

/// Reassigns the non-test entries to train/val at patient level. Patients
/// are sorted, shuffled with `seed`, and the first `round(val_frac · n)`
/// (at least one, at most `n - 1`) go to validation.
pub fn split_manifest(manifest: &DatasetManifest, val_frac: f64, seed: u64) -> Result<DatasetManifest> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::invalid(format!("val_frac {val_frac} must lie in (0, 1)")));
    }
    let pool: BTreeSet<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.split != Split::Test)
        .map(|e| e.patient.as_str())
        .collect();
    let mut patients: Vec<&str> = pool.into_iter().collect();
    let n = patients.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "a train/val split needs at least 2 patients, found {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let n_val = ((val_frac * n as f64).round() as usize).clamp(1, n - 1);
    let val: HashSet<&str> = patients[..n_val].iter().copied().collect();
    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if e.split != Split::Test {
                e.split = if val.contains(e.patient.as_str()) {
                    Split::Val
                } else {
                    Split::Train
                };
            }
            e
        })
        .collect();
    DatasetManifest::new(entries)
}

/// Base entries followed by weak entries, each tagged with its origin
/// unless it already carries a tag.
pub fn assemble_at(base: &DatasetManifest, weak: &DatasetManifest) -> Result<DatasetManifest> {
    if let Some(e) = weak.entries.iter().find(|e| e.split != Split::Train) {
        return Err(Error::invalid(format!(
            "weak entry {} has split {}, expected train",
            e.image, e.split
        )));
    }
    let tag = |e: &ManifestEntry, default: Provenance| {
        let mut e = e.clone();
        e.source = Some(e.source.unwrap_or(default));
        e
    };
    let entries: Vec<ManifestEntry> = base
        .entries
        .iter()
        .map(|e| tag(e, Provenance::Base))
        .chain(weak.entries.iter().map(|e| tag(e, Provenance::Weak)))
        .collect();
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert((e.image.as_str(), e.mask.as_str())) {
            return Err(Error::invalid(format!(
                "duplicate entry: image {} with mask {}",
                e.image, e.mask
            )));
        }
    }
    DatasetManifest::new(entries)
}
