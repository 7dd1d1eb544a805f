//! File formats: 8-bit PNG masks, PFM float maps, JSON boxes.
//!
//! PFM files are written as grayscale (`Pf`) little-endian with rows stored
//! bottom to top. Multi-channel feature stacks use a `Pc` header with a
//! `width height channels` line followed by one page per channel.
//!
//! All writers go through [`write_atomic`], which renders into a temporary
//! file next to the target and renames it into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::cls_metrics::ScoredSample;
use crate::error::{Error, Result};
use crate::model::{BinaryMask, BoundingBox, ImagePlane, ProbabilityMap};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::invalid(format!("cannot serialize JSON: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    read_json(path)
}

pub fn write_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    write_json(path, boxes)
}

fn decode_image(path: &Path) -> Result<DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Any nonzero sample reads as foreground.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = decode_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v != 0).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(|v| v != 0).collect(),
        other => other.to_luma16().into_raw().into_iter().map(|v| v != 0).collect(),
    };
    BinaryMask::new(w, h, bits).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_mask_png(mask)?)
}

/// Grayscale intensities of a PNG, in the file's native sample units.
pub fn read_image_png(path: &Path) -> Result<ImagePlane> {
    let img = decode_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(f64::from).collect(),
        other => other.to_luma8().into_raw().into_iter().map(f64::from).collect(),
    };
    ImagePlane::new(w, h, pixels).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an intensity plane from `.pfm` or any supported raster format.
pub fn read_plane(path: &Path) -> Result<ImagePlane> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("pfm") => read_pfm(path),
        _ => read_image_png(path),
    }
}

fn pfm_header_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    // tokens are separated by arbitrary whitespace; a header line ends at '\n'
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos] != b'\n' {
        *pos += 1;
    }
    let line = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(path, "PFM header is not ASCII"))?;
    *pos += 1;
    Ok(line.trim())
}

fn parse_usize(tok: Option<&str>, path: &Path, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(path, format!("PFM header: bad {what}")))
}

/// Decoded PFM: `channels` pages of `width x height`, rows top to bottom.
pub struct PfmData {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pages: Vec<Vec<f64>>,
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<PfmData> {
    let mut pos = 0;
    let magic = pfm_header_line(bytes, &mut pos, path)?;
    let multi = match magic {
        "Pf" => false,
        "Pc" => true,
        "PF" => return Err(Error::format(path, "colour PFM is not supported")),
        other => return Err(Error::format(path, format!("not a PFM file (magic {other:?})"))),
    };
    let dims = pfm_header_line(bytes, &mut pos, path)?;
    let mut toks = dims.split_whitespace();
    let width = parse_usize(toks.next(), path, "width")?;
    let height = parse_usize(toks.next(), path, "height")?;
    let channels = if multi {
        parse_usize(toks.next(), path, "channel count")?
    } else {
        1
    };
    let scale: f64 = pfm_header_line(bytes, &mut pos, path)?
        .parse()
        .map_err(|_| Error::format(path, "PFM header: bad scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "PFM header: zero scale"));
    }
    let little = scale < 0.0;
    let page = width * height;
    let need = page * channels * 4;
    let data = &bytes[pos.min(bytes.len())..];
    if data.len() < need {
        return Err(Error::format(
            path,
            format!("PFM payload has {} bytes, expected {need}", data.len()),
        ));
    }
    let mut pages = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut values = vec![0.0; page];
        for row in 0..height {
            // stored bottom row first
            let y = height - 1 - row;
            for x in 0..width {
                let off = (c * page + row * width + x) * 4;
                let raw = [data[off], data[off + 1], data[off + 2], data[off + 3]];
                let v = if little {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                values[y * width + x] = v as f64;
            }
        }
        pages.push(values);
    }
    Ok(PfmData {
        width,
        height,
        channels,
        pages,
    })
}

pub fn encode_pfm_pages(width: usize, height: usize, pages: &[&[f64]]) -> Vec<u8> {
    let header = if pages.len() == 1 {
        format!("Pf\n{width} {height}\n-1.0\n")
    } else {
        format!("Pc\n{width} {height} {}\n-1.0\n", pages.len())
    };
    let mut out = header.into_bytes();
    out.reserve(width * height * pages.len() * 4);
    for page in pages {
        for row in (0..height).rev() {
            for v in &page[row * width..(row + 1) * width] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn read_pfm(path: &Path) -> Result<ImagePlane> {
    let data = decode_pfm(&read_bytes(path)?, path)?;
    if data.channels != 1 {
        return Err(Error::format(path, "expected a single-channel PFM"));
    }
    let pages = data.pages;
    ImagePlane::new(data.width, data.height, pages.into_iter().next().unwrap_or_default())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pfm(path: &Path, plane: &ImagePlane) -> Result<()> {
    write_atomic(
        path,
        &encode_pfm_pages(plane.width(), plane.height(), &[plane.pixels()]),
    )
}

pub fn read_probability_pfm(path: &Path) -> Result<ProbabilityMap> {
    let plane = read_pfm(path)?;
    let (w, h) = plane.dims();
    ProbabilityMap::new(w, h, plane.into_pixels()).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_probability_pfm(path: &Path, map: &ProbabilityMap) -> Result<()> {
    write_atomic(path, &encode_pfm_pages(map.width(), map.height(), &[map.probs()]))
}

#[derive(serde::Deserialize)]
struct ScoreRow {
    score: f64,
    label: String,
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "positive" | "pos" => Some(true),
        "0" | "false" | "negative" | "neg" => Some(false),
        _ => None,
    }
}

/// Scored samples from a CSV with `score` and `label` columns; labels are
/// `1`/`0`, `true`/`false` or `positive`/`negative`.
pub fn parse_scored_samples(text: &[u8], origin: &Path) -> Result<Vec<ScoredSample>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text);
    reader
        .deserialize::<ScoreRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| Error::format(origin, format!("row {}: {e}", i + 1)))?;
            let positive = parse_label(&row.label)
                .ok_or_else(|| Error::format(origin, format!("row {}: unknown label {:?}", i + 1, row.label)))?;
            ScoredSample::new(row.score, positive).map_err(|e| Error::format(origin, format!("row {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_scored_samples(path: &Path) -> Result<Vec<ScoredSample>> {
    parse_scored_samples(&read_bytes(path)?, path)
}
