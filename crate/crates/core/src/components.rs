//! Connected-component labelling of binary masks.

use serde::{Deserialize, Serialize};

use crate::model::{BinaryMask, BoundingBox};

/// Pixel adjacency used when grouping foreground pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(i64, i64)] {
        const FOUR: [(i64, i64); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        const EIGHT: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// 1-based label as stored in [`Labeling::labels`].
    pub label: u32,
    /// First pixel of the component in raster order.
    pub seed: (usize, usize),
    pub bbox: BoundingBox,
    pub area: usize,
}

#[derive(Debug, Clone)]
pub struct Labeling {
    pub width: usize,
    pub height: usize,
    /// Per-pixel label, 0 for background.
    pub labels: Vec<u32>,
    /// Components in raster order of their seed pixel.
    pub components: Vec<Component>,
}

impl Labeling {
    /// Mask holding only the pixels of `label`.
    pub fn component_mask(&self, label: u32) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.labels.iter().map(|&l| l == label).collect(),
        )
        .expect("labeling dimensions are valid")
    }

    /// Pixel indices of `label` in raster order.
    pub fn pixels_of(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Labels foreground components by flood fill from each unvisited pixel
/// in raster order, so labels are assigned in seed order.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> Labeling {
    let (width, height) = mask.dims();
    let bits = mask.bits();
    let mut labels = vec![0u32; bits.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();

    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        let (sx, sy) = (start % width, start / width);
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (sx, sy, sx, sy);
        let mut area = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            area += 1;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
            for &(dx, dy) in connectivity.offsets() {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if bits[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
        components.push(Component {
            label,
            seed: (sx, sy),
            bbox: BoundingBox {
                x: min_x,
                y: min_y,
                w: max_x - min_x + 1,
                h: max_y - min_y + 1,
            },
            area,
        });
    }

    Labeling {
        width,
        height,
        labels,
        components,
    }
}
