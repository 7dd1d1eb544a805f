//! Boundary tracing of mask components into polygons, and rasterization of
//! polygons back into masks.
//!
//! Vertices are pixel centres in integer pixel coordinates (y down). The
//! trace walks the outer boundary clockwise on screen, starting from the
//! component's topmost-then-leftmost pixel, and keeps only the corners.
//! Rasterizing the polygon marks every pixel centre on an edge or inside
//! it (nonzero winding), which gives back the component exactly when it
//! has no holes.

use serde::{Deserialize, Serialize};

use crate::components::{Connectivity, Labeling};
use crate::error::Result;
use crate::model::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<(i64, i64)>,
}

// clockwise on screen, starting west
const RING8: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];
const RING4: [(i64, i64); 4] = [(-1, 0), (0, -1), (1, 0), (0, 1)];

/// Pixel-centre boundary walk of the component containing `start`, which
/// must be the raster-first pixel of that component in `mask`.
pub fn trace_boundary(mask: &BinaryMask, start: (usize, usize), connectivity: Connectivity) -> Vec<(i64, i64)> {
    let ring: &[(i64, i64)] = match connectivity {
        Connectivity::Four => &RING4,
        Connectivity::Eight => &RING8,
    };
    let n = ring.len();
    let east = ring.iter().position(|&d| d == (1, 0)).unwrap_or(0);
    // first scan position after arriving along direction `d`
    let scan_start = |d: usize| -> usize {
        let back = if n == 8 && d % 2 == 1 { 2 } else { 1 };
        (d + n - back) % n
    };
    let next_from = |c: (i64, i64), arrived: usize| -> Option<(usize, (i64, i64))> {
        let first = scan_start(arrived);
        (0..n).map(|k| (first + k) % n).find_map(|d| {
            let p = (c.0 + ring[d].0, c.1 + ring[d].1);
            mask.get_signed(p.0, p.1).then_some((d, p))
        })
    };

    let s = (start.0 as i64, start.1 as i64);
    let mut trace = vec![s];
    let Some((d0, p1)) = next_from(s, east) else {
        return trace;
    };
    let mut cur = p1;
    let mut arrived = d0;
    let cap = 4 * mask.count_ones() + 8;
    while trace.len() <= cap {
        let (d, p) = next_from(cur, arrived).expect("a traced pixel always has its predecessor as neighbour");
        if cur == s && p == p1 {
            break;
        }
        trace.push(cur);
        cur = p;
        arrived = d;
    }
    trace
}

/// Drops vertices that continue straight on in the same direction.
pub fn compress_collinear(walk: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let n = walk.len();
    if n < 3 {
        return walk.to_vec();
    }
    let step = |a: (i64, i64), b: (i64, i64)| ((b.0 - a.0).signum(), (b.1 - a.1).signum());
    (0..n)
        .filter(|&i| {
            let prev = walk[(i + n - 1) % n];
            let next = walk[(i + 1) % n];
            step(prev, walk[i]) != step(walk[i], next)
        })
        .map(|i| walk[i])
        .collect()
}

/// One polygon per labelled component, in label order.
pub fn component_polygons(labeling: &Labeling, connectivity: Connectivity) -> Vec<Polygon> {
    labeling
        .components
        .iter()
        .map(|c| {
            let isolated = labeling.component_mask(c.label);
            let walk = trace_boundary(&isolated, c.seed, connectivity);
            Polygon {
                vertices: compress_collinear(&walk),
            }
        })
        .collect()
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn mark(mask: &mut BinaryMask, x: i64, y: i64) {
    if x >= 0 && y >= 0 && (x as usize) < mask.width() && (y as usize) < mask.height() {
        mask.set(x as usize, y as usize, true);
    }
}

/// Pixels whose centres lie on or inside any polygon (nonzero winding).
pub fn rasterize_polygons(polygons: &[Polygon], width: usize, height: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(width, height)?;
    for poly in polygons {
        let v = &poly.vertices;
        if v.is_empty() {
            continue;
        }
        let edges: Vec<((i64, i64), (i64, i64))> = (0..v.len()).map(|i| (v[i], v[(i + 1) % v.len()])).collect();

        for &(a, b) in &edges {
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let g = gcd(dx, dy).max(1);
            for t in 0..=g {
                mark(&mut out, a.0 + dx / g * t, a.1 + dy / g * t);
            }
        }

        let x_lo = v.iter().map(|p| p.0).min().unwrap_or(0).max(0);
        let x_hi = v.iter().map(|p| p.0).max().unwrap_or(-1).min(width as i64 - 1);
        let y_lo = v.iter().map(|p| p.1).min().unwrap_or(0).max(0);
        let y_hi = v.iter().map(|p| p.1).max().unwrap_or(-1).min(height as i64 - 1);
        for py in y_lo..=y_hi {
            let spanning: Vec<_> = edges.iter().filter(|(a, b)| (a.1 <= py) != (b.1 <= py)).collect();
            if spanning.is_empty() {
                continue;
            }
            for px in x_lo..=x_hi {
                let mut winding = 0i64;
                for (a, b) in &spanning {
                    let cross = (b.0 - a.0) * (py - a.1) - (px - a.0) * (b.1 - a.1);
                    if a.1 <= py && cross > 0 {
                        winding += 1;
                    } else if b.1 <= py && cross < 0 {
                        winding -= 1;
                    }
                }
                if winding != 0 {
                    out.set(px as usize, py as usize, true);
                }
            }
        }
    }
    Ok(out)
}
