//! Reductions whose results do not depend on the rayon thread count.

use rayon::prelude::*;

/// Items per partial sum. Partials are always formed over the same index
/// ranges and combined left to right.
pub(crate) const CHUNK: usize = 4096;

pub(crate) fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = 0.0;
            for i in c * CHUNK..n.min((c + 1) * CHUNK) {
                s += f(i);
            }
            s
        })
        .collect();
    partials.iter().sum()
}
