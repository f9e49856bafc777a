use crate::warp::ReferenceFrame;

const BAYER_BITS: u32 = 5;
const BAYER_LEVELS: f64 = (1u32 << (2 * BAYER_BITS)) as f64;

/// Rank of grid cell `(x, y)` in a recursive ordered-dither matrix. The
/// first `4^j` ranks of every tile form a regular grid of stride `2^(b−j)`.
fn bayer_rank(x: usize, y: usize) -> u32 {
    let mut v = 0u32;
    for bit in (0..BAYER_BITS).rev() {
        let xb = ((x >> (BAYER_BITS - 1 - bit)) & 1) as u32;
        let yb = ((y >> (BAYER_BITS - 1 - bit)) & 1) as u32;
        let q = match (xb, yb) {
            (0, 0) => 0,
            (1, 1) => 1,
            (1, 0) => 2,
            _ => 3,
        };
        v |= q << (2 * bit);
    }
    v
}

/// Deterministic, spatially even subset of the masked pixels. A rate of
/// `1/4` selects the stride-2 grid, `1/16` the stride-4 grid; other rates
/// interpolate through the same ordered-dither ranking.
pub fn sampling_mask(frame: &ReferenceFrame, rate: f64) -> Vec<bool> {
    frame
        .pixels
        .iter()
        .map(|&(x, y)| (bayer_rank(x, y) as f64 + 0.5) / BAYER_LEVELS < rate)
        .collect()
}
