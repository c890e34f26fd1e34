//! Index and weight computation for the plane and hash-grid encodings.
//!
//! Everything here is non-differentiable bookkeeping: cell indices,
//! interpolation weights and keyframe selection. The tape only sees the
//! resulting `(row, weight)` lists.

/// Coordinate pairs of the six planes over `(x, y, z, t)`.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

pub const PLANE_NAMES: [&str; 6] = ["plane_xy", "plane_xz", "plane_yz", "plane_xt", "plane_yt", "plane_zt"];

/// Spatial hash primes, one per axis.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Bilinear corner rows and weights on an `res x res` node-aligned plane.
///
/// `a` and `b` are in `[0, 1]`; node `(i, j)` sits at `(i, j) / (res - 1)` and
/// is stored at row `i * res + j`.
pub fn plane_corners(res: usize, a: f64, b: f64) -> [(usize, f64); 4] {
    let (i0, wa) = cell(res, a);
    let (j0, wb) = cell(res, b);
    [
        (i0 * res + j0, (1.0 - wa) * (1.0 - wb)),
        (i0 * res + j0 + 1, (1.0 - wa) * wb),
        ((i0 + 1) * res + j0, wa * (1.0 - wb)),
        ((i0 + 1) * res + j0 + 1, wa * wb),
    ]
}

fn cell(res: usize, u: f64) -> (usize, f64) {
    let f = u.clamp(0.0, 1.0) * (res - 1) as f64;
    let i = (f.floor() as usize).min(res - 2);
    (i, f - i as f64)
}

/// Index of integer grid vertex `v` in a table of `2^log2_size` entries.
pub fn spatial_hash(v: [u32; 3], log2_size: u32) -> usize {
    let h = v[0].wrapping_mul(HASH_PRIMES[0]) ^ v[1].wrapping_mul(HASH_PRIMES[1]) ^ v[2].wrapping_mul(HASH_PRIMES[2]);
    let mask = if log2_size >= 32 { u32::MAX } else { (1u32 << log2_size) - 1 };
    (h & mask) as usize
}

/// Grid resolution of every hash level, growing geometrically from `base`
/// to `finest`.
pub fn level_resolutions(levels: usize, base: usize, finest: usize) -> Vec<usize> {
    if levels == 1 {
        return vec![base];
    }
    let growth = ((finest as f64).ln() - (base as f64).ln()) / (levels - 1) as f64;
    (0..levels)
        .map(|l| ((base as f64) * (growth * l as f64).exp() + 1e-9).floor().max(1.0) as usize)
        .collect()
}

/// Hashed corner entries and trilinear weights of a point `u in [0,1]^3`
/// on a grid of `res` cells per axis.
pub fn hash_corners(u: [f64; 3], res: usize, log2_size: u32) -> [(usize, f64); 8] {
    let mut base = [0u32; 3];
    let mut frac = [0.0; 3];
    for k in 0..3 {
        let p = u[k].clamp(0.0, 1.0) * res as f64;
        let f = p.floor();
        base[k] = f as u32;
        frac[k] = p - f;
    }
    let mut out = [(0usize, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut v = base;
        let mut w = 1.0;
        for k in 0..3 {
            if (c >> k) & 1 == 1 {
                v[k] += 1;
                w *= frac[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        *slot = (spatial_hash(v, log2_size), w);
    }
    out
}

/// Keyframe interval `i` with `t_i <= t <= t_{i+1}` and the blend fraction.
pub fn keyframe_interval(times: &[f64], t: f64) -> (usize, f64) {
    let t = t.clamp(times[0], times[times.len() - 1]);
    let i = times.partition_point(|&k| k <= t).saturating_sub(1).min(times.len() - 2);
    let s = (t - times[i]) / (times[i + 1] - times[i]);
    (i, s)
}
