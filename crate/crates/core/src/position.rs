//! Explicit positional modeling: the center-to-token additive PE
//! network and 3D rotary angles derived from normalized patch centers.

use crate::autodiff::{Id, Scalar, Tape};
use crate::error::{CoreError, Result};
use crate::geometry::Point;

pub const ROPE_DEFAULT_BASE: f64 = 10_000.0;
pub const ROPE_DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub eps: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "rope head_dim must be even and positive, got {head_dim}"
            )));
        }
        Ok(Self {
            head_dim,
            base: ROPE_DEFAULT_BASE,
            eps: ROPE_DEFAULT_EPS,
        })
    }
}

/// Two-layer MLP mapping a batch of centers (T, 3) into token space
/// (T, C). Weight ids come from the bound parameter set.
pub fn center_pe<F: Scalar>(
    tape: &mut Tape<F>,
    centers: Id,
    w1: Id,
    b1: Id,
    w2: Id,
    b2: Id,
) -> Result<Id> {
    let h = tape.matmul(centers, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_row(out, b2)
}

/// Subtract the centroid and divide by the max radius (eps floor), so
/// every output lies in the unit ball.
pub fn normalize_centers_for_rope(centers: &[Point], eps: f64) -> Vec<Point> {
    let g = centers.len();
    if g == 0 {
        return Vec::new();
    }
    let mut centroid = [0.0f64; 3];
    for c in centers {
        for a in 0..3 {
            centroid[a] += c[a];
        }
    }
    for v in centroid.iter_mut() {
        *v /= g as f64;
    }
    let mut radius: f64 = 0.0;
    let shifted: Vec<Point> = centers
        .iter()
        .map(|c| {
            let p = [c[0] - centroid[0], c[1] - centroid[1], c[2] - centroid[2]];
            radius = radius.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
            p
        })
        .collect();
    let denom = radius.max(eps);
    shifted
        .iter()
        .map(|p| [p[0] / denom, p[1] / denom, p[2] / denom])
        .collect()
}

/// Per-pair rotation angles for a sequence of normalized centers.
///
/// Pair i is assigned axis (i mod 3). Within each axis the pairs use
/// geometric frequencies base^(-j/m), j = 0..m-1, where m is the
/// number of pairs that landed on that axis. The angle of pair i at
/// position t is freq_i * p_t[axis(i)]. Returned row-major,
/// (T, head_dim/2).
pub fn rope_angles(normalized_centers: &[Point], cfg: &RopeConfig) -> Result<Vec<f64>> {
    if !cfg.head_dim.is_multiple_of(2) {
        return Err(CoreError::Config(format!(
            "rope head_dim must be even, got {}",
            cfg.head_dim
        )));
    }
    let half = cfg.head_dim / 2;
    let mut per_axis = [0usize; 3];
    for i in 0..half {
        per_axis[i % 3] += 1;
    }
    // frequency of each pair
    let mut freqs = vec![0.0f64; half];
    let mut seen = [0usize; 3];
    for (i, f) in freqs.iter_mut().enumerate() {
        let axis = i % 3;
        let j = seen[axis];
        seen[axis] += 1;
        let m = per_axis[axis] as f64;
        *f = cfg.base.powf(-(j as f64) / m);
    }
    let mut angles = Vec::with_capacity(normalized_centers.len() * half);
    for p in normalized_centers {
        for (i, &f) in freqs.iter().enumerate() {
            angles.push(f * p[i % 3]);
        }
    }
    Ok(angles)
}

/// Rotate a (T, head_dim) Q or K block by the center-derived angles.
pub fn rope_rotate<F: Scalar>(
    tape: &mut Tape<F>,
    qk: Id,
    normalized_centers: &[Point],
    cfg: &RopeConfig,
) -> Result<Id> {
    let angles = rope_angles(normalized_centers, cfg)?;
    tape.rope(qk, &angles)
}
