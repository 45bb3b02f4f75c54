//! Space-filling-curve serialization of patch centers. Centers are
//! quantized onto a 2^bits grid, encoded with a 3D Hilbert or Z-order
//! curve, and stable-argsorted into the scan order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::geometry::Point;
use crate::rng::rng_from;

pub const DEFAULT_BITS: u32 = 10;
pub const MAX_BITS: u32 = 20;

/// Scan orders available for the serialization bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum OrderKind {
    Hilbert,
    HilbertTrans,
    Zorder,
    ZorderTrans,
    Random,
}

impl OrderKind {
    pub const ALL: [OrderKind; 5] = [
        OrderKind::Hilbert,
        OrderKind::HilbertTrans,
        OrderKind::Zorder,
        OrderKind::ZorderTrans,
        OrderKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderKind::Hilbert => "hilbert",
            OrderKind::HilbertTrans => "hilbert_trans",
            OrderKind::Zorder => "zorder",
            OrderKind::ZorderTrans => "zorder_trans",
            OrderKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|o| o.name()).collect();
                CoreError::InvalidArgument(format!(
                    "unknown order '{s}', valid orders: {}",
                    valid.join(", ")
                ))
            })
    }

    fn uses_axis_transform(self) -> bool {
        matches!(self, OrderKind::HilbertTrans | OrderKind::ZorderTrans)
    }
}

/// A resolved serialization: the scan permutation plus the codes that
/// induced it.
#[derive(Debug, Clone)]
pub struct SerializationOrder {
    pub order_id: OrderKind,
    pub permutation: Vec<usize>,
    pub codes: Vec<u64>,
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(CoreError::InvalidArgument(format!(
            "bits must lie in [1, {MAX_BITS}], got {bits}"
        )));
    }
    Ok(())
}

/// Map centers into the integer grid [0, 2^bits - 1]^3 by scaling the
/// axis-aligned bounding box. Degenerate axes map to 0.
pub fn quantize_centers(centers: &[Point], bits: u32) -> Result<Vec<[u32; 3]>> {
    check_bits(bits)?;
    for (i, c) in centers.iter().enumerate() {
        if !c.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidInput(format!(
                "non-finite center at index {i}"
            )));
        }
    }
    let max_cell = (1u64 << bits) - 1;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in centers {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let out = centers
        .iter()
        .map(|c| {
            let mut q = [0u32; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                if extent > 0.0 {
                    let scaled = (c[a] - lo[a]) / extent * max_cell as f64;
                    q[a] = (scaled.floor() as u64).min(max_cell) as u32;
                }
            }
            q
        })
        .collect();
    Ok(out)
}

fn check_grid_point(p: [u32; 3], bits: u32) -> Result<()> {
    let limit = 1u64 << bits;
    for (a, &v) in p.iter().enumerate() {
        if u64::from(v) >= limit {
            return Err(CoreError::InvalidArgument(format!(
                "axis {a} coordinate {v} out of range for bits={bits}"
            )));
        }
    }
    Ok(())
}

// Skilling's transpose-form Hilbert transform (3 axes).
fn axes_to_transpose(x: &mut [u32; 3], bits: u32) {
    let mut q: u32 = 1 << (bits - 1);
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    q = 1 << (bits - 1);
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in x.iter_mut() {
        *v ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], bits: u32) {
    let n: u32 = 2 << (bits - 1);
    let mut t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q: u32 = 2;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

/// 3D Hilbert curve index of a grid cell. Bijective on the grid;
/// consecutive indices are face-adjacent cells.
pub fn hilbert_encode(grid_point: [u32; 3], bits: u32) -> Result<u64> {
    check_bits(bits)?;
    check_grid_point(grid_point, bits)?;
    let mut x = grid_point;
    axes_to_transpose(&mut x, bits);
    // interleave transpose bits, axis 0 most significant in each group
    let mut code: u64 = 0;
    for b in (0..bits).rev() {
        for v in x {
            code = (code << 1) | u64::from((v >> b) & 1);
        }
    }
    Ok(code)
}

/// Inverse of [`hilbert_encode`].
pub fn hilbert_decode(code: u64, bits: u32) -> Result<[u32; 3]> {
    check_bits(bits)?;
    if code >> (3 * bits) != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "code {code} out of range for bits={bits}"
        )));
    }
    let mut x = [0u32; 3];
    for b in (0..bits).rev() {
        for (i, v) in x.iter_mut().enumerate() {
            let shift = 3 * b + (2 - i as u32);
            *v = (*v << 1) | ((code >> shift) & 1) as u32;
        }
    }
    transpose_to_axes(&mut x, bits);
    Ok(x)
}

/// Morton code: bit interleave with x in the least significant slot,
/// then y, then z.
pub fn zorder_encode(grid_point: [u32; 3], bits: u32) -> Result<u64> {
    check_bits(bits)?;
    check_grid_point(grid_point, bits)?;
    let mut code: u64 = 0;
    for b in 0..bits {
        for (i, &v) in grid_point.iter().enumerate() {
            code |= u64::from((v >> b) & 1) << (3 * b + i as u32);
        }
    }
    Ok(code)
}

/// Inverse of [`zorder_encode`].
pub fn zorder_decode(code: u64, bits: u32) -> Result<[u32; 3]> {
    check_bits(bits)?;
    if code >> (3 * bits) != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "code {code} out of range for bits={bits}"
        )));
    }
    let mut x = [0u32; 3];
    for b in 0..bits {
        for (i, v) in x.iter_mut().enumerate() {
            *v |= (((code >> (3 * b + i as u32)) & 1) as u32) << b;
        }
    }
    Ok(x)
}

// Trans variants scan after the cyclic axis permutation (x,y,z) -> (y,z,x).
fn cycle_axes(c: Point) -> Point {
    [c[1], c[2], c[0]]
}

/// Serialize centers under the given scan order: axis transform for the
/// *_trans variants, quantize, encode, stable argsort by code.
pub fn serialize(centers: &[Point], order_id: OrderKind, bits: u32, seed: u64) -> Result<SerializationOrder> {
    let g = centers.len();
    if g == 0 {
        return Err(CoreError::EmptyInput("no centers to serialize".into()));
    }
    if order_id == OrderKind::Random {
        let mut perm: Vec<usize> = (0..g).collect();
        let mut rng = rng_from(seed, "serial-random");
        perm.shuffle(&mut rng);
        return Ok(SerializationOrder {
            order_id,
            permutation: perm,
            codes: vec![0; g],
        });
    }
    let transformed: Vec<Point> = if order_id.uses_axis_transform() {
        centers.iter().map(|&c| cycle_axes(c)).collect()
    } else {
        centers.to_vec()
    };
    let grid = quantize_centers(&transformed, bits)?;
    let codes: Vec<u64> = grid
        .iter()
        .map(|&p| match order_id {
            OrderKind::Hilbert | OrderKind::HilbertTrans => hilbert_encode(p, bits),
            OrderKind::Zorder | OrderKind::ZorderTrans => zorder_encode(p, bits),
            OrderKind::Random => unreachable!(),
        })
        .collect::<Result<_>>()?;
    let mut perm: Vec<usize> = (0..g).collect();
    perm.sort_by_key(|&i| (codes[i], i));
    Ok(SerializationOrder {
        order_id,
        permutation: perm,
        codes,
    })
}

/// Uniform draw of one order from the bank.
pub fn sample_order(bank: &[OrderKind], seed: u64) -> Result<OrderKind> {
    if bank.is_empty() {
        return Err(CoreError::EmptyInput("serialization bank is empty".into()));
    }
    let mut rng = rng_from(seed, "order-bank");
    Ok(bank[rng.gen_range(0..bank.len())])
}
