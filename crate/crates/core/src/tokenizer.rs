//! Mini-PointNet patch encoder: shared pointwise layers, max pooling,
//! global-feature concat, second pointwise stage, final max pool.

use crate::autodiff::{Id, Scalar, Tape};
use crate::error::Result;
use crate::geometry::Point;
use crate::model::BoundParams;

/// Tape ids of the tokenizer weights.
pub struct TokenizerIds {
    pub w1: Id,
    pub b1: Id,
    pub w2: Id,
    pub b2: Id,
    pub w3: Id,
    pub b3: Id,
    pub w4: Id,
    pub b4: Id,
}

impl TokenizerIds {
    pub fn from_bound(bound: &BoundParams) -> Result<Self> {
        Ok(Self {
            w1: bound.id("tok.w1")?,
            b1: bound.id("tok.w1.bias")?,
            w2: bound.id("tok.w2")?,
            b2: bound.id("tok.w2.bias")?,
            w3: bound.id("tok.w3")?,
            b3: bound.id("tok.w3.bias")?,
            w4: bound.id("tok.w4")?,
            b4: bound.id("tok.w4.bias")?,
        })
    }
}

/// Encode one center-normalized patch (S points) into a (1, C) token.
/// Permutation-invariant in the S rows by construction: all pooling is
/// columnwise max.
pub fn encode_patch<F: Scalar>(
    tape: &mut Tape<F>,
    ids: &TokenizerIds,
    patch: &[Point],
) -> Result<Id> {
    let s = patch.len();
    let flat: Vec<F> = patch
        .iter()
        .flat_map(|p| p.iter().map(|&v| F::from_f64(v)))
        .collect();
    let x = tape.constant(s, 3, flat)?;

    // stage 1: shared pointwise layers
    let h = tape.matmul(x, ids.w1)?;
    let h = tape.add_row(h, ids.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, ids.w2)?;
    let h = tape.add_row(h, ids.b2)?;
    let h = tape.gelu(h);

    // global feature appended to every per-point feature
    let global = tape.max_rows(h);
    let tiled = tape.broadcast_row(global, s)?;
    let h = tape.concat_cols(&[h, tiled])?;

    // stage 2
    let h = tape.matmul(h, ids.w3)?;
    let h = tape.add_row(h, ids.b3)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, ids.w4)?;
    let h = tape.add_row(h, ids.b4)?;
    Ok(tape.max_rows(h))
}
