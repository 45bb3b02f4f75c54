//! Pre-norm transformer backbone with strict causal masking, rotary
//! Q/K rotation from patch centers, and the per-order affine gate.

use crate::autodiff::{Id, Scalar, Tape};
use crate::error::{CoreError, Result};
use crate::geometry::Point;
use crate::model::{BoundParams, ModelDims, LAYER_NORM_EPS};
use crate::position::{self, RopeConfig};

/// Large negative sentinel standing in for -inf before softmax. Keeps
/// exp() finite while underflowing masked weights to exact zero.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Bidirectional => "bidirect",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttentionMode::Causal),
            "bidirect" | "bidirectional" => Ok(AttentionMode::Bidirectional),
            _ => Err(CoreError::Config(format!(
                "unknown attention mode '{s}', expected causal or bidirect"
            ))),
        }
    }
}

/// Additive causal mask: 0 on and below the diagonal, the sentinel
/// above.
pub fn causal_mask<F: Scalar>(t: usize) -> Vec<F> {
    let sentinel = F::from_f64(MASK_SENTINEL);
    let mut m = vec![F::zero(); t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = sentinel;
        }
    }
    m
}

/// gamma_o * z + beta_o elementwise per token.
pub fn apply_order_affine<F: Scalar>(
    tape: &mut Tape<F>,
    tokens: Id,
    gamma: Id,
    beta: Id,
) -> Result<Id> {
    let x = tape.mul_row(tokens, gamma)?;
    tape.add_row(x, beta)
}

fn layer_norm_affine<F: Scalar>(tape: &mut Tape<F>, x: Id, g: Id, b: Id) -> Result<Id> {
    let n = tape.layer_norm_rows(x, F::from_f64(LAYER_NORM_EPS));
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

fn attention_block<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    dims: &ModelDims,
    layer: usize,
    x: Id,
    rope: Option<&(RopeConfig, Vec<Point>)>,
    mode: AttentionMode,
) -> Result<Id> {
    let t_len = tape.shape(x).rows;
    let head_dim = dims.head_dim();
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());

    let proj = |tape: &mut Tape<F>, w: &str| -> Result<Id> {
        let wid = bound.id(&format!("layer{layer}.attn.{w}"))?;
        let bid = bound.id(&format!("layer{layer}.attn.{w}.bias"))?;
        let p = tape.matmul(x, wid)?;
        tape.add_row(p, bid)
    };
    let q = proj(tape, "wq")?;
    let k = proj(tape, "wk")?;
    let v = proj(tape, "wv")?;

    let mask: Option<Vec<F>> = match mode {
        AttentionMode::Causal => Some(causal_mask(t_len)),
        AttentionMode::Bidirectional => None,
    };

    let mut head_outs = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let qs = tape.slice_cols(q, h * head_dim, head_dim)?;
        let ks = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vs = tape.slice_cols(v, h * head_dim, head_dim)?;
        let (qs, ks) = match rope {
            Some((cfg, centers)) => (
                position::rope_rotate(tape, qs, centers, cfg)?,
                position::rope_rotate(tape, ks, centers, cfg)?,
            ),
            None => (qs, ks),
        };
        let kt = tape.transpose(ks);
        let scores = tape.matmul(qs, kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = &mask {
            scores = tape.add_const(scores, m)?;
        }
        let weights = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(weights, vs)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let wo = bound.id(&format!("layer{layer}.attn.wo"))?;
    let bo = bound.id(&format!("layer{layer}.attn.wo.bias"))?;
    let out = tape.matmul(cat, wo)?;
    tape.add_row(out, bo)
}

/// L pre-norm blocks then a final norm. Input is the position-injected
/// token sequence (T, C); output is h_{1:T}, with the prediction
/// output being the hidden state itself.
pub fn transformer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    dims: &ModelDims,
    mut x: Id,
    rope: Option<&(RopeConfig, Vec<Point>)>,
    mode: AttentionMode,
) -> Result<Id> {
    if tape.shape(x).cols != dims.dim {
        return Err(CoreError::Config(format!(
            "backbone expects dim {}, got {}",
            dims.dim,
            tape.shape(x).cols
        )));
    }
    for l in 0..dims.layers {
        let n1 = layer_norm_affine(
            tape,
            x,
            bound.id(&format!("layer{l}.ln1.g"))?,
            bound.id(&format!("layer{l}.ln1.b"))?,
        )?;
        let attn = attention_block(tape, bound, dims, l, n1, rope, mode)?;
        x = tape.add(x, attn)?;

        let n2 = layer_norm_affine(
            tape,
            x,
            bound.id(&format!("layer{l}.ln2.g"))?,
            bound.id(&format!("layer{l}.ln2.b"))?,
        )?;
        let w1 = bound.id(&format!("layer{l}.ffn.w1"))?;
        let b1 = bound.id(&format!("layer{l}.ffn.w1.bias"))?;
        let w2 = bound.id(&format!("layer{l}.ffn.w2"))?;
        let b2 = bound.id(&format!("layer{l}.ffn.w2.bias"))?;
        let f = tape.matmul(n2, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        x = tape.add(x, f)?;
    }
    layer_norm_affine(tape, x, bound.id("final.ln.g")?, bound.id("final.ln.b")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardConfig, ModelState};
    use crate::serial::OrderKind;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            dim: 8,
            layers: 2,
            heads: 2,
            tok_h1: 6,
            tok_h2: 10,
            bank: vec![OrderKind::Hilbert],
        }
    }

    #[test]
    fn causal_mask_shape_and_values() {
        let m: Vec<f64> = causal_mask(3);
        let s = MASK_SENTINEL;
        assert_eq!(m, vec![0.0, s, s, 0.0, 0.0, s, 0.0, 0.0, 0.0]);
        let m1: Vec<f64> = causal_mask(1);
        assert_eq!(m1, vec![0.0]);
    }

    #[test]
    fn masked_softmax_rows_are_prefix_distributions() {
        let mut tape: Tape<f64> = Tape::new();
        let t = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = tape
            .constant(t, t, (0..t * t).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .unwrap();
        let mask = causal_mask(t);
        let masked = tape.add_const(scores, &mask).unwrap();
        let w = tape.softmax_rows(masked);
        let wv = tape.values(w);
        for i in 0..t {
            let mut sum = 0.0;
            for j in 0..t {
                let x = wv[i * t + j];
                if j > i {
                    assert_eq!(x, 0.0, "masked weight must underflow to exact zero");
                } else {
                    assert!(x >= 0.0);
                    sum += x;
                }
            }
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn order_affine_identity_and_collapse() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ones = tape.constant(1, 3, vec![1.0; 3]).unwrap();
        let zeros = tape.constant(1, 3, vec![0.0; 3]).unwrap();
        let id = apply_order_affine(&mut tape, z, ones, zeros).unwrap();
        assert_eq!(tape.values(id), tape.values(z));

        let b = tape.constant(1, 3, vec![7.0, 8.0, 9.0]).unwrap();
        let collapsed = apply_order_affine(&mut tape, z, zeros, b).unwrap();
        assert_eq!(tape.values(collapsed), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    fn run_forward(mode: AttentionMode, perturb_at: Option<usize>) -> Vec<f64> {
        let state: ModelState<f64> = ModelState::init(dims(), 21).unwrap();
        let t_len = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vals: Vec<f64> = (0..t_len * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
        if let Some(j) = perturb_at {
            vals[j * 8] += 1.0;
        }
        let mut tape: Tape<f64> = Tape::new();
        let bound = BoundParams::bind(&mut tape, &state).unwrap();
        let x = tape.constant(t_len, 8, vals).unwrap();
        let h = transformer_forward(&mut tape, &bound, &dims(), x, None, mode).unwrap();
        let _ = ForwardConfig::default();
        tape.values(h).to_vec()
    }

    #[test]
    fn causal_prefix_unchanged_under_suffix_perturbation() {
        let base = run_forward(AttentionMode::Causal, None);
        let pert = run_forward(AttentionMode::Causal, Some(4));
        // positions before the perturbed token are bit-identical
        assert_eq!(&base[..4 * 8], &pert[..4 * 8]);
        assert_ne!(&base[4 * 8..], &pert[4 * 8..]);
    }

    #[test]
    fn bidirectional_leaks_backwards() {
        let base = run_forward(AttentionMode::Bidirectional, None);
        let pert = run_forward(AttentionMode::Bidirectional, Some(4));
        let max_prefix_diff = base[..4 * 8]
            .iter()
            .zip(&pert[..4 * 8])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_prefix_diff > 1e-6);
    }

    #[test]
    fn attn_mode_parse() {
        assert_eq!(AttentionMode::parse("causal").unwrap(), AttentionMode::Causal);
        assert_eq!(
            AttentionMode::parse("bidirect").unwrap(),
            AttentionMode::Bidirectional
        );
        assert!(AttentionMode::parse("full").is_err());
    }
}
