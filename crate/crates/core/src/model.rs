//! Model parameters: a named, ordered tensor registry plus the full
//! forward pipeline from a patch set to hidden states.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Id, Scalar, Tape};
use crate::backbone::{self, AttentionMode};
use crate::error::{CoreError, Result};
use crate::geometry::PatchSet;
use crate::objective::{next_token_loss, LossConfig};
use crate::position::{self, RopeConfig};
use crate::rng::rng_from;
use crate::serial::{OrderKind, SerializationOrder};
use crate::tokenizer;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture dimensions, fixed at initialization time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub tok_h1: usize,
    pub tok_h2: usize,
    pub bank: Vec<OrderKind>,
}

impl ModelDims {
    /// CPU-trainable preset preserving every mechanism.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            tok_h1: 64,
            tok_h2: 128,
            bank: vec![OrderKind::Hilbert, OrderKind::HilbertTrans],
        }
    }

    /// Full-size preset.
    pub fn full() -> Self {
        Self {
            dim: 384,
            layers: 12,
            heads: 6,
            tok_h1: 128,
            tok_h2: 512,
            bank: vec![OrderKind::Hilbert, OrderKind::HilbertTrans],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(CoreError::Config("model dims must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "head_dim {} must be even for rope",
                self.head_dim()
            )));
        }
        if self.bank.is_empty() {
            return Err(CoreError::Config("serialization bank is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

/// Ordered, name-addressable parameter store. Iteration order is the
/// registration order, which keeps checkpoints and the optimizer state
/// aligned.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    tensors: Vec<ParamTensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<F>) {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(!self.index.contains_key(name));
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| CoreError::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(CoreError::Config(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<F>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<F>> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// All learnable state plus the dimensions that define it.
#[derive(Debug, Clone)]
pub struct ModelState<F> {
    pub dims: ModelDims,
    pub params: ParamSet<F>,
}

fn glorot<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect()
}

impl<F: Scalar> ModelState<F> {
    /// Deterministic initialization: uniform +/- sqrt(6/(fan_in+fan_out))
    /// weights, zero biases, unit norm gains.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng_from(seed, "model-init");
        let mut p = ParamSet::new();
        let c = dims.dim;
        let (h1, h2) = (dims.tok_h1, dims.tok_h2);

        let dense = |p: &mut ParamSet<F>, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            p.insert(name, rows, cols, glorot(rng, rows, cols));
            p.insert(&format!("{name}.bias"), 1, cols, vec![F::zero(); cols]);
        };

        dense(&mut p, "tok.w1", 3, h1, &mut rng);
        dense(&mut p, "tok.w2", h1, h1, &mut rng);
        dense(&mut p, "tok.w3", 2 * h1, h2, &mut rng);
        dense(&mut p, "tok.w4", h2, c, &mut rng);

        dense(&mut p, "pe.w1", 3, c, &mut rng);
        dense(&mut p, "pe.w2", c, c, &mut rng);

        for &o in &dims.bank {
            p.insert(&format!("order.{}.gamma", o.name()), 1, c, vec![F::one(); c]);
            p.insert(&format!("order.{}.beta", o.name()), 1, c, vec![F::zero(); c]);
        }

        for l in 0..dims.layers {
            p.insert(&format!("layer{l}.ln1.g"), 1, c, vec![F::one(); c]);
            p.insert(&format!("layer{l}.ln1.b"), 1, c, vec![F::zero(); c]);
            for w in ["wq", "wk", "wv", "wo"] {
                dense(&mut p, &format!("layer{l}.attn.{w}"), c, c, &mut rng);
            }
            p.insert(&format!("layer{l}.ln2.g"), 1, c, vec![F::one(); c]);
            p.insert(&format!("layer{l}.ln2.b"), 1, c, vec![F::zero(); c]);
            dense(&mut p, &format!("layer{l}.ffn.w1"), c, 4 * c, &mut rng);
            dense(&mut p, &format!("layer{l}.ffn.w2"), 4 * c, c, &mut rng);
        }

        p.insert("final.ln.g", 1, c, vec![F::one(); c]);
        p.insert("final.ln.b", 1, c, vec![F::zero(); c]);

        Ok(Self { dims, params: p })
    }
}

/// Tape bindings for every parameter, created fresh per step.
pub struct BoundParams {
    ids: HashMap<String, Id>,
}

impl BoundParams {
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, state: &ModelState<F>) -> Result<Self> {
        let mut ids = HashMap::new();
        for t in state.params.iter() {
            let id = tape.param(t.rows, t.cols, t.data.clone())?;
            ids.insert(t.name.clone(), id);
        }
        Ok(Self { ids })
    }

    pub fn id(&self, name: &str) -> Result<Id> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Config(format!("unbound parameter '{name}'")))
    }

    /// Pull gradients back out in the parameter set's order.
    pub fn collect_grads<F: Scalar>(
        &self,
        tape: &Tape<F>,
        grads: &Gradients<F>,
        state: &ModelState<F>,
    ) -> Result<Vec<Vec<F>>> {
        state
            .params
            .iter()
            .map(|t| {
                let id = self.id(&t.name)?;
                Ok(grads.get_or_zero(id, tape.shape(id).len()))
            })
            .collect()
    }
}

/// Forward-pass toggles (the ablation surface).
#[derive(Debug, Clone, Copy)]
pub struct ForwardConfig {
    pub center_additive_pe: bool,
    pub rope3d: bool,
    pub mode: AttentionMode,
    pub rope_base: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            center_additive_pe: true,
            rope3d: true,
            mode: AttentionMode::Causal,
            rope_base: position::ROPE_DEFAULT_BASE,
        }
    }
}

/// Output handles of one forward pass over a single cloud.
pub struct ForwardOut {
    /// serialized latent tokens z_{1:T}, (T, C)
    pub tokens: Id,
    /// hidden states h_{1:T}, (T, C)
    pub hidden: Id,
}

/// Full pipeline on the tape: tokenize serialized patches, apply the
/// order affine, add the center PE, run the causal backbone.
pub fn forward_cloud<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    state: &ModelState<F>,
    patches: &PatchSet,
    order: &SerializationOrder,
    fwd: &ForwardConfig,
) -> Result<ForwardOut> {
    let dims = &state.dims;
    if !dims.bank.contains(&order.order_id) {
        return Err(CoreError::Config(format!(
            "order '{}' is not in the configured bank",
            order.order_id.name()
        )));
    }
    let t_len = patches.num_patches();
    if t_len == 0 {
        return Err(CoreError::EmptyInput("no patches".into()));
    }

    // tokens in serialized order
    let tok = tokenizer::TokenizerIds::from_bound(bound)?;
    let mut token_rows = Vec::with_capacity(t_len);
    for &g in &order.permutation {
        token_rows.push(tokenizer::encode_patch(tape, &tok, &patches.patches[g])?);
    }
    let tokens = tape.concat_rows(&token_rows)?;

    // serialized centers, both raw (for the PE net) and rope-normalized
    let centers: Vec<[f64; 3]> = order
        .permutation
        .iter()
        .map(|&g| patches.centers[g])
        .collect();

    let gamma = bound.id(&format!("order.{}.gamma", order.order_id.name()))?;
    let beta = bound.id(&format!("order.{}.beta", order.order_id.name()))?;
    let mut x = backbone::apply_order_affine(tape, tokens, gamma, beta)?;

    if fwd.center_additive_pe {
        let flat: Vec<F> = centers
            .iter()
            .flat_map(|c| c.iter().map(|&v| F::from_f64(v)))
            .collect();
        let c_in = tape.constant(t_len, 3, flat)?;
        let pe = position::center_pe(
            tape,
            c_in,
            bound.id("pe.w1")?,
            bound.id("pe.w1.bias")?,
            bound.id("pe.w2")?,
            bound.id("pe.w2.bias")?,
        )?;
        x = tape.add(x, pe)?;
    }

    let rope_cfg = if fwd.rope3d {
        let mut cfg = RopeConfig::new(dims.head_dim())?;
        cfg.base = fwd.rope_base;
        Some((cfg, position::normalize_centers_for_rope(&centers, cfg.eps)))
    } else {
        None
    };

    let hidden = backbone::transformer_forward(tape, bound, dims, x, rope_cfg.as_ref(), fwd.mode)?;
    Ok(ForwardOut { tokens, hidden })
}

/// Forward plus the shifted next-token loss for one cloud.
pub fn loss_for_cloud<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    state: &ModelState<F>,
    patches: &PatchSet,
    order: &SerializationOrder,
    fwd: &ForwardConfig,
    loss_cfg: &LossConfig,
) -> Result<(Id, ForwardOut)> {
    let out = forward_cloud(tape, bound, state, patches, order, fwd)?;
    let loss = next_token_loss(tape, out.hidden, out.tokens, loss_cfg)?;
    Ok((loss, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_patches, PointCloud};
    use crate::serial::serialize;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            dim: 8,
            layers: 1,
            heads: 1,
            tok_h1: 6,
            tok_h2: 10,
            bank: vec![OrderKind::Hilbert],
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a: ModelState<f32> = ModelState::init(tiny_dims(), 3).unwrap();
        let b: ModelState<f32> = ModelState::init(tiny_dims(), 3).unwrap();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.data, y.data, "param {}", x.name);
        }
    }

    #[test]
    fn dims_validation() {
        let mut d = tiny_dims();
        d.heads = 3;
        assert!(d.validate().is_err()); // 8 % 3 != 0
        let mut d = tiny_dims();
        d.bank.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn forward_is_pure() {
        let state: ModelState<f64> = ModelState::init(tiny_dims(), 3).unwrap();
        let cloud = random_cloud(24, 1);
        let patches = make_patches(&cloud, 6, 4, 0).unwrap();
        let order = serialize(&patches.centers, OrderKind::Hilbert, 6, 0).unwrap();
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let bound = BoundParams::bind(&mut tape, &state).unwrap();
            let out = forward_cloud(
                &mut tape,
                &bound,
                &state,
                &patches,
                &order,
                &ForwardConfig::default(),
            )
            .unwrap();
            tape.values(out.hidden).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unknown_order_rejected() {
        let state: ModelState<f64> = ModelState::init(tiny_dims(), 3).unwrap();
        let cloud = random_cloud(16, 2);
        let patches = make_patches(&cloud, 4, 4, 0).unwrap();
        let order = serialize(&patches.centers, OrderKind::Zorder, 6, 0).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let bound = BoundParams::bind(&mut tape, &state).unwrap();
        let err = forward_cloud(
            &mut tape,
            &bound,
            &state,
            &patches,
            &order,
            &ForwardConfig::default(),
        );
        assert!(err.is_err());
    }
}
