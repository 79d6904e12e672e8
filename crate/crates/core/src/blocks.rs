//! Pre-norm decoder blocks: grouped-query attention with rotary positions and
//! a SwiGLU feedforward, shared by the input stack, the output stack and the
//! reasoning core.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, dropout};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for projections and embeddings.
pub const INIT_STD: f32 = 0.02;

pub(crate) fn normal_param<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::parameter(shape, data).expect("valid shape")
}

pub(crate) fn const_param(shape: &[usize], value: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::parameter(shape, vec![value; n]).expect("valid shape")
}

/// Head layout of an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
}

impl AttentionShape {
    pub fn new(d_model: usize, n_heads: usize, n_kv_heads: usize) -> Result<Self> {
        if n_heads == 0 || n_kv_heads == 0 || d_model == 0 {
            return Err(Error::Config("attention dimensions must be >= 1".into()));
        }
        if d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        if n_heads % n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {n_heads} is not a multiple of n_kv_heads {n_kv_heads}"
            )));
        }
        Ok(AttentionShape { d_model, n_heads, n_kv_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }
}

/// Cos/sin of `θ_i · m` for every position `m < max_seq_len` and rotary
/// pair `i < d_h / 2`, with `θ_i = base^(−2i / d_h)`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub theta: f32,
    pub max_seq_len: usize,
    pub pairs: usize,
    cos: Arc<[f32]>,
    sin: Arc<[f32]>,
}

impl RopeTable {
    pub fn new(head_dim: usize, max_seq_len: usize, theta: f32) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head dimension, got {head_dim}"
            )));
        }
        if !(theta > 0.0) {
            return Err(Error::Config(format!("rope theta must be positive, got {theta}")));
        }
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(max_seq_len * pairs);
        let mut sin = Vec::with_capacity(max_seq_len * pairs);
        for m in 0..max_seq_len {
            for i in 0..pairs {
                let freq = (theta as f64).powf(-2.0 * i as f64 / head_dim as f64);
                let angle = m as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(RopeTable {
            theta,
            max_seq_len,
            pairs,
            cos: cos.into(),
            sin: sin.into(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.pairs * 2
    }
}

/// Rotates each interleaved pair `(x_2i, x_2i+1)` of `x[B, H, T, d_h]` by the
/// angle for absolute position `position_offset + t`.
pub fn apply_rope(x: &Tensor, table: &RopeTable, position_offset: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("apply_rope", format!("expected [B, H, T, d_h], got {:?}", x.shape())));
    }
    let dh = x.shape()[3];
    if dh % 2 != 0 {
        return Err(Error::Config(format!("rotary head dimension must be even, got {dh}")));
    }
    if dh != table.head_dim() {
        return Err(Error::shape(
            "apply_rope",
            format!("head dimension {dh} but table built for {}", table.head_dim()),
        ));
    }
    ops::rotate_pairs(x, &table.cos, &table.sin, position_offset)
}

/// Weights of one pre-norm block. Projections are stored `[out, in]`; none
/// carries a bias.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub shape: AttentionShape,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_gate: Tensor,
    pub w_down: Tensor,
    pub gamma_attn: Tensor,
    pub gamma_mlp: Tensor,
}

impl BlockWeights {
    pub fn init<R: Rng + ?Sized>(shape: AttentionShape, rng: &mut R) -> Self {
        let d = shape.d_model;
        let kv = shape.kv_dim();
        BlockWeights {
            shape,
            wq: normal_param(&[d, d], INIT_STD, rng),
            wk: normal_param(&[kv, d], INIT_STD, rng),
            wv: normal_param(&[kv, d], INIT_STD, rng),
            wo: normal_param(&[d, d], INIT_STD, rng),
            w_up: normal_param(&[4 * d, d], INIT_STD, rng),
            w_gate: normal_param(&[4 * d, d], INIT_STD, rng),
            w_down: normal_param(&[d, 4 * d], INIT_STD, rng),
            gamma_attn: const_param(&[d], 1.0),
            gamma_mlp: const_param(&[d], 1.0),
        }
    }

    /// All projections zero, gains one: the block is the identity map.
    pub fn zeros(shape: AttentionShape) -> Self {
        let d = shape.d_model;
        let kv = shape.kv_dim();
        BlockWeights {
            shape,
            wq: const_param(&[d, d], 0.0),
            wk: const_param(&[kv, d], 0.0),
            wv: const_param(&[kv, d], 0.0),
            wo: const_param(&[d, d], 0.0),
            w_up: const_param(&[4 * d, d], 0.0),
            w_gate: const_param(&[4 * d, d], 0.0),
            w_down: const_param(&[d, 4 * d], 0.0),
            gamma_attn: const_param(&[d], 1.0),
            gamma_mlp: const_param(&[d], 1.0),
        }
    }

    /// Named tensors in checkpoint order.
    pub fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("mlp.w_up", &self.w_up),
            ("mlp.w_gate", &self.w_gate),
            ("mlp.w_down", &self.w_down),
            ("norm.gamma_attn", &self.gamma_attn),
            ("norm.gamma_mlp", &self.gamma_mlp),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Dropout state for one forward pass. Disabled means inference.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f32,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn training(p: f32, seed: u64) -> Self {
        Dropout {
            p,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.rng.as_mut() {
            Some(rng) if self.p > 0.0 => dropout(x, self.p, rng),
            _ => Ok(x.clone()),
        }
    }
}

/// Grouped-query self-attention over `x[B, T, d]` (no normalization, no
/// residual).
pub fn gqa_attention(x: &Tensor, w: &BlockWeights, rope: &RopeTable, causal: bool) -> Result<Tensor> {
    let s = w.shape;
    if x.rank() != 3 || x.shape()[2] != s.d_model {
        return Err(Error::Config(format!(
            "attention input {:?} does not match d_model {}",
            x.shape(),
            s.d_model
        )));
    }
    let q = ops::split_heads(&ops::linear(x, &w.wq)?, s.n_heads)?;
    let k = ops::split_heads(&ops::linear(x, &w.wk)?, s.n_kv_heads)?;
    let v = ops::split_heads(&ops::linear(x, &w.wv)?, s.n_kv_heads)?;
    let q = apply_rope(&q, rope, 0)?;
    let k = apply_rope(&k, rope, 0)?;
    let attended = ops::grouped_attention(&q, &k, &v, causal)?;
    ops::linear(&ops::merge_heads(&attended)?, &w.wo)
}

/// `W_down(SiLU(W_up x) ⊙ W_gate x)`, followed by dropout when training.
pub fn swiglu_mlp(x: &Tensor, w: &BlockWeights, drop: &mut Dropout) -> Result<Tensor> {
    let up = ops::silu(&ops::linear(x, &w.w_up)?);
    let gate = ops::linear(x, &w.w_gate)?;
    let hidden = ops::mul(&up, &gate)?;
    drop.apply(&ops::linear(&hidden, &w.w_down)?)
}

/// `h' = h + Attn(RMSNorm(h))`, `h'' = h' + MLP(RMSNorm(h'))`.
pub fn block_forward(h: &Tensor, w: &BlockWeights, rope: &RopeTable, eps: f32, drop: &mut Dropout) -> Result<Tensor> {
    let attn = gqa_attention(&ops::rms_norm(h, &w.gamma_attn, eps)?, w, rope, true)?;
    let h1 = ops::add(h, &attn)?;
    let mlp = swiglu_mlp(&ops::rms_norm(&h1, &w.gamma_mlp, eps)?, w, drop)?;
    ops::add(&h1, &mlp)
}

/// Applies `blocks` in order.
pub fn stack_forward(h: &Tensor, blocks: &[BlockWeights], rope: &RopeTable, eps: f32, drop: &mut Dropout) -> Result<Tensor> {
    blocks
        .iter()
        .try_fold(h.clone(), |acc, w| block_forward(&acc, w, rope, eps, drop))
}
