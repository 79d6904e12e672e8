//! The full language model: embedding, input stack, reasoning core, output
//! stack, final norm and an LM head that reuses the embedding matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{const_param, normal_param, stack_forward, BlockWeights, Dropout, RopeTable, INIT_STD};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hrm::{hrm_forward, HaltMode, HrmOutput, HrmSettings, HrmWeights};
use crate::mix_seed;
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ModelWeights {
    /// `[V, d]`. Also the LM head.
    pub embedding: Tensor,
    pub input_blocks: Vec<BlockWeights>,
    pub hrm: HrmWeights,
    pub output_blocks: Vec<BlockWeights>,
    pub final_gamma: Tensor,
}

impl ModelWeights {
    /// The output projection, `[V, d]`. Same storage as the embedding.
    pub fn lm_head(&self) -> &Tensor {
        &self.embedding
    }

    /// Every trainable tensor once, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.input_blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("input.{i}.{n}"), t)));
        }
        out.extend(self.hrm.named());
        for (i, b) in self.output_blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("output.{i}.{n}"), t)));
        }
        out.push(("final_gamma".into(), &self.final_gamma));
        out
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|t| t.zero_grad());
    }
}

/// Fresh weights: normal(0, 0.02) projections and embedding, unit norm
/// gains, zero halting head.
pub fn build_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let shape = config.attention_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let embedding = normal_param(&[config.vocab_size, d], INIT_STD, &mut rng);
    let input_blocks = (0..config.n_input_layers).map(|_| BlockWeights::init(shape, &mut rng)).collect();
    let hrm = HrmWeights::init(shape, config.n_low_layers, config.n_high_layers, &mut rng);
    let output_blocks = (0..config.n_output_layers).map(|_| BlockWeights::init(shape, &mut rng)).collect();
    Ok(ModelWeights {
        embedding,
        input_blocks,
        hrm,
        output_blocks,
        final_gamma: const_param(&[d], 1.0),
    })
}

/// Trainable scalars, with the tied embedding counted once.
pub fn count_parameters(w: &ModelWeights) -> usize {
    w.named().iter().map(|(_, t)| t.numel()).sum()
}

/// The same count derived from the config alone, without allocating.
pub fn expected_parameters(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let kv = config.n_kv_heads * config.head_dim();
    let block = 2 * d * d + 2 * kv * d + 3 * 4 * d * d + 2 * d;
    let blocks = config.n_input_layers + config.n_output_layers + config.n_low_layers + config.n_high_layers;
    config.vocab_size * d + blocks * block + 2 * d * d + 2 * d + d
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunMode {
    /// Dropout on, exploration on; all randomness derives from `seed`.
    Training { seed: u64 },
    /// Dropout off, biased halting rule.
    Inference { delta: f32 },
}

impl RunMode {
    pub fn inference(config: &ModelConfig) -> Self {
        RunMode::Inference { delta: config.halt_bias_delta }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, T, V]`
    pub logits: Tensor,
    pub hrm: HrmOutput,
}

/// Runs the whole pipeline on `tokens`, a row-major `[batch, T]` block.
pub fn model_forward(
    tokens: &[u32],
    batch: usize,
    w: &ModelWeights,
    config: &ModelConfig,
    mode: &RunMode,
) -> Result<ModelOutput> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::Input(format!("{} tokens do not split into {batch} rows", tokens.len())));
    }
    let t = tokens.len() / batch;
    if t > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {t} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
    }
    let rope = RopeTable::new(config.head_dim(), config.max_seq_len, config.rope_theta)?;
    let eps = config.rms_eps;
    let (mut drop, halt) = match mode {
        RunMode::Training { seed } => (
            Dropout::training(config.dropout, mix_seed(*seed, 0)),
            HaltMode::Training {
                p_explore: config.p_explore,
                sample_seeds: (0..batch as u64).map(|b| mix_seed(*seed, b + 1)).collect(),
            },
        ),
        RunMode::Inference { delta } => (Dropout::disabled(), HaltMode::Inference { delta: *delta }),
    };

    let x = ops::embedding(tokens, &[batch, t], &w.embedding)?;
    let x = drop.apply(&x)?;
    let h = stack_forward(&x, &w.input_blocks, &rope, eps, &mut drop)?;
    let hrm = hrm_forward(&h, &w.hrm, &rope, &HrmSettings::from(config), &halt, &mut drop)?;
    let logits = output_head(&hrm.z_out, w, config, &rope, &mut drop)?;
    Ok(ModelOutput { logits, hrm })
}

fn output_head(z: &Tensor, w: &ModelWeights, config: &ModelConfig, rope: &RopeTable, drop: &mut Dropout) -> Result<Tensor> {
    let y = stack_forward(z, &w.output_blocks, rope, config.rms_eps, drop)?;
    let y = ops::rms_norm(&y, &w.final_gamma, config.rms_eps)?;
    ops::linear(&y, w.lm_head())
}

/// Logits the model would produce if the reasoning core stopped with
/// high-level state `z_high`. Dropout off.
pub fn decode_state(z_high: &Tensor, w: &ModelWeights, config: &ModelConfig) -> Result<Tensor> {
    let rope = RopeTable::new(config.head_dim(), config.max_seq_len, config.rope_theta)?;
    output_head(z_high, w, config, &rope, &mut Dropout::disabled())
}
