//! Browser bindings. Each export is a thin wrapper over a plain function that
//! returns JSON, so the same code runs (and is tested) natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use cfhrm::analysis::{generate, GenerationRequest, TokenTelemetry};
use cfhrm::blocks::{apply_rope, RopeTable};
use cfhrm::config::ModelConfig;
use cfhrm::data::{encode_documents, Tokenizer};
use cfhrm::hrm::{halts_inference, halts_training, ExplorationDraw};
use cfhrm::synth::mixed_corpus;
use cfhrm::tensor::Tensor;
use cfhrm::train::Trainer;
use cfhrm::{Error, Result};

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Data(e.to_string()))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Debug, Serialize)]
pub struct RopePoint {
    pub distance: usize,
    /// Cosine between rotated q at position `distance` and rotated k at 0.
    pub cosine: f64,
    /// Same pair moved to positions `offset + distance` and `offset`.
    pub shifted: f64,
}

fn rotated(x: &Tensor, table: &RopeTable, pos: usize) -> Result<Vec<f64>> {
    Ok(apply_rope(x, table, pos)?.to_vec().into_iter().map(f64::from).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

/// Similarity of a random query/key pair against their relative distance.
/// With `same = true` the key equals the query.
pub fn rope_curve(head_dim: usize, max_distance: usize, theta: f32, offset: usize, same: bool, seed: u64) -> Result<Vec<RopePoint>> {
    if head_dim == 0 || head_dim > 512 || max_distance > 4096 || offset > 4096 {
        return Err(Error::Input("head_dim must be in 1..=512, distances and offset at most 4096".into()));
    }
    let table = RopeTable::new(head_dim, offset + max_distance + 1, theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Result<Tensor> {
        Tensor::from_vec(&[1, 1, 1, head_dim], (0..head_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    };
    let q = draw()?;
    let k = if same { q.clone() } else { draw()? };
    let (k0, ks) = (rotated(&k, &table, 0)?, rotated(&k, &table, offset)?);
    (0..=max_distance)
        .map(|d| {
            Ok(RopePoint {
                distance: d,
                cosine: cosine(&rotated(&q, &table, d)?, &k0),
                shifted: cosine(&rotated(&q, &table, offset + d)?, &ks),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, PartialEq)]
pub struct HaltOutcome {
    /// Steps taken by the inference rule with bias `delta`.
    pub inference_steps: usize,
    /// Steps taken by the training rule, honouring a forced depth.
    pub training_steps: usize,
    pub margins: Vec<f32>,
}

/// `scores` holds (halt, continue) pairs for steps 1..=s_max in order.
pub fn halting_outcome(scores: &[f32], delta: f32, forced: Option<usize>) -> Result<HaltOutcome> {
    if scores.is_empty() || scores.len() % 2 != 0 {
        return Err(Error::Input(format!("need (halt, continue) pairs, got {} numbers", scores.len())));
    }
    if scores.iter().any(|x| !x.is_finite()) || !delta.is_finite() {
        return Err(Error::Input("scores and delta must be finite".into()));
    }
    let pairs: Vec<(f32, f32)> = scores.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    let s_max = pairs.len();
    let draw = match forced {
        Some(m) if (2..=s_max).contains(&m) => ExplorationDraw { exploring: true, target: Some(m) },
        Some(m) => return Err(Error::Input(format!("forced depth must be in 2..={s_max}, got {m}"))),
        None => ExplorationDraw::NONE,
    };
    let first = |stop: &dyn Fn(usize, f32, f32) -> bool| {
        pairs.iter().enumerate().find(|(i, (h, c))| stop(i + 1, *h, *c)).map_or(s_max, |(i, _)| i + 1)
    };
    Ok(HaltOutcome {
        inference_steps: first(&|_, h, c| halts_inference(h, c, delta)),
        training_steps: first(&|s, h, c| halts_training(h, c, s, &draw)),
        margins: pairs.iter().map(|(h, c)| h - c).collect(),
    })
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        max_seq_len: 64,
        n_input_layers: 1,
        n_output_layers: 1,
        n_heads: 2,
        n_kv_heads: 1,
        n_high_layers: 1,
        n_low_layers: 1,
        batch_size: 4,
        seq_len: 32,
        iterations: 400,
        ..ModelConfig::desk()
    }
}

#[derive(Debug, Serialize)]
pub struct StepSummary {
    pub iteration: u64,
    pub lm_loss: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Serialize)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<TokenTelemetry>,
    pub mean_steps: f64,
}

/// A small byte-level model trained in place on synthetic repeat/reverse lines.
#[wasm_bindgen]
pub struct TinyModel {
    trainer: Trainer,
    stream: Vec<u32>,
    tok: Tokenizer,
}

impl TinyModel {
    pub fn build(seed: u64) -> Result<TinyModel> {
        let tok = Tokenizer::byte();
        let stream = encode_documents(&[mixed_corpus(20_000, seed)], &tok)?;
        let trainer = Trainer::new(ModelConfig { seed, ..tiny_config() })?;
        Ok(TinyModel { trainer, stream, tok })
    }

    pub fn train_steps(&mut self, steps: usize) -> Result<Vec<StepSummary>> {
        (0..steps)
            .map(|_| {
                let batches = self.trainer.next_batches(&self.stream)?;
                let m = self.trainer.train_step(&batches)?;
                Ok(StepSummary { iteration: m.iteration, lm_loss: m.lm_loss, mean_steps: m.mean_steps })
            })
            .collect()
    }

    pub fn sample(&self, prompt: &str, max_new: usize, temperature: f32, top_k: Option<usize>, delta: f32, seed: u64) -> Result<Generation> {
        let req = GenerationRequest {
            prompt: prompt.to_string(),
            max_new_tokens: max_new,
            temperature,
            top_k,
            seed,
            halt_bias_delta: Some(delta),
        };
        let (text, tokens) = generate(&req, &self.trainer.weights, &self.trainer.config, &self.tok)?;
        let mean_steps = tokens.iter().map(|t| t.steps_used as f64).sum::<f64>() / tokens.len().max(1) as f64;
        Ok(Generation { text, tokens, mean_steps })
    }
}

#[wasm_bindgen]
impl TinyModel {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<TinyModel, JsError> {
        TinyModel::build(seed as u64).map_err(js)
    }

    /// Runs `steps` optimizer steps; JSON list of {iteration, lm_loss, mean_steps}.
    pub fn train(&mut self, steps: u32) -> std::result::Result<String, JsError> {
        self.train_steps(steps as usize).and_then(|s| to_json(&s)).map_err(js)
    }

    pub fn iteration(&self) -> u32 {
        self.trainer.iteration as u32
    }

    pub fn parameters(&self) -> u32 {
        self.trainer.weights.parameters().iter().map(|p| p.numel()).sum::<usize>() as u32
    }

    /// JSON {text, tokens: [telemetry], mean_steps}. `top_k = 0` means no cut.
    pub fn generate(&self, prompt: &str, max_new: u32, temperature: f32, top_k: u32, delta: f32, seed: u32) -> std::result::Result<String, JsError> {
        let top_k = (top_k > 0).then_some(top_k as usize);
        self.sample(prompt, max_new as usize, temperature, top_k, delta, seed as u64)
            .and_then(|g| to_json(&g))
            .map_err(js)
    }
}

/// JSON list of {distance, cosine, shifted}.
#[wasm_bindgen(js_name = ropeCurve)]
pub fn rope_curve_js(head_dim: u32, max_distance: u32, theta: f32, offset: u32, same: bool, seed: u32) -> std::result::Result<String, JsError> {
    rope_curve(head_dim as usize, max_distance as usize, theta, offset as usize, same, seed as u64)
        .and_then(|c| to_json(&c))
        .map_err(js)
}

/// JSON {inference_steps, training_steps, margins}. `forced = 0` means no forced depth.
#[wasm_bindgen(js_name = haltingOutcome)]
pub fn halting_outcome_js(scores: &[f32], delta: f32, forced: u32) -> std::result::Result<String, JsError> {
    let forced = (forced > 0).then_some(forced as usize);
    halting_outcome(scores, delta, forced).and_then(|o| to_json(&o)).map_err(js)
}
