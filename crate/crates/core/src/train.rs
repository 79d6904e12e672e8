//! The joint objective, AdamW, the learning-rate schedule and the training
//! loop with validation, checkpoints and JSON-lines metrics.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_with_extras, save_with_extras, StoredTensor};
use crate::config::ModelConfig;
use crate::data::{batch_for_iteration, split_holdout, Tokenizer, TrainBatch};
use crate::error::{Error, Result};
use crate::hrm::HrmOutput;
use crate::model::{build_model, decode_state, model_forward, ModelWeights, RunMode};
use crate::tensor::{no_grad, ops, Tensor};
use crate::mix_seed;

const FORWARD_STREAM: u64 = 0x5eed_f0a7;
const EVAL_STREAM: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone)]
pub struct LossParts {
    /// What gets backpropagated: LM loss plus the halting surrogate.
    pub objective: Tensor,
    pub lm_loss: f64,
    /// `lambda * mean steps`.
    pub penalty: f64,
    pub surrogate: f64,
    /// `lm_loss + penalty`.
    pub total: f64,
    pub mean_steps: f64,
    pub steps_std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Next-token cross-entropy plus the step penalty. The reported penalty is
/// `lambda * S̄`; since step counts carry no gradient, the backpropagated
/// term is `lambda / B * Σ_b Σ_{s < steps_used(b)} sigmoid(continue - halt)`.
pub fn joint_loss(logits: &Tensor, targets: &[u32], hrm: &HrmOutput, lambda: f32) -> Result<LossParts> {
    let lm = ops::cross_entropy_next_token(logits, targets)?;
    let used = hrm.trace.steps_used();
    let b = used.len();
    let steps: Vec<f64> = used.iter().map(|&u| u as f64).collect();
    let (mean_steps, steps_std) = mean_std(&steps);

    let mut objective = lm.clone();
    let mut surrogate = 0.0f64;
    if lambda != 0.0 {
        for (si, scores) in hrm.step_scores.iter().enumerate() {
            let weights: Vec<f32> = used
                .iter()
                .map(|&u| if si + 1 < u { lambda / b as f32 } else { 0.0 })
                .collect();
            if weights.iter().all(|&w| w == 0.0) {
                continue;
            }
            let margin = ops::sub(&ops::column(scores, 1)?, &ops::column(scores, 0)?)?;
            let term = ops::weighted_sum(&ops::sigmoid(&margin), &weights)?;
            surrogate += term.item() as f64;
            objective = ops::add(&objective, &term)?;
        }
    }
    let lm_loss = lm.item() as f64;
    let penalty = lambda as f64 * mean_steps;
    Ok(LossParts {
        objective,
        lm_loss,
        penalty,
        surrogate,
        total: lm_loss + penalty,
        mean_steps,
        steps_std,
    })
}

/// Mean next-token cross-entropy of each of the `batch` rows of `logits`.
pub fn per_sample_loss(logits: &Tensor, targets: &[u32], batch: usize) -> Vec<f64> {
    let v = *logits.shape().last().expect("logits have a vocabulary axis");
    let data = logits.data();
    let per = targets.len() / batch;
    let mut out = vec![0.0; batch];
    for (b, slot) in out.iter_mut().enumerate() {
        let (mut total, mut n) = (0.0f64, 0usize);
        for t in b * per..(b + 1) * per {
            if targets[t] == ops::IGNORE_INDEX {
                continue;
            }
            let row = &data[t * v..(t + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&l| ((l - max) as f64).exp()).sum();
            total += z.ln() + max as f64 - row[targets[t] as usize] as f64;
            n += 1;
        }
        *slot = if n == 0 { 0.0 } else { total / n as f64 };
    }
    out
}

/// Regression of the halting margin `halt - continue` at step `s` onto the
/// observed advantage of stopping there, `r(s) - max_{s' > s} r(s')`, where
/// `r(s) = -loss_s - lambda * s` and `step_losses[s][b]` is sample `b`'s LM
/// loss decoded from the state after step `s + 1`. Only steps before a
/// sample's halting step carry a target. Returns the loss and the number of
/// targets, or `None` when there are none.
pub fn halt_value_loss(hrm: &HrmOutput, step_losses: &[Vec<f64>], lambda: f32) -> Result<Option<(Tensor, usize)>> {
    let used = hrm.trace.steps_used();
    let reward = |s: usize, b: usize| -step_losses[s][b] - lambda as f64 * (s + 1) as f64;
    let mut targets = vec![vec![None; used.len()]; hrm.step_scores.len()];
    let mut count = 0usize;
    for (b, &u) in used.iter().enumerate() {
        let mut best_later = f64::NEG_INFINITY;
        for s in (0..u).rev() {
            if s + 1 < u {
                targets[s][b] = Some((reward(s, b) - best_later) as f32);
                count += 1;
            }
            best_later = best_later.max(reward(s, b));
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let mut total: Option<Tensor> = None;
    for (scores, row) in hrm.step_scores.iter().zip(&targets) {
        if row.iter().all(Option::is_none) {
            continue;
        }
        let margin = ops::sub(&ops::column(scores, 0)?, &ops::column(scores, 1)?)?;
        let goal = Tensor::from_vec(&[row.len()], row.iter().map(|t| t.unwrap_or(0.0)).collect())?;
        let err = ops::sub(&margin, &goal)?;
        let weights: Vec<f32> = row.iter().map(|t| if t.is_some() { 1.0 / count as f32 } else { 0.0 }).collect();
        let term = ops::weighted_sum(&ops::mul(&err, &err)?, &weights)?;
        total = Some(match total {
            Some(acc) => ops::add(&acc, &term)?,
            None => term,
        });
    }
    Ok(total.map(|t| (t, count)))
}

/// Peak learning rate with linear warmup then cosine decay to
/// `min_lr_fraction` of peak. `iteration` is zero-based.
pub fn learning_rate(config: &ModelConfig, iteration: usize) -> f32 {
    let peak = config.learning_rate as f64;
    let total = config.iterations.max(1);
    let warmup = ((config.warmup_fraction as f64) * total as f64).ceil() as usize;
    if iteration < warmup {
        return (peak * (iteration + 1) as f64 / warmup as f64) as f32;
    }
    let floor = peak * config.min_lr_fraction as f64;
    let span = (total - warmup).max(1) as f64;
    let progress = ((iteration - warmup) as f64 / span).min(1.0);
    (floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(params: &[&Tensor], max_norm: f32) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.into_iter().map(|v| v as f64 * v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 {
        let factor = (max_norm as f64 / (norm + 1e-12)) as f32;
        for p in params {
            if let Some(g) = p.grad() {
                p.set_grad(g.into_iter().map(|v| v * factor).collect());
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay. Norm gains and the embedding are not
/// decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(w: &ModelWeights) -> Self {
        let named = w.named();
        AdamW {
            m: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
            decay: named.iter().map(|(n, t)| t.rank() >= 2 && n != "embedding").collect(),
        }
    }

    pub fn decays(&self) -> &[bool] {
        &self.decay
    }

    /// One update from the stored gradients; a missing gradient counts as zero.
    pub fn update(&mut self, w: &ModelWeights, lr: f32, config: &ModelConfig) {
        self.step += 1;
        let (b1, b2, eps) = (config.beta1, config.beta2, config.adam_eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in w.parameters().into_iter().enumerate() {
            let grad = p.grad();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if self.decay[i] { 1.0 - lr * config.weight_decay } else { 1.0 };
            let mut data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                data[j] = data[j] * decay - lr * update;
            }
        }
    }

    pub fn to_stored(&self, w: &ModelWeights) -> Vec<StoredTensor> {
        let mut out = Vec::new();
        for (i, (name, t)) in w.named().iter().enumerate() {
            out.push(StoredTensor { name: format!("optim.m.{name}"), shape: t.shape().to_vec(), data: self.m[i].clone() });
            out.push(StoredTensor { name: format!("optim.v.{name}"), shape: t.shape().to_vec(), data: self.v[i].clone() });
        }
        out.push(StoredTensor { name: "optim.step".into(), shape: vec![2], data: split_u64(self.step) });
        out
    }

    pub fn from_stored(w: &ModelWeights, extras: &[StoredTensor]) -> Result<Self> {
        let mut opt = AdamW::new(w);
        let find = |name: &str| {
            extras
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer tensor {name}")))
        };
        for (i, (name, t)) in w.named().iter().enumerate() {
            let m = find(&format!("optim.m.{name}"))?;
            let v = find(&format!("optim.v.{name}"))?;
            if m.data.len() != t.numel() || v.data.len() != t.numel() {
                return Err(Error::Data(format!("optimizer state for {name} has the wrong size")));
            }
            opt.m[i] = m.data.clone();
            opt.v[i] = v.data.clone();
        }
        opt.step = join_u64(&find("optim.step")?.data)?;
        Ok(opt)
    }
}

// f32 cannot hold every u64; store the step as two 24-bit-safe halves.
fn split_u64(x: u64) -> Vec<f32> {
    vec![(x >> 20) as f32, (x & 0xF_FFFF) as f32]
}

fn join_u64(v: &[f32]) -> Result<u64> {
    match v {
        [hi, lo] => Ok(((*hi as u64) << 20) | *lo as u64),
        _ => Err(Error::Data("malformed optimizer step".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iteration: u64,
    pub lm_loss: f64,
    pub step_penalty: f64,
    pub total_loss: f64,
    pub mean_steps: f64,
    pub steps_std: f64,
    pub learning_rate: f64,
    pub tokens_seen: u64,
    pub grad_norm: f64,
    pub surrogate_penalty: f64,
    pub halt_value_loss: f64,
    pub explore_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mean_steps: Option<f64>,
}

pub struct Trainer {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub optim: AdamW,
    /// Completed iterations.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = build_model(&config)?;
        let optim = AdamW::new(&weights);
        Ok(Trainer { config, weights, optim, iteration: 0 })
    }

    /// Restores weights, optimizer and position from a checkpoint written by
    /// [`Trainer::save`]. The stored config must equal `config`.
    pub fn resume(config: ModelConfig, path: &Path) -> Result<Self> {
        let (weights, stored, extras) = load_with_extras(path)?;
        let diff = stored.diff(&config);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff.join("\n")));
        }
        let optim = AdamW::from_stored(&weights, &extras)?;
        let iteration = optim.step;
        Ok(Trainer { config, weights, optim, iteration })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_with_extras(&self.weights, &self.config, &self.optim.to_stored(&self.weights), path)
    }

    /// The micro-batches of the next iteration.
    pub fn next_batches(&self, stream: &[u32]) -> Result<Vec<TrainBatch>> {
        let c = &self.config;
        let k = c.grad_accum_steps as u64;
        (0..k)
            .map(|j| batch_for_iteration(stream, c.batch_size, c.seq_len, c.seed, self.iteration * k + j))
            .collect()
    }

    /// Forward, joint loss, backward, clip and update over `batches`
    /// (gradient accumulation when there is more than one).
    pub fn train_step(&mut self, batches: &[TrainBatch]) -> Result<TrainMetrics> {
        let cfg = self.config.clone();
        let k = batches.len();
        if k == 0 {
            return Err(Error::Usage("train_step needs at least one batch".into()));
        }
        self.weights.zero_grad();
        let (mut lm, mut surrogate, mut value_loss) = (0.0f64, 0.0f64, 0.0f64);
        let mut steps = Vec::new();
        let mut explored = 0usize;
        let mut tokens = 0u64;
        for (j, batch) in batches.iter().enumerate() {
            let seed = mix_seed(cfg.seed ^ FORWARD_STREAM, self.iteration * k as u64 + j as u64);
            let out = model_forward(&batch.inputs, batch.batch, &self.weights, &cfg, &RunMode::Training { seed })?;
            let parts = joint_loss(&out.logits, &batch.targets, &out.hrm, cfg.lambda_step)?;
            let obj = parts.objective.item();
            if !parts.lm_loss.is_finite() || !obj.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at iteration {} (batch seed {seed:#018x}, window starts {:?})",
                    parts.lm_loss,
                    self.iteration + 1,
                    batch.starts
                )));
            }
            let mut objective = parts.objective;
            if cfg.halt_signal == "advantage" {
                let losses = no_grad(|| -> Result<Vec<Vec<f64>>> {
                    out.hrm
                        .states
                        .iter()
                        .map(|(z, _)| Ok(per_sample_loss(&decode_state(z, &self.weights, &cfg)?, &batch.targets, batch.batch)))
                        .collect()
                })?;
                if let Some((value, _)) = halt_value_loss(&out.hrm, &losses, cfg.lambda_step)? {
                    value_loss += value.item() as f64 / k as f64;
                    objective = ops::add(&objective, &ops::scale(&value, cfg.halt_value_weight))?;
                }
            }
            let scaled = if k > 1 { ops::scale(&objective, 1.0 / k as f32) } else { objective };
            scaled.backward()?;
            lm += parts.lm_loss / k as f64;
            surrogate += parts.surrogate / k as f64;
            steps.extend(out.hrm.trace.steps_used().into_iter().map(|u| u as f64));
            explored += out.hrm.trace.samples.iter().filter(|s| s.steps[0].exploring).count();
            tokens += batch.inputs.len() as u64;
        }
        let grad_norm = clip_grad_norm(&self.weights.parameters(), cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at iteration {}", self.iteration + 1)));
        }
        let lr = learning_rate(&cfg, self.iteration as usize);
        self.optim.update(&self.weights, lr, &cfg);
        self.iteration += 1;

        let (mean_steps, steps_std) = mean_std(&steps);
        let penalty = cfg.lambda_step as f64 * mean_steps;
        Ok(TrainMetrics {
            iteration: self.iteration,
            lm_loss: lm,
            step_penalty: penalty,
            total_loss: lm + penalty,
            mean_steps,
            steps_std,
            learning_rate: lr as f64,
            tokens_seen: self.iteration * tokens,
            grad_norm,
            surrogate_penalty: surrogate,
            halt_value_loss: value_loss,
            explore_fraction: explored as f64 / steps.len() as f64,
            val_loss: None,
            val_mean_steps: None,
        })
    }

    /// Held-out loss and mean steps with dropout and exploration off and the
    /// unbiased halting rule. `None` when the split is too short.
    pub fn evaluate(&self, val: &[u32]) -> Result<Option<(f64, f64)>> {
        let c = &self.config;
        let (mut loss, mut steps, mut n) = (0.0, 0.0, 0usize);
        for i in 0..c.eval_batches as u64 {
            let batch = match batch_for_iteration(val, c.batch_size, c.seq_len, c.seed ^ EVAL_STREAM, i) {
                Ok(b) => b,
                Err(Error::Data(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let out = no_grad(|| model_forward(&batch.inputs, batch.batch, &self.weights, c, &RunMode::Inference { delta: 0.0 }))?;
            let parts = no_grad(|| joint_loss(&out.logits, &batch.targets, &out.hrm, 0.0))?;
            loss += parts.lm_loss;
            steps += parts.mean_steps;
            n += 1;
        }
        Ok((n > 0).then(|| (loss / n as f64, steps / n as f64)))
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub history: Vec<TrainMetrics>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration:06}.ckpt")
}

/// Trains on `stream` until `config.iterations`, writing `metrics.jsonl`,
/// periodic checkpoints, `final.ckpt` and `tokenizer.json` into `out_dir`.
pub fn train_loop(
    config: &ModelConfig,
    stream: &[u32],
    tokenizer: &Tokenizer,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_metrics: impl FnMut(&TrainMetrics),
) -> Result<TrainSummary> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Data("the corpus is empty; nothing to train on".into()));
    }
    if tokenizer.vocab_size() > config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer needs {} ids but vocab_size is {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let (train, val) = split_holdout(stream, config.val_fraction);
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.clone(), p)?,
        None => Trainer::new(config.clone())?,
    };
    trainer.next_batches(train)?;

    fs::create_dir_all(out_dir)?;
    tokenizer.save(&out_dir.join("tokenizer.json"))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)?;

    let mut history = Vec::new();
    while (trainer.iteration as usize) < config.iterations {
        let batches = trainer.next_batches(train)?;
        let mut m = trainer.train_step(&batches)?;
        let it = trainer.iteration as usize;
        if config.eval_interval > 0 && (it % config.eval_interval == 0 || it == config.iterations) {
            if let Some((loss, steps)) = trainer.evaluate(val)? {
                m.val_loss = Some(loss);
                m.val_mean_steps = Some(steps);
            }
        }
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 {
            trainer.save(&out_dir.join(checkpoint_name(it as u64)))?;
        }
        on_metrics(&m);
        history.push(m);
    }
    let final_checkpoint = out_dir.join("final.ckpt");
    trainer.save(&final_checkpoint)?;
    Ok(TrainSummary { final_checkpoint, metrics_path, history })
}
