use serde::{Deserialize, Serialize};

use crate::blocks::AttentionShape;
use crate::error::{Error, Result};

/// Architecture hyperparameters plus the training knobs. Serialized as a
/// flat JSON object; missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_input_layers: usize,
    pub n_output_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub n_high_layers: usize,
    pub n_low_layers: usize,
    pub c_high: usize,
    pub c_low: usize,
    pub s_max: usize,
    pub p_explore: f32,
    pub halt_bias_delta: f32,
    pub dropout: f32,
    pub lambda_step: f32,
    pub rope_theta: f32,
    pub rms_eps: f32,
    pub seed: u64,
    /// How the halting head learns: `"surrogate"` (step penalty only) or
    /// `"advantage"` (step penalty plus a value target from per-step LM loss).
    pub halt_signal: String,
    pub halt_value_weight: f32,

    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub warmup_fraction: f32,
    pub min_lr_fraction: f32,
    pub grad_clip: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub grad_accum_steps: usize,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub checkpoint_interval: usize,
    pub val_fraction: f32,
    /// `"byte"` or `"char"`.
    pub tokenizer: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 448,
            vocab_size: 50304,
            max_seq_len: 512,
            n_input_layers: 6,
            n_output_layers: 6,
            n_heads: 8,
            n_kv_heads: 4,
            n_high_layers: 4,
            n_low_layers: 4,
            c_high: 2,
            c_low: 2,
            s_max: 16,
            p_explore: 0.1,
            halt_bias_delta: 0.35,
            dropout: 0.1,
            lambda_step: 0.01,
            rope_theta: 10000.0,
            rms_eps: 1e-6,
            seed: 0,
            halt_signal: "surrogate".into(),
            halt_value_weight: 1.0,

            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            warmup_fraction: 0.02,
            min_lr_fraction: 0.1,
            grad_clip: 1.0,
            iterations: 27_500,
            batch_size: 128,
            seq_len: 512,
            grad_accum_steps: 1,
            eval_interval: 250,
            eval_batches: 8,
            checkpoint_interval: 1000,
            val_fraction: 0.02,
            tokenizer: "byte".into(),
        }
    }
}

impl ModelConfig {
    /// The full-size architecture.
    pub fn table1() -> Self {
        Self::default()
    }

    /// A desk-scale variant: d = 64, two input and two output blocks, two low
    /// and two high reasoning blocks capped at four steps, byte vocabulary.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            vocab_size: 259,
            max_seq_len: 128,
            n_input_layers: 2,
            n_output_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            n_high_layers: 2,
            n_low_layers: 2,
            s_max: 4,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            iterations: 300,
            batch_size: 8,
            seq_len: 64,
            eval_interval: 50,
            eval_batches: 2,
            checkpoint_interval: 100,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn attention_shape(&self) -> Result<AttentionShape> {
        AttentionShape::new(self.d_model, self.n_heads, self.n_kv_heads)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks every structural constraint, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let counts = [
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_input_layers", self.n_input_layers),
            ("n_output_layers", self.n_output_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("n_high_layers", self.n_high_layers),
            ("n_low_layers", self.n_low_layers),
            ("c_high", self.c_high),
            ("c_low", self.c_low),
            ("s_max", self.s_max),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("grad_accum_steps", self.grad_accum_steps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        for (name, p) in [("p_explore", self.p_explore), ("val_fraction", self.val_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.rms_eps > 0.0) {
            return fail(format!("rms_eps must be > 0, got {}", self.rms_eps));
        }
        if !(self.rope_theta > 0.0) {
            return fail(format!("rope_theta must be > 0, got {}", self.rope_theta));
        }
        if self.lambda_step < 0.0 || !self.halt_bias_delta.is_finite() {
            return fail("lambda_step must be >= 0 and halt_bias_delta finite".into());
        }
        if self.seq_len > self.max_seq_len {
            return fail(format!(
                "seq_len ({}) exceeds max_seq_len ({})",
                self.seq_len, self.max_seq_len
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("learning_rate must be > 0 and betas in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return fail("warmup_fraction and min_lr_fraction must lie in [0, 1]".into());
        }
        if !matches!(self.halt_signal.as_str(), "surrogate" | "advantage") {
            return fail(format!("halt_signal must be \"surrogate\" or \"advantage\", got {:?}", self.halt_signal));
        }
        if !(self.halt_value_weight >= 0.0) {
            return fail("halt_value_weight must be >= 0".into());
        }
        if !matches!(self.tokenizer.as_str(), "byte" | "char") {
            return fail(format!("tokenizer must be \"byte\" or \"char\", got {:?}", self.tokenizer));
        }
        Ok(())
    }

    /// Field-by-field differences, one `name: ours -> theirs` line each.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} -> {}", b.get(k).cloned().unwrap_or_default()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::table1().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::table1().head_dim(), 56);
    }

    #[test]
    fn divisibility_guard_names_the_constraint() {
        let cfg = ModelConfig { n_heads: 5, ..ModelConfig::table1() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible by n_heads"), "{msg}");
        let cfg = ModelConfig { n_heads: 7, n_kv_heads: 7, ..ModelConfig::table1() };
        cfg.validate().unwrap();
        let cfg = ModelConfig { n_kv_heads: 3, ..ModelConfig::table1() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_fills_defaults_and_rejects_unknown_fields() {
        let cfg = ModelConfig::from_json(r#"{"d_model": 64, "n_heads": 4, "n_kv_heads": 2, "seq_len": 32}"#).unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.vocab_size, 50304);
        assert!(ModelConfig::from_json(r#"{"d_modle": 64}"#).is_err());
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn diff_lists_changed_fields() {
        let a = ModelConfig::desk();
        let b = ModelConfig { seed: 9, lambda_step: 0.0, ..a.clone() };
        let d = a.diff(&b);
        assert_eq!(d.len(), 2);
        assert!(d.iter().any(|l| l.starts_with("seed")));
        assert!(a.diff(&a).is_empty());
    }
}
