//! The causal character transformer and its configuration.

mod transformer;

use crate::error::{Error, Result};

pub use transformer::{ForwardOutput, HeadLogits, HeadRequest, Positions, TransformerLM};

/// How position information enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalMode {
    /// A learned `L × d` table added to the input of every layer, unshared.
    PerLayerLearned,
    /// Fixed sinusoidal timing signal added once, before the first layer.
    SinusoidalInputOnly,
}

impl PositionalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionalMode::PerLayerLearned => "per_layer_learned",
            PositionalMode::SinusoidalInputOnly => "sinusoidal_input_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_layer_learned" => Ok(PositionalMode::PerLayerLearned),
            "sinusoidal_input_only" => Ok(PositionalMode::SinusoidalInputOnly),
            _ => Err(Error::Config(format!("unknown positional mode `{s}`"))),
        }
    }
}

/// Where layer norm sits relative to each residual sub-layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// `norm(x + sublayer(x))`
    Post,
    /// `x + sublayer(norm(x))`
    Pre,
}

impl NormPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            NormPlacement::Post => "post",
            NormPlacement::Pre => "pre",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(NormPlacement::Post),
            "pre" => Ok(NormPlacement::Pre),
            _ => Err(Error::Config(format!("unknown norm placement `{s}`"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// Dropout fields are drop probabilities; the keep probability handed to
/// the dropout op is their complement.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub n_targets: usize,
    pub dropout_attn: f64,
    pub dropout_relu: f64,
    pub positional: PositionalMode,
    pub norm: NormPlacement,
    /// `None` picks the placement default: on for pre-norm, off for post-norm.
    pub final_norm: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::t64()
    }
}

impl ModelConfig {
    /// 64 layers, 512 wide, two heads, 2048 filter, 512 context.
    pub fn t64() -> Self {
        ModelConfig {
            n_layers: 64,
            d_model: 512,
            n_heads: 2,
            d_ff: 2048,
            seq_len: 512,
            vocab: 256,
            n_targets: 2,
            dropout_attn: 0.55,
            dropout_relu: 0.55,
            positional: PositionalMode::PerLayerLearned,
            norm: NormPlacement::Post,
            final_norm: None,
        }
    }

    /// The 12-layer variant with reduced dropout.
    pub fn t12() -> Self {
        ModelConfig {
            n_layers: 12,
            dropout_attn: 0.2,
            dropout_relu: 0.2,
            ..Self::t64()
        }
    }

    /// Two layers at width 128 over a 64-character window; trains on one core.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 128,
            n_heads: 2,
            d_ff: 512,
            seq_len: 64,
            dropout_attn: 0.0,
            dropout_relu: 0.0,
            ..Self::t64()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len must be at least 1".into());
        }
        if self.vocab < 2 {
            return bad(format!("vocab {} must be at least 2", self.vocab));
        }
        if self.n_targets == 0 {
            return bad("n_targets must be at least 1".into());
        }
        for (name, p) in [("dropout_attn", self.dropout_attn), ("dropout_relu", self.dropout_relu)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn final_norm_enabled(&self) -> bool {
        self.final_norm.unwrap_or(self.norm == NormPlacement::Pre)
    }

    pub fn keep_attn(&self) -> f64 {
        1.0 - self.dropout_attn
    }

    pub fn keep_relu(&self) -> f64 {
        1.0 - self.dropout_relu
    }

    /// Parameter totals implied by the configuration.
    pub fn param_counts(&self) -> ParamCounts {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ff = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let norms = 2 * 2 * d;
        let positional = match self.positional {
            PositionalMode::PerLayerLearned => self.n_layers * self.seq_len * d,
            PositionalMode::SinusoidalInputOnly => 0,
        };
        let head = d * self.vocab + self.vocab;
        let n_heads = self.n_layers * self.n_targets;
        let final_norm = if self.final_norm_enabled() { 2 * d } else { 0 };
        let train = self.vocab * d
            + self.n_layers * (attn + ff + norms)
            + positional
            + final_norm
            + n_heads * head;
        ParamCounts {
            train,
            inference: train - (n_heads - 1) * head,
            positional,
            per_head: head,
        }
    }
}

/// Train/inference parameter split. Only the final-layer, next-character
/// classifier survives to inference; every other head is training-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub train: usize,
    pub inference: usize,
    pub positional: usize,
    pub per_head: usize,
}

/// Anything that assigns next-symbol distributions to contexts.
///
/// Evaluation and analysis are written against this trait so harness tests
/// can plug in uniform, oracle or toy models.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Longest context the model conditions on.
    fn max_context(&self) -> usize;

    /// Natural-log next-symbol probabilities for the last `tail` positions
    /// of each window, window-major. Row `w * tail + j` predicts the symbol
    /// following position `len_w - tail + j` of window `w`.
    fn tail_log_probs(&self, windows: &[&[u32]], tail: usize) -> Result<Vec<Vec<f64>>>;
}

/// Next-symbol distribution after `context`, conditioning on at most the
/// model's context length of trailing symbols.
pub fn predict_next<M: LanguageModel + ?Sized>(model: &M, context: &[u32]) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::Contract("predict_next needs a non-empty context".into()));
    }
    let start = context.len().saturating_sub(model.max_context());
    let rows = model.tail_log_probs(&[&context[start..]], 1)?;
    Ok(rows[0].iter().map(|lp| lp.exp()).collect())
}

/// Log-softmax of `logits` in 64-bit precision.
pub(crate) fn log_softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.clone().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.map(|v| v - lse).collect()
}
