//! Run configuration as `key = value` text.
//!
//! Every field has a default; a file only needs the keys it changes.
//! Unknown and repeated keys are errors. [`RunConfig::to_text`] writes all
//! keys in a fixed order, and parsing that text gives back the same value.

use std::fmt;
use std::str::FromStr;

use crate::data::{CorpusFormat, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, NormPlacement, PositionalMode};
use crate::optim::OptimizerKind;
use crate::trainer::TrainConfig;

const T64: &str = include_str!("../configs/t64.conf");
const T12: &str = include_str!("../configs/t12.conf");
const DESK: &str = include_str!("../configs/desk.conf");

pub const PRESETS: [&str; 3] = ["t64", "t12", "desk"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub multiple_positions: bool,
    pub intermediate_layers: bool,
    pub extra_target_weight: f64,
    pub train: TrainConfig,
    pub format: CorpusFormat,
    pub split_fractions: SplitFractions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::t64(),
            multiple_positions: true,
            intermediate_layers: true,
            extra_target_weight: 0.5,
            train: TrainConfig::default(),
            format: CorpusFormat::Text8,
            split_fractions: SplitFractions::default(),
        }
    }
}

/// Single-mechanism variants of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    NoMultiplePositions,
    NoIntermediateLayers,
    NoPositionalEmbeddings,
    NoMultipleTargets,
    /// Plain SGD at learning rate 0.1 instead of momentum.
    Sgd,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoMultiplePositions,
        Ablation::NoIntermediateLayers,
        Ablation::NoPositionalEmbeddings,
        Ablation::NoMultipleTargets,
        Ablation::Sgd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoMultiplePositions => "no_multiple_positions",
            Ablation::NoIntermediateLayers => "no_intermediate_layers",
            Ablation::NoPositionalEmbeddings => "no_positional_embeddings",
            Ablation::NoMultipleTargets => "no_multiple_targets",
            Ablation::Sgd => "sgd",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("expected true or false, got `{v}`"))),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad number `{v}`")))
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(v).map(Some)
    }
}

fn show_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "t64" => Self::parse(T64),
            "t12" => Self::parse(T12),
            "desk" => Self::parse(DESK),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}`, expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            multiple_positions: self.multiple_positions,
            intermediate_layers: self.intermediate_layers,
            n_targets: self.model.n_targets,
            extra_target_weight: self.extra_target_weight,
            total_steps: self.train.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss().validate()?;
        self.train.validate()?;
        self.split_fractions.validate()
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::None => {}
            Ablation::NoMultiplePositions => self.multiple_positions = false,
            Ablation::NoIntermediateLayers => self.intermediate_layers = false,
            Ablation::NoPositionalEmbeddings => self.model.positional = PositionalMode::SinusoidalInputOnly,
            Ablation::NoMultipleTargets => self.model.n_targets = 1,
            Ablation::Sgd => {
                self.train.optimizer = OptimizerKind::Sgd;
                self.train.lr = 0.1;
            }
        }
        self
    }

    fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let final_norm = match m.final_norm {
            None => "auto",
            Some(true) => "on",
            Some(false) => "off",
        };
        vec![
            ("model", "n_layers", m.n_layers.to_string()),
            ("model", "d_model", m.d_model.to_string()),
            ("model", "n_heads", m.n_heads.to_string()),
            ("model", "d_ff", m.d_ff.to_string()),
            ("model", "seq_len", m.seq_len.to_string()),
            ("model", "vocab", m.vocab.to_string()),
            ("model", "n_targets", m.n_targets.to_string()),
            ("model", "dropout_attn", m.dropout_attn.to_string()),
            ("model", "dropout_relu", m.dropout_relu.to_string()),
            ("model", "positional", m.positional.as_str().into()),
            ("model", "norm", m.norm.as_str().into()),
            ("model", "final_norm", final_norm.into()),
            ("loss", "multiple_positions", self.multiple_positions.to_string()),
            ("loss", "intermediate_layers", self.intermediate_layers.to_string()),
            ("loss", "extra_target_weight", self.extra_target_weight.to_string()),
            ("train", "optimizer", t.optimizer.as_str().into()),
            ("train", "lr", t.lr.to_string()),
            ("train", "momentum", t.momentum.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "total_steps", t.total_steps.to_string()),
            ("train", "eval_interval", t.eval_interval.to_string()),
            ("train", "checkpoint_interval", show_opt(&t.checkpoint_interval)),
            ("train", "grad_clip", show_opt(&t.grad_clip)),
            ("train", "seed", t.seed.to_string()),
            ("train", "target_bpc", show_opt(&t.target_bpc)),
            ("eval", "eval_context", t.eval.context.to_string()),
            ("eval", "eval_stride", t.eval.stride.to_string()),
            ("eval", "eval_split", t.eval.split.to_string()),
            ("eval", "eval_max_chars", show_opt(&t.eval.max_chars)),
            ("data", "format", self.format.as_str().into()),
            ("data", "split_fractions", self.split_fractions.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(_, k, _)| k).collect()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "n_layers" => m.n_layers = parse_num(v)?,
            "d_model" => m.d_model = parse_num(v)?,
            "n_heads" => m.n_heads = parse_num(v)?,
            "d_ff" => m.d_ff = parse_num(v)?,
            "seq_len" => m.seq_len = parse_num(v)?,
            "vocab" => m.vocab = parse_num(v)?,
            "n_targets" => m.n_targets = parse_num(v)?,
            "dropout_attn" => m.dropout_attn = parse_num(v)?,
            "dropout_relu" => m.dropout_relu = parse_num(v)?,
            "positional" => m.positional = PositionalMode::parse(v)?,
            "norm" => m.norm = NormPlacement::parse(v)?,
            "final_norm" => {
                m.final_norm = match v {
                    "auto" => None,
                    "on" => Some(true),
                    "off" => Some(false),
                    _ => return Err(Error::Config(format!("final_norm must be auto, on or off, got `{v}`"))),
                }
            }
            "multiple_positions" => self.multiple_positions = parse_bool(v)?,
            "intermediate_layers" => self.intermediate_layers = parse_bool(v)?,
            "extra_target_weight" => self.extra_target_weight = parse_num(v)?,
            "optimizer" => t.optimizer = v.parse()?,
            "lr" => t.lr = parse_num(v)?,
            "momentum" => t.momentum = parse_num(v)?,
            "batch_size" => t.batch_size = parse_num(v)?,
            "total_steps" => t.total_steps = parse_num(v)?,
            "eval_interval" => t.eval_interval = parse_num(v)?,
            "checkpoint_interval" => t.checkpoint_interval = parse_opt(v)?,
            "grad_clip" => t.grad_clip = parse_opt(v)?,
            "seed" => t.seed = parse_num(v)?,
            "target_bpc" => t.target_bpc = parse_opt(v)?,
            "eval_context" => t.eval.context = parse_num(v)?,
            "eval_stride" => t.eval.stride = parse_num(v)?,
            "eval_split" => t.eval.split = v.parse::<Split>()?,
            "eval_max_chars" => t.eval.max_chars = parse_opt(v)?,
            "format" => self.format = v.parse()?,
            "split_fractions" => self.split_fractions = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `key = value`, got `{body}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            self.set(key, value).map_err(|e| Error::Parse {
                line,
                msg: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg = RunConfig::default().apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (s, k, v) in self.entries() {
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {s}\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
