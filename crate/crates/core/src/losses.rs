//! Training loss composition.
//!
//! The total loss averages cross-entropy (in bits) over every contributing
//! `(layer, position, offset)` term:
//!
//! * all positions of a window predict, not just the last one
//!   (`multiple_positions`), with no decay;
//! * every layer has its own classifiers, and layer `l` of `N` stops
//!   contributing at step `floor(l / 2N · T)`; the final layer never stops
//!   (`intermediate_layers`);
//! * each position predicts `n_targets` characters ahead, offsets beyond the
//!   first weighted by `extra_target_weight`.
//!
//! Layers here are numbered `1..=N` as in the schedule; the model's head
//! indices are zero-based.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, HeadRequest, ModelConfig, Positions};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub multiple_positions: bool,
    pub intermediate_layers: bool,
    pub n_targets: usize,
    pub extra_target_weight: f64,
    pub total_steps: u64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_targets == 0 {
            return Err(Error::Config("n_targets must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.extra_target_weight) {
            return Err(Error::Config(format!(
                "extra_target_weight {} outside [0, 1]",
                self.extra_target_weight
            )));
        }
        Ok(())
    }

    /// `w(1) = 1`, `w(k > 1) = extra_target_weight`.
    pub fn target_weight(&self, offset: usize) -> f64 {
        if offset <= 1 {
            1.0
        } else {
            self.extra_target_weight
        }
    }

    /// Only the final layer's next-character loss at the last position.
    pub fn baseline(total_steps: u64) -> Self {
        LossConfig {
            multiple_positions: false,
            intermediate_layers: false,
            n_targets: 1,
            extra_target_weight: 0.5,
            total_steps,
        }
    }
}

/// Step at which layer `layer` (1-based) of `n_layers` stops contributing:
/// `floor(layer / (2 · n_layers) · total_steps)`.
///
/// The final layer is exempt from the drop even though the formula gives
/// it `total_steps / 2`; see [`LossSchedule::is_active`].
pub fn layer_drop_step(layer: usize, n_layers: usize, total_steps: u64) -> Result<u64> {
    if layer == 0 || layer > n_layers {
        return Err(Error::Contract(format!(
            "layer {layer} outside 1..={n_layers}"
        )));
    }
    if total_steps == 0 {
        return Err(Error::Contract("total_steps must be at least 1".into()));
    }
    Ok((layer as u128 * total_steps as u128 / (2 * n_layers as u128)) as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSchedule {
    n_layers: usize,
    drop_steps: Vec<u64>,
    intermediate_layers: bool,
}

impl LossSchedule {
    pub fn new(n_layers: usize, total_steps: u64, intermediate_layers: bool) -> Result<Self> {
        let drop_steps = (1..=n_layers)
            .map(|l| layer_drop_step(l, n_layers, total_steps.max(1)))
            .collect::<Result<_>>()?;
        Ok(LossSchedule {
            n_layers,
            drop_steps,
            intermediate_layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn drop_step(&self, layer: usize) -> Option<u64> {
        self.drop_steps.get(layer.checked_sub(1)?).copied()
    }

    /// Layer `l < N` contributes while `step < drop(l)`; layer `N` always.
    pub fn is_active(&self, layer: usize, step: u64) -> bool {
        if layer == self.n_layers {
            return true;
        }
        self.intermediate_layers
            && self.drop_step(layer).is_some_and(|drop| step < drop)
    }

    /// Contributing layers at `step`, ascending, 1-based.
    pub fn active_layers(&self, step: u64) -> Vec<usize> {
        (1..=self.n_layers)
            .filter(|&l| self.is_active(l, step))
            .collect()
    }

    /// Heads a training forward pass must materialise at `step`.
    pub fn head_request(&self, step: u64, cfg: &LossConfig) -> HeadRequest {
        HeadRequest {
            layers: self.active_layers(step).iter().map(|l| l - 1).collect(),
            offsets: (1..=cfg.n_targets).collect(),
            positions: if cfg.multiple_positions {
                Positions::All
            } else {
                Positions::Tail(1)
            },
        }
    }

    pub fn for_model(model: &ModelConfig, cfg: &LossConfig) -> Result<Self> {
        Self::new(model.n_layers, cfg.total_steps, cfg.intermediate_layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossComponent {
    /// 1-based layer number.
    pub layer: usize,
    pub offset: usize,
    /// Mean bits over this component's terms.
    pub bits: f64,
    /// Share of the total: `w(offset) · terms / total_terms`.
    pub weight: f64,
    pub terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub active_layers: Vec<usize>,
    pub components: Vec<LossComponent>,
}

impl LossReport {
    /// `Σ weight · bits`, which must reproduce `total`.
    pub fn recombined(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.bits).sum()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serialises")
    }
}

/// Builds the scalar training loss on `g` from a forward pass over
/// `windows[..][..out.seq_len]`; `windows` must extend far enough to supply
/// `t_{i+k}` for every position `i` and offset `k`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    windows: &[&[u32]],
    step: u64,
    cfg: &LossConfig,
    schedule: &LossSchedule,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    if windows.len() != out.batch {
        return Err(Error::Contract(format!(
            "{} target windows for a batch of {}",
            windows.len(),
            out.batch
        )));
    }
    let len = out.seq_len;
    if let Some(w) = windows.iter().find(|w| w.len() < len + cfg.n_targets) {
        return Err(Error::Contract(format!(
            "window of {} tokens cannot supply {} target offsets after {len} inputs",
            w.len(),
            cfg.n_targets
        )));
    }
    let last = len - 1;
    if !out.positions.contains(&last) {
        return Err(Error::Contract("forward output lacks the final position".into()));
    }
    if cfg.multiple_positions && out.positions.len() != len {
        return Err(Error::Contract(
            "multiple-position loss needs logits at every position".into(),
        ));
    }
    let included: Vec<bool> = out
        .positions
        .iter()
        .map(|&p| cfg.multiple_positions || p == last)
        .collect();
    let per_window = included.iter().filter(|&&b| b).count();
    let active = schedule.active_layers(step);

    let mut parts = Vec::new();
    for &layer in &active {
        for offset in 1..=cfg.n_targets {
            let logits = out.logits(layer - 1, offset).ok_or_else(|| {
                Error::Contract(format!(
                    "missing logits for layer {layer}, offset {offset}"
                ))
            })?;
            parts.push((layer, offset, logits));
        }
    }
    let count: usize = parts
        .iter()
        .filter(|(_, k, _)| cfg.target_weight(*k) > 0.0)
        .count()
        * per_window
        * out.batch;
    if count == 0 {
        return Err(Error::Contract("no loss terms contribute".into()));
    }

    let mut total: Option<Var> = None;
    let mut components = Vec::with_capacity(parts.len());
    for (layer, offset, logits) in parts {
        let targets: Vec<u32> = windows
            .iter()
            .flat_map(|w| out.positions.iter().map(move |&p| w[p + offset]))
            .collect();
        let ce = g.cross_entropy_bits(logits, &targets)?;
        let w = cfg.target_weight(offset);
        let mask = included.iter().cycle().take(targets.len());
        let row_w: Vec<T> = mask
            .clone()
            .map(|&inc| if inc { T::from_f64(w / count as f64) } else { T::zero() })
            .collect();
        let bits: f64 = g
            .value(ce)
            .iter()
            .zip(mask)
            .filter(|(_, &inc)| inc)
            .map(|(v, _)| v.as_f64())
            .sum::<f64>();
        let terms = per_window * out.batch;
        let part = g.weighted_sum(ce, &row_w)?;
        total = Some(match total {
            Some(t) => g.add(t, part)?,
            None => part,
        });
        components.push(LossComponent {
            layer,
            offset,
            bits: bits / terms as f64,
            weight: if w > 0.0 { w * terms as f64 / count as f64 } else { 0.0 },
            terms,
        });
    }
    let total = total.expect("at least the final layer is active");
    let report = LossReport {
        step,
        total: g.value(total)[0].as_f64(),
        active_layers: active,
        components,
    };
    Ok((total, report))
}
