//! The training loop.
//!
//! Each step samples a batch of random training windows, runs a training
//! forward pass over the heads the schedule still needs, backpropagates the
//! combined loss and applies one optimizer update. Dev bits per character
//! are measured every `eval_interval` steps and the best parameters are
//! kept.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{sample_batch, Corpus, Split};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig, EvalResult};
use crate::losses::{total_loss, LossReport, LossSchedule};
use crate::model::TransformerLM;
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Graph, Tensor};

/// Consecutive non-finite losses tolerated before giving up.
pub const MAX_BAD_STEPS: u32 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// `0` disables periodic evaluation.
    pub eval_interval: u64,
    pub checkpoint_interval: Option<u64>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Stop once dev bpc falls below this value.
    pub target_bpc: Option<f64>,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Momentum,
            lr: 0.003,
            momentum: 0.99,
            batch_size: 16,
            total_steps: 4_000_000,
            eval_interval: 10_000,
            checkpoint_interval: None,
            grad_clip: None,
            seed: 0,
            target_bpc: None,
            eval: EvalConfig::new(512, Split::Dev),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        self.eval.validate()
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub model: TransformerLM<f32>,
    pub optimizer: Optimizer<f32>,
    pub best_bpc: Option<f64>,
    pub best_step: Option<u64>,
    /// Drives batch sampling and dropout.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Initial parameters and optimizer state for `run`.
    pub fn fresh(run: &RunConfig) -> Result<Self> {
        let model = TransformerLM::init(run.model.clone(), run.train.seed)?;
        let t = &run.train;
        let optimizer = Optimizer::new(t.optimizer, t.lr, t.momentum, t.grad_clip, model.params())?;
        Ok(TrainState {
            step: 0,
            model,
            optimizer,
            best_bpc: None,
            best_step: None,
            // separate stream from the init rng
            rng: ChaCha8Rng::seed_from_u64(t.seed ^ 0x5eed_da7a),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters at the best dev evaluation, if any.
    pub best_params: Option<Vec<Tensor<f32>>>,
    pub evals: Vec<(u64, EvalResult)>,
    /// Whether `target_bpc` was reached.
    pub reached_target: bool,
}

pub struct Trainer<'a> {
    run: RunConfig,
    corpus: &'a Corpus,
    schedule: LossSchedule,
    out_dir: Option<PathBuf>,
    metrics: Box<dyn Write + 'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(run: RunConfig, corpus: &'a Corpus) -> Result<Self> {
        run.validate()?;
        let schedule = LossSchedule::for_model(&run.model, &run.loss())?;
        Ok(Trainer {
            run,
            corpus,
            schedule,
            out_dir: None,
            metrics: Box::new(std::io::sink()),
        })
    }

    /// Directory for `step_<n>.ckpt`, `best.ckpt` and `last_good.ckpt`.
    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Destination for JSON-lines metrics.
    pub fn with_metrics(mut self, sink: impl Write + 'a) -> Self {
        self.metrics = Box::new(sink);
        self
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn schedule(&self) -> &LossSchedule {
        &self.schedule
    }

    /// One optimizer step. A non-finite loss leaves the parameters
    /// untouched and is reported as `Ok(None)`.
    pub fn step(&self, state: &mut TrainState) -> Result<Option<LossReport>> {
        let m = &self.run.model;
        let loss_cfg = self.run.loss();
        let batch = sample_batch(
            self.corpus,
            Split::Train,
            self.run.train.batch_size,
            m.seq_len,
            m.n_targets,
            &mut state.rng,
        )?;
        let request = self.schedule.head_request(state.step, &loss_cfg);
        let mut g = Graph::new();
        let forward = state
            .model
            .forward(&mut g, &batch.inputs(m.seq_len), Some(&mut state.rng), &request)
            .and_then(|out| {
                let (loss, report) =
                    total_loss(&mut g, &out, &batch.window_refs(), state.step, &loss_cfg, &self.schedule)?;
                Ok((out, loss, report))
            });
        let (out, loss, report) = match forward {
            // overflowing activations surface as an all -inf softmax row
            Err(Error::Degenerate) => return Ok(None),
            other => other?,
        };
        if !report.total.is_finite() {
            return Ok(None);
        }
        g.backward(loss)?;
        state.model.zero_grad();
        state.model.accumulate_grads(&g, &out)?;
        let names = state.model.param_names().to_vec();
        state.optimizer.step(state.model.params_mut(), &names)?;
        state.model.zero_grad();
        state.step += 1;
        Ok(Some(report))
    }

    pub fn evaluate(&self, model: &TransformerLM<f32>) -> Result<EvalResult> {
        evaluate(model, self.corpus, &self.run.train.eval)
    }

    fn emit(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.metrics, "{value}")?;
        Ok(())
    }

    fn save(&self, state: &TrainState, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            checkpoint::save(&dir.join(name), &self.run, state)?;
        }
        Ok(())
    }

    /// Trains until `total_steps`, or until dev bpc falls below
    /// `target_bpc`.
    pub fn run(&mut self, state: TrainState) -> Result<TrainOutcome> {
        self.run_until(state, self.run.train.total_steps)
    }

    /// Like [`Trainer::run`] but stops after step `stop`, leaving the
    /// schedule as the full run would have it.
    pub fn run_until(&mut self, mut state: TrainState, stop: u64) -> Result<TrainOutcome> {
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let t = self.run.train.clone();
        let mut bad = 0u32;
        let mut best_params = None;
        let mut evals = Vec::new();
        let mut reached_target = false;
        while state.step < stop.min(t.total_steps) {
            let step = state.step;
            let Some(report) = self.step(&mut state)? else {
                bad += 1;
                self.emit(json!({"event": "nonfinite_loss", "step": step, "consecutive": bad}))?;
                if bad >= MAX_BAD_STEPS {
                    self.save(&state, "last_good.ckpt")?;
                    return Err(Error::Diverged {
                        step,
                        consecutive: bad,
                    });
                }
                continue;
            };
            bad = 0;
            self.emit(json!({
                "event": "step",
                "step": report.step,
                "loss": report.total,
                "active_layers": report.active_layers,
                "components": report.components,
            }))?;
            if t.eval_interval > 0 && state.step.is_multiple_of(t.eval_interval) {
                let r = self.evaluate(&state.model)?;
                self.emit(json!({
                    "event": "eval",
                    "step": state.step,
                    "split": t.eval.split.to_string(),
                    "bpc": r.bpc,
                    "accuracy": r.accuracy,
                    "chars": r.chars,
                    "context": r.context,
                    "stride": r.stride,
                }))?;
                if state.best_bpc.is_none_or(|b| r.bpc < b) {
                    state.best_bpc = Some(r.bpc);
                    state.best_step = Some(state.step);
                    best_params = Some(state.model.params().to_vec());
                    self.save(&state, "best.ckpt")?;
                }
                evals.push((state.step, r.clone()));
                if t.target_bpc.is_some_and(|target| r.bpc < target) {
                    reached_target = true;
                }
            }
            if t.checkpoint_interval.is_some_and(|n| state.step.is_multiple_of(n)) {
                self.save(&state, &format!("step_{}.ckpt", state.step))?;
            }
            if reached_target {
                break;
            }
        }
        self.metrics.flush()?;
        Ok(TrainOutcome {
            state,
            best_params,
            evals,
            reached_target,
        })
    }
}

/// Paths written by a run into `dir`.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitFractions;
    use crate::model::ModelConfig;

    fn tiny_run(total_steps: u64) -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            seq_len: 8,
            vocab: 256,
            n_targets: 2,
            dropout_attn: 0.1,
            dropout_relu: 0.1,
            ..ModelConfig::desk()
        };
        run.train.total_steps = total_steps;
        run.train.batch_size = 4;
        run.train.eval_interval = 5;
        run.train.eval = EvalConfig {
            stride: 8,
            max_chars: Some(64),
            ..EvalConfig::new(8, Split::Dev)
        };
        run
    }

    fn corpus() -> Corpus {
        Corpus::from_bytes("t", crate::data::synthetic_text8(4000, 1), SplitFractions::default()).unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let c = corpus();
        let run = tiny_run(0);
        let init = TrainState::fresh(&run).unwrap();
        let mut log = Vec::new();
        let out = Trainer::new(run, &c).unwrap().with_metrics(&mut log).run(init.clone()).unwrap();
        assert_eq!(out.state, init);
        assert!(out.evals.is_empty());
        drop(out);
        assert!(log.is_empty());
    }

    #[test]
    fn metrics_are_reproducible_and_follow_schedule() {
        let c = corpus();
        let run = tiny_run(12);
        let go = || {
            let mut log = Vec::new();
            let init = TrainState::fresh(&run).unwrap();
            let out = Trainer::new(run.clone(), &c).unwrap().with_metrics(&mut log).run(init).unwrap();
            assert_eq!(out.state.step, 12);
            assert_eq!(out.evals.len(), 2);
            drop(out);
            String::from_utf8(log).unwrap()
        };
        let a = go();
        assert_eq!(a, go());
        let schedule = LossSchedule::for_model(&run.model, &run.loss()).unwrap();
        for line in a.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if v["event"] == "step" {
                let step = v["step"].as_u64().unwrap();
                let active: Vec<usize> = serde_json::from_value(v["active_layers"].clone()).unwrap();
                assert_eq!(active, schedule.active_layers(step));
            }
        }
    }

    #[test]
    fn best_checkpoint_is_written() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run(10);
        run.train.checkpoint_interval = Some(5);
        let init = TrainState::fresh(&run).unwrap();
        let out = Trainer::new(run, &c).unwrap().with_out_dir(dir.path()).run(init).unwrap();
        assert!(best_checkpoint(dir.path()).exists());
        assert!(dir.path().join("step_5.ckpt").exists());
        assert!(dir.path().join("step_10.ckpt").exists());
        assert!(out.state.best_bpc.is_some());
    }

    #[test]
    fn diverging_run_stops() {
        let c = corpus();
        let mut run = tiny_run(50);
        run.train.optimizer = OptimizerKind::Sgd;
        run.train.lr = 1e30;
        run.train.eval_interval = 0;
        let dir = tempfile::tempdir().unwrap();
        let init = TrainState::fresh(&run).unwrap();
        let err = Trainer::new(run, &c).unwrap().with_out_dir(dir.path()).run(init).unwrap_err();
        assert!(
            matches!(err, Error::Diverged { consecutive: MAX_BAD_STEPS, .. } | Error::NonFiniteGradient { .. }),
            "{err:?}"
        );
    }
}
