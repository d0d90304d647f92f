//! Plain SGD and heavy-ball momentum over a parameter list.
//!
//! Parameters whose gradient was never populated (heads outside the active
//! schedule, for instance) are left untouched and their velocity is not
//! decayed.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Nesterov => "nesterov",
        }
    }

    pub fn uses_velocity(self) -> bool {
        self != OptimizerKind::Sgd
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "nesterov" => Ok(OptimizerKind::Nesterov),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

/// Fails on the first parameter holding a NaN or infinite gradient.
pub fn check_finite<T: Scalar>(params: &[Tensor<T>], names: &[String]) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient {
                param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            });
        }
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], names: &[String], lr: f64) -> Result<()> {
    check_finite(params, names)?;
    let lr = T::from_f64(lr);
    for p in params.iter_mut() {
        let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
        p.data_mut().iter_mut().zip(&g).for_each(|(x, &gi)| *x = *x - lr * gi);
    }
    Ok(())
}

/// `v ← μ·v + g`, then `p ← p − lr·v`, or `p ← p − lr·(g + μ·v)` with
/// `nesterov`. Velocity buffers are matched to parameters by index.
pub fn momentum_step<T: Scalar>(
    params: &mut [Tensor<T>],
    names: &[String],
    velocity: &mut [Vec<T>],
    lr: f64,
    mu: f64,
    nesterov: bool,
) -> Result<()> {
    if velocity.len() != params.len() {
        return Err(Error::shape("momentum velocity", &[params.len()], &[velocity.len()]));
    }
    for (p, v) in params.iter().zip(velocity.iter()) {
        if p.numel() != v.len() {
            return Err(Error::shape("momentum velocity", p.shape(), &[v.len()]));
        }
    }
    check_finite(params, names)?;
    let (lr, mu) = (T::from_f64(lr), T::from_f64(mu));
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
        for ((x, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = mu * *vi + gi;
            let update = if nesterov { gi + mu * *vi } else { *vi };
            *x = *x - lr * update;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    norm
}

/// Optimizer settings plus the velocity state they need.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Scalar = f32> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, grad_clip: Option<f64>, params: &[Tensor<T>]) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} must lie in [0, 1)")));
        }
        if grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        let velocity = if kind.uses_velocity() {
            params.iter().map(|p| vec![T::zero(); p.numel()]).collect()
        } else {
            Vec::new()
        };
        Ok(Optimizer {
            kind,
            lr,
            momentum,
            grad_clip,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint("velocity buffers do not match the parameters".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Returns the gradient norm when clipping is enabled.
    pub fn step(&mut self, params: &mut [Tensor<T>], names: &[String]) -> Result<Option<f64>> {
        check_finite(params, names)?;
        let norm = self.grad_clip.map(|c| clip_grad_norm(params, c));
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, names, self.lr)?,
            OptimizerKind::Momentum | OptimizerKind::Nesterov => momentum_step(
                params,
                names,
                &mut self.velocity,
                self.lr,
                self.momentum,
                self.kind == OptimizerKind::Nesterov,
            )?,
        }
        Ok(norm)
    }
}
