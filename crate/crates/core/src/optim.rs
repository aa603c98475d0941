//! First-order optimizers for client-side training.
//!
//! Momentum is the classical heavy-ball form `v ← βv + g`, `p ← p − lr·v`.
//! A fresh [`OptimizerState`] is created for every local update, so velocity
//! never carries across federated rounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Sgd
}

fn default_beta() -> f64 {
    0.9
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, lr, beta: 0.0 }
    }

    pub fn momentum(lr: f64, beta: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Momentum, lr, beta }
    }

    /// Checks ranges; `path` prefixes field names in error messages.
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{path}.lr must be > 0, got {}", self.lr)));
        }
        if self.kind == OptimizerKind::Momentum && !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("{path}.beta must be in [0, 1), got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Empty for plain SGD.
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let velocity = match config.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Momentum => vec![0.0; n_params],
        };
        OptimizerState { config, velocity }
    }

    /// Applies one step in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len(params, grad)?;
        let lr = self.config.lr;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum => {
                if self.velocity.len() != params.len() {
                    return Err(Error::shape(format!(
                        "velocity has {} entries, params have {}",
                        self.velocity.len(),
                        params.len()
                    )));
                }
                let beta = self.config.beta;
                for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
                    *v = beta * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        Ok(())
    }
}

fn check_len(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries, params have {}",
            grad.len(),
            params.len()
        )));
    }
    Ok(())
}

/// `p − lr·g`.
pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    check_len(params, grad)?;
    Ok(params.iter().zip(grad).map(|(p, g)| p - lr * g).collect())
}

pub fn momentum_step(
    state: &OptimizerState,
    params: &[f64],
    grad: &[f64],
) -> Result<(Vec<f64>, OptimizerState)> {
    let mut next = state.clone();
    let mut p = params.to_vec();
    next.step(&mut p, grad)?;
    Ok((p, next))
}
