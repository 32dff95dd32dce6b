//! Server side: data-size-weighted model aggregation and the EMA fusion
//! step that blends each round's aggregate with the previous EMA model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy_combine, ParamVector};

/// Weighted average `sum_c p_c * model_c`. Weights must be nonnegative and
/// sum to one within 1e-9.
pub fn aggregate(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if models.is_empty() {
        return Err(Error::InvalidInput("no models to aggregate".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} models vs {} weights",
            models.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "weights must be nonnegative and sum to 1 (sum = {sum})"
        )));
    }
    let dim = models[0].len();
    if let Some(bad) = models.iter().position(|m| m.len() != dim) {
        return Err(Error::Dimension(format!(
            "model {bad} has length {} != {dim}",
            models[bad].len()
        )));
    }
    let mut acc = vec![0.0; dim];
    for (model, &w) in models.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(model.iter()) {
            *a += w * v;
        }
    }
    ParamVector::new(acc)
}

/// EMA decay factor `beta = 2 / (N + 1)` for window size N >= 2.
pub fn beta_from_window(window: usize) -> Result<f64> {
    if window < 2 {
        return Err(Error::InvalidConfig(format!(
            "window size must be >= 2 (got {window}); N = 1 would freeze the EMA"
        )));
    }
    Ok(2.0 / (window as f64 + 1.0))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta must be in [0, 1), got {beta}")));
    }
    Ok(())
}

/// `beta * prev + (1 - beta) * aggregated`.
pub fn ema_update(prev: &ParamVector, aggregated: &ParamVector, beta: f64) -> Result<ParamVector> {
    check_beta(beta)?;
    axpy_combine(beta, prev, 1.0 - beta, aggregated)
}

/// The per-round EMA increment `ema_update(prev, agg, beta) - prev`, which
/// equals `(1 - beta) * (agg - prev)`: the EMA recursion viewed as a
/// momentum step.
pub fn momentum_residual(
    prev: &ParamVector,
    aggregated: &ParamVector,
    beta: f64,
) -> Result<ParamVector> {
    let next = ema_update(prev, aggregated, beta)?;
    axpy_combine(1.0, &next, -1.0, prev)
}

/// Server round state: the EMA model and its decay factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub ema_model: ParamVector,
    pub beta: f64,
}

impl ServerState {
    /// Starts from the shared initial model (round 0 EMA = initial model).
    pub fn new(initial: ParamVector, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(ServerState {
            round: 0,
            ema_model: initial,
            beta,
        })
    }

    /// Aggregates client models and fuses the result into the EMA model.
    /// Returns the aggregated (pre-EMA) model.
    pub fn advance(&mut self, models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
        let aggregated = aggregate(models, weights)?;
        self.ema_model = ema_update(&self.ema_model, &aggregated, self.beta)?;
        self.round += 1;
        Ok(aggregated)
    }
}
