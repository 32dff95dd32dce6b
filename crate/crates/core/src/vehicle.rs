//! One simulated vehicle: tau local Adam steps on the round's shard,
//! starting from the model the server distributed. Supports the
//! entropy-regularized objective and a FedProx proximal objective as a
//! baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::scenegen::{batch_from_scenes, LabeledScene};
use crate::segnet::{self, Batch, ModelConfig, RegSign};

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam moment buffers and step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        OptimizerState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            config,
        }
    }

    /// One bias-corrected Adam step; weight decay is decoupled, subtracted
    /// after the adaptive update as `lr * wd * params`.
    pub fn adam_step(&mut self, params: &ParamVector, grad: &ParamVector) -> Result<ParamVector> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer dim {} vs params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::OptimizerFailure("non-finite gradient".into()));
        }
        let c = &self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let p = params[i];
            out.push(p - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon)
                - c.learning_rate * c.weight_decay * p);
        }
        ParamVector::new(out)
    }
}

/// The local objective a vehicle optimizes.
#[derive(Debug, Clone)]
pub enum LocalObjective {
    /// Cross-entropy plus `sign * lambda * H` (FedEMA / FedAvg with
    /// lambda = 0).
    EntropyRegularized { lambda: f64, sign: RegSign },
    /// Cross-entropy plus `(mu/2) * ||params - anchor||^2` (FedProx).
    Proximal { mu: f64, anchor: ParamVector },
}

impl LocalObjective {
    fn value(&self, model: &ModelConfig, params: &ParamVector, batch: &Batch) -> Result<f64> {
        match self {
            LocalObjective::EntropyRegularized { lambda, sign } => {
                segnet::objective(model, params, batch, *lambda, *sign)
            }
            LocalObjective::Proximal { mu, anchor } => {
                fedprox_objective(model, params, batch, anchor, *mu)
            }
        }
    }

    fn gradient(&self, model: &ModelConfig, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        match self {
            LocalObjective::EntropyRegularized { lambda, sign } => {
                segnet::backward(model, params, batch, *lambda, *sign)
            }
            LocalObjective::Proximal { mu, anchor } => {
                if anchor.len() != params.len() {
                    return Err(Error::Dimension(format!(
                        "anchor len {} vs params len {}",
                        anchor.len(),
                        params.len()
                    )));
                }
                let ce_grad = segnet::backward(model, params, batch, 0.0, RegSign::Plus)?;
                let values = ce_grad
                    .iter()
                    .zip(params.iter().zip(anchor.iter()))
                    .map(|(g, (p, a))| g + mu * (p - a))
                    .collect();
                ParamVector::new(values)
            }
        }
    }
}

/// `cross_entropy + (mu/2) * ||params - anchor||^2`.
pub fn fedprox_objective(
    model: &ModelConfig,
    params: &ParamVector,
    batch: &Batch,
    anchor: &ParamVector,
    mu: f64,
) -> Result<f64> {
    if mu < 0.0 {
        return Err(Error::InvalidConfig(format!("mu must be >= 0, got {mu}")));
    }
    if anchor.len() != params.len() {
        return Err(Error::Dimension(format!(
            "anchor len {} vs params len {}",
            anchor.len(),
            params.len()
        )));
    }
    let ce = segnet::objective(model, params, batch, 0.0, RegSign::Plus)?;
    let prox: f64 = params
        .iter()
        .zip(anchor.iter())
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok(ce + 0.5 * mu * prox)
}

/// Result of one round of local training.
#[derive(Debug, Clone)]
pub struct LocalTrainReport {
    pub final_params: ParamVector,
    /// Objective value at the start of each step.
    pub step_objectives: Vec<f64>,
    /// Squared gradient norm at each step.
    pub step_grad_norm_sq: Vec<f64>,
    pub steps: usize,
}

/// Runs exactly `tau` Adam steps on the shard. The shard is shuffled once
/// from `seed` and consumed cyclically in batches of `batch_images` images.
/// Deterministic in all inputs; optimizer state starts fresh each call.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    model: &ModelConfig,
    start: &ParamVector,
    shard: &[LabeledScene],
    objective: &LocalObjective,
    optimizer: AdamConfig,
    tau: usize,
    batch_images: usize,
    seed: u64,
) -> Result<LocalTrainReport> {
    if shard.is_empty() {
        return Err(Error::InvalidConfig("empty shard".into()));
    }
    if batch_images == 0 {
        return Err(Error::InvalidConfig("batch_images must be >= 1".into()));
    }

    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut params = start.clone();
    let mut state = OptimizerState::new(start.len(), optimizer);
    let mut step_objectives = Vec::with_capacity(tau);
    let mut step_grad_norm_sq = Vec::with_capacity(tau);

    let mut cursor = 0usize;
    for _ in 0..tau {
        let scenes: Vec<&LabeledScene> = (0..batch_images.min(shard.len()))
            .map(|i| &shard[order[(cursor + i) % shard.len()]])
            .collect();
        cursor = (cursor + batch_images) % shard.len();

        let batch = batch_from_scenes(&scenes, model)?;
        step_objectives.push(objective.value(model, &params, &batch)?);
        let grad = objective.gradient(model, &params, &batch)?;
        step_grad_norm_sq.push(grad.norm_sq());
        params = state.adam_step(&params, &grad)?;
    }

    Ok(LocalTrainReport {
        final_params: params,
        step_objectives,
        step_grad_norm_sq,
        steps: tau,
    })
}
