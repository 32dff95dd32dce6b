//! Desk-scale federated continual-learning simulator.
//!
//! Vehicles (clients) train a small per-pixel scene classifier on locally
//! generated, temporally drifting synthetic street scenes. Each round the
//! server aggregates client models by data size, then fuses the aggregate
//! with an exponential moving average of past rounds; clients optionally
//! regularize their local loss with the prediction entropy. The crate also
//! ships FedAvg and FedProx baselines, segmentation metrics, and a
//! deterministic experiment orchestrator.

pub mod aggregator;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod orchestrator;
pub mod scenegen;
pub mod seeding;
pub mod segnet;
pub mod vehicle;

pub use error::{Error, Result};
pub use metrics::MetricBundle;
pub use numerics::ParamVector;
pub use orchestrator::{Algorithm, ExperimentConfig, ExperimentReport, RoundRecord, RunOutput};
pub use segnet::{Batch, ModelConfig, RegSign};
