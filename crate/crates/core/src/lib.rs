//! Continual meta-learning over a stream of few-shot episodes from
//! imbalanced, sequentially shifting latent domains.
//!
//! The crate provides the building blocks and an experiment harness:
//!
//! - [`kernel`]: RBF kernel and MMD² U-statistic primitives.
//! - [`detector`]: online domain change detection (task embedding, EMA
//!   projection space, adaptive threshold).
//! - [`learner`]: a small analytic-gradient prototype classifier standing in
//!   for a CNN meta-learner (episodes, embeddings, losses, gradients).
//! - [`memory`]: capacity-bounded task memory with difficulty- and
//!   distribution-aware insertion/eviction, plus a reservoir baseline.
//! - [`sampler`]: adaptive replay sampling with importance weights and the
//!   variance-optimality machinery behind it.
//! - [`stream`]: synthetic imbalanced-domain episode streams with ground
//!   truth change points.
//! - [`harness`]: end-to-end experiment orchestration, metrics, and traces.

pub mod config;
pub mod detector;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod learner;
pub mod memory;
pub mod report;
pub mod sampler;
pub mod stream;

pub use config::RunConfig;
pub use detector::{Detector, DetectorConfig, MomentSource};
pub use error::{Error, Result};
pub use harness::{RunReport, run};
pub use kernel::{KernelConfig, WindowPair};
pub use learner::{Episode, Example, Model, ModelConfig};
pub use memory::{ClusterImportance, MemoryBuffer, TaskRecord};
pub use sampler::{SamplingPlan, WeightedBatch};
pub use stream::{DomainSpec, Schedule};
