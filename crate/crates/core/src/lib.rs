//! Compute-budgeted rehearsal laboratory for continual learning.
//!
//! Fine-tuning a model on a new task damages regions of the prior task's data
//! distribution ("collateral damage": samples the base model got right and the
//! fine-tuned model gets wrong). This crate implements rehearsal strategies
//! that mix prior-task samples back into the fine-tuning stream under a fixed
//! compute budget, including a collateral-damage-prioritized sampler whose
//! per-bin damage-ratio estimates come for free from the forward passes the
//! training loop already performs.
//!
//! The pieces:
//!
//! - [`dataset`]: reproducible synthetic two-task Gaussian-mixture benchmarks
//!   with controllable forgetting structure.
//! - [`model`]: a from-scratch softmax classifier (optional tanh hidden layer)
//!   with analytic gradients and SGD.
//! - [`partition`]: bin functions over the prior data (loss quantiles,
//!   meta-labels, products, k-means) plus KL-based effectiveness testing and
//!   factored joint damage-ratio estimation.
//! - [`damage`]: the collateral-damage indicator in classification and
//!   loss-threshold forms.
//! - [`estimator`]: streaming per-bin damage-ratio estimates from running
//!   counts, plus the holdout-based unbiased variant.
//! - [`sampler`]: budget-matched rehearsal strategies (uniform, mix-cd,
//!   uncertainty, mir++).
//! - [`budget`]: the forward/backward/train-sample unit ledger that keeps
//!   strategies at identical total compute.
//! - [`harness`]: the end-to-end fine-tuning loop, sweeps, and run records.
//! - [`report`]: Pareto frontiers, damage-proportion and per-bin tables, SVG.

pub mod benchmark;
pub mod budget;
pub mod damage;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod partition;
pub mod report;
pub mod sampler;

pub use error::{Error, Result};
