//! Estimating fine-tuning losses of task subsets from gradients taken at a
//! multitask meta-initialization.
//!
//! The pipeline:
//!
//! 1. [`trainer::meta_train`] fits a small network on every task at once,
//!    producing the expansion point `theta_star`.
//! 2. [`linearize::build_cache`] stores, for each training sample, the signed
//!    margin `b = -y h(theta_star)` and the margin gradient projected to `d`
//!    dimensions by a seeded Gaussian [`project::Projector`].
//! 3. [`estimate`] solves a ridge-regularized logistic regression in the
//!    projected space for each subset, lifts the minimizer back, and scores
//!    the target validation set with a true forward pass.
//! 4. [`select`] drives forward selection and random ensembles with either
//!    the estimator or the brute-force fine-tuning oracle.
//!
//! [`bench`] holds metrics, cost accounting and the canned experiments.

pub mod bench;
pub mod digest;
pub mod error;
pub mod estimate;
pub mod linearize;
pub mod model;
pub mod project;
pub mod select;
pub mod taskgen;
pub mod trainer;

pub use error::{GradexError, Result};

/// Task identifier. `0` is always the target task; sources are `1..=n`.
pub type TaskId = u16;

/// Id reserved for the target task.
pub const TARGET_TASK: TaskId = 0;

/// A subset of source tasks, kept sorted.
pub type TaskSet = std::collections::BTreeSet<TaskId>;
