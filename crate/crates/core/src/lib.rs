//! Online meta-learning on a non-stationary stream of few-shot tasks.
// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tests compare against literal reference values.
#![cfg_attr(test, allow(clippy::approx_constant, clippy::needless_range_loop))]

pub mod detect;
pub mod error;
pub mod harness;
pub mod learner;
pub mod netcore;
pub mod rng;
pub mod stream;
pub mod theory;

pub use detect::{DetectorParams, EnergySign};
pub use error::{Error, Result};
pub use harness::ExperimentConfig;
pub use learner::{Branch, EpisodeOutcome, Hyperparams, LearnerMode, LearnerState, RunRecord};
pub use netcore::{Activation, LabeledBatch, Matrix, NetConfig, ParamSet};
pub use rng::Rng64;
pub use stream::{DomainSpec, Episode, StreamConfig, TaskSpec};
