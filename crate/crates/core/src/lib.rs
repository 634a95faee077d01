//! Backbone-augmented training data selection.
//!
//! Candidates from a backbone pool are scored by their estimated effect on
//! the adaptation task's asymptotic error, the top share implied by the
//! augmentation ratio `γ` is added to the adaptation set, and the adapter is
//! retrained on the union. The [`oracle`] module holds dense brute-force
//! references for every fast path.

// `!(x > 0.0)` is how the validators reject NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod influence;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod selection;
pub mod stats;
pub mod train;

pub use data::{Dataset, LabeledExample, Split};
pub use error::{Error, ErrorClass, Result};
pub use influence::{
    build_curvature, collect_gradients, estimate_q, score_z, CurvatureMode, CurvatureOperator, DampingPolicy, GradientBundle, ScoreMode,
    ScoringContext, ValidationCurvature, ZScorer,
};
pub use model::{forward, grad_per_layer, loss, Activation, Head, LossKind, LossSpec, ModelParameters, ModelSpec, Prediction};
pub use selection::{
    backbone_quota, choose_eta, run_albat, select, subsample_pool, ScoreInput, ScoreRecord, SelectionConfig, SelectionResult, Threshold,
};
pub use train::{train, TrainConfig, TrainOutcome};
