//! Bayesian detect-to-track: a hidden-Markov model of multi-object dynamics
//! and detector emissions, a particle filter with conjugate proposals, a
//! variational SMC learning objective, a synthetic scene simulator, baselines
//! and detection metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod baselines;
pub mod clustering;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod simulator;
pub mod types;
pub mod vsmc;

pub use error::{Error, Result};
pub use types::{
    AnchorObservation, AssociationResult, BBox, Cluster, FrameObservations, ModelParams,
    MotionParams, ObjectState,
};
