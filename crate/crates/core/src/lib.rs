//! Sparse pseudo-input Gaussian-process SARSA with recursive updates.
//!
//! * [`blockinv`]: SPD inverses under bordered and rank-one updates.
//! * [`kernel`]: covariance functions and temporal-difference kernel terms.
//! * [`tdmodel`]: transition datasets and the Bellman matrix.
//! * [`batch`]: dense exact and sparse posteriors, evidence, refinement.
//! * [`recursive`]: per-transition and per-pseudo-input posterior updates.
//! * [`simenv`]: small MDPs, policies and a policy-evaluation harness.
//! * [`experiments`]: validation suites, timing runs and posterior curves.

// `!(x > floor)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod blockinv;
pub mod error;
pub mod experiments;
pub mod kernel;
pub mod recursive;
pub mod simenv;
pub mod tdmodel;

pub use batch::{PosteriorParams, PredictiveMoments, PseudoInputSet};
pub use error::{Error, Result};
pub use kernel::{KernelSpec, StateAction};
pub use recursive::RecursiveState;
pub use tdmodel::{BellmanMatrix, TransitionDataset};
