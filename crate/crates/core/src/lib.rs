//! Vertical federated learning with backward updating.
//!
//! Parties hold disjoint feature blocks of every sample; only active parties
//! see labels. An active party aggregates `w^T x_i` through masked tree
//! aggregation, turns it into the scalar `theta = dL/d(w^T x_i)` and
//! broadcasts `(theta, i)`, letting every party update its own block
//! without seeing a label. SGD, SVRG and SAGA variants run under a
//! deterministic interleaver or real threads.

pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optimizers;
pub mod reference;
pub mod runtime;
pub mod secure_agg;
pub mod synthetic;

pub use error::{Error, Result};
pub use model::{
    assign_roles, block_view, make_partition, Algorithm, FeaturePartition, HyperParams, ModelState, PartyRole,
    RoleKind,
};
pub use objectives::{LossKind, RegularizerKind};
pub use runtime::{run, run_speedup_suite, run_with_eval, Mode, SimConfig, ThetaMessage, TrainingTrace};
