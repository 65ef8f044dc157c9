//! Single-process federated learning simulator.
//!
//! The crate bundles a small dense-network autodiff core ([`model`]), dataset
//! ingestion and non-i.i.d. partitioning ([`data`]), the federated round loop
//! with FedAvg/FedProx/FedCurv/SCAFFOLD baselines ([`fl`]), pseudo-data
//! regularized local training ([`fedreg`]), a DPSGD defense and gradient
//! inversion attack ([`privacy`]), forgetting and Fisher diagnostics
//! ([`diagnostics`]) and the experiment driver ([`cli`]).

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fedreg;
pub mod fl;
pub mod model;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
pub use model::{Batch, ModelSpec, ParamVector};
