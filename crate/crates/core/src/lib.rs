//! Federated-learning simulation lab.
//!
//! Covers the optimization ladder from full-batch gradient descent through
//! mini-batch SGD, parallel SGD and local SGD up to FedAvg with client
//! sampling and weighted or naive aggregation, together with IID and
//! label-skewed data partitioning and the instruments used to observe client
//! drift (per-client loss traces, layer-wise cosine similarity of updates and
//! a closed-form quadratic sandbox).

pub mod model;
pub mod data;
pub mod diagnostics;
pub mod harness;
pub mod optim;
pub mod rng;
pub mod toy;
