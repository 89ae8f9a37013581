//! Desk-scale simulator of federated learning under heterogeneous label
//! noise.
//!
//! Clients hold Non-IID, partially mislabeled data. Besides plain federated
//! averaging, a small-loss baseline, and a clean-label oracle, the crate
//! implements neighbor-assisted sample selection: the server scores every
//! known client by data expertise (normalized training accuracy) and data
//! similarity (cosine similarity of softmax outputs on a shared Gaussian
//! probe), and each participant ensembles per-example clean posteriors from
//! loss-distribution mixtures of its own model and its k most reliable
//! neighbors, training only on examples that come out likely-clean.
//!
//! Everything is deterministic given a master seed; local updates within a
//! round can run in parallel without changing any output byte.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gmm;
pub mod metrics;
pub mod model;
pub mod reliability;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
pub use rng::RngStream;
