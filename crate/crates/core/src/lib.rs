//! Peer-anchored latent preference trajectories.
//!
//! Sessions with precomputed unit-norm text embeddings are turned into
//! relative states (a user's response minus a similarity-weighted baseline
//! of earlier same-item peer responses), forecast one step ahead, and mapped
//! to a single token embedding for injection into a frozen generator.

pub mod anchor;
pub mod audit;
pub mod bridge;
pub mod corpus;
pub mod diagnostics;
pub mod driftlab;
pub mod format;
pub mod forecast;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod rng;
