//! Deterministic simulator and analysis library for uniform stability in
//! centralized (FedAvg) and decentralized (D-FedAvg) federated learning.
//!
//! The crate builds symmetric doubly stochastic gossip topologies and their
//! spectral profiles, generates heterogeneous synthetic federations, runs
//! coupled twin trainings on one-sample-perturbed data with identical
//! randomness, and compares the measured stability gaps against the
//! topology- and participation-dependent generalization bounds.
//!
//! Heavy workloads (sweep cells, contraction suites) fan out over rayon via
//! [`par::map_jobs`]; disable the default `parallel` feature for a fully
//! sequential build with bit-identical results.

pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod par;
pub mod rng;
pub mod stability;
pub mod topology;

pub use error::{Error, Result};
