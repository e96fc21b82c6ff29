//! Desk-scale federated learning simulator for studying backdoor attacks
//! and defenses on small fully-connected models.
//!
//! The crate wires together:
//! - [`autodiff`]: reverse-mode differentiation over dense f64 tensors,
//! - [`model`]: a small MLP classifier with penultimate-layer access,
//! - [`data`]: IDX loading, synthetic blobs, Dirichlet partitioning,
//! - [`attack`]: BadNets-style patch poisoning,
//! - [`aggregation`]: FedAvg, Krum, MultiKrum, RLR,
//! - [`defense`]: perturbation-trigger generation, benign adversarial
//!   perturbation, and adaptive loss scaling,
//! - [`orchestrator`]: the round loop tying clients and server together,
//! - [`config`] / [`io`]: JSON configs, CSV metrics, checkpoints, manifests.

pub mod aggregation;
pub mod attack;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod io;
pub mod model;
pub mod orchestrator;
pub mod seed;

pub use error::{Result, SimError};
