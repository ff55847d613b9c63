//! Bayesian discovery of separate mean and variance causal graphs from
//! heteroscedastic observational data.
//!
//! The crate learns a variational posterior over pairs of DAGs that share a
//! topological ordering, using a heteroscedastic Gaussian likelihood whose
//! mean and log-variance functions are small leaky-ReLU networks. It also
//! provides synthetic data generators, structure-learning metrics, exact
//! posterior enumeration for small graphs, and the command-line workflow.

pub mod checkpoint;
pub mod cli;
pub mod dag_posterior;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod hnm;
pub mod ingest;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod ordering;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
