//! E(n)-equivariant graph neural networks on a self-contained f64
//! reverse-mode autodiff core.
//!
//! The crate provides:
//!
//! - [`tensor`]: dense tensors and the gradient tape;
//! - [`nn`]: the MLP blocks shared by all layer types;
//! - [`model`]: the equivariant layer (with velocity and soft-edge
//!   variants), message-passing baselines, the distance decoder and
//!   the pooled readout;
//! - [`equivariance`]: random Euclidean transforms, equivariance
//!   checks, and distance-geometry reconstruction;
//! - [`nbody`]: a charged-particle trajectory generator;
//! - [`graphs`]: random graph generators for autoencoding;
//! - [`train`]: Adam, losses, metrics and the experiment loops;
//! - [`cli`]: the `egnn` command-line entry point.
//!
//! The `examples/` directory has one runnable example per capability;
//! start with `cargo run --release --example audit_equivariance`.

pub mod cli;
pub mod equivariance;
pub mod error;
pub mod graphs;
pub mod model;
pub mod nbody;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
