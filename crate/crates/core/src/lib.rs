//! Structural mixture of residual experts.
//!
//! Hierarchical low-rank adapters whose experts are wired into a per-token
//! routing tree, with exact flexibility counting, cost models and
//! brute-force oracles for every construction.

pub mod cli;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod experts;
pub mod flexibility;
pub mod numerics;
pub mod propagate;
pub mod router;
pub mod trainer;
pub mod verify;

pub use config::{Activation, ArchitectureSpec, DimensionSchedule, Gate, RoutingDirection, Variant};
pub use error::{Error, Result};
