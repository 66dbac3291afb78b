//! Deterministic federated sharpness-aware optimization simulator.
//!
//! The crate is split along the lines of the simulation pipeline:
//!
//! * [`params`] and [`model`]: flat parameter vectors, small differentiable
//!   models with analytic gradients and a finite-difference oracle.
//! * [`rng`], [`data`], [`partition`], [`shard`]: seeded synthetic data,
//!   non-IID device splits and per-device batch streams.
//! * [`optim`]: FedAvg, FedSAM and FedVSSAM device/server state machines.
//! * [`flatness`]: flatness incompatibility and the gradient-deviation
//!   diagnostics used to probe the optimizers.

pub mod data;
pub mod error;
pub mod flatness;
pub mod model;
pub mod optim;
pub mod params;
pub mod partition;
pub mod rng;
pub mod shard;

pub use error::{Error, Result};
pub use params::ParamVector;
