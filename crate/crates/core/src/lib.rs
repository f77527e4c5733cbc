//! Neural tangent kernels and surrogate-gradient NTKs for fully connected
//! networks with `erf(m·z)` and `sign` activations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod data;
pub mod dual;
pub mod empirical;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod training;

pub use activations::{Activation, Backward, ScalarMap, Surrogate};
pub use data::Dataset;
pub use dual::Cov2;
pub use error::{Error, Result};
pub use gp::{GpPosterior, Horizon, Prediction};
pub use kernels::{KernelKind, KernelMatrix, KernelMode, KernelSpec, KernelValue};
pub use linalg::{Matrix, SymEig};
pub use network::{Network, NetworkConfig};
pub use training::{TrainConfig, TrainRule, TrainTrace};
