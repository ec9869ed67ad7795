//! Hybrid multiple attention for segmentation: class augmented attention with
//! class channel recalibration, region shuffle attention, a toy network that
//! fuses both, and the tooling around them (autodiff tape, gradient checks,
//! complexity analysis, metrics, synthetic data).

pub mod caa;
pub mod complexity;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hmat;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod params;
pub mod rsa;
pub mod sa;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{DType, Tensor};
