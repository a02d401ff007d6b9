//! CascadedGaze restoration network with a self-contained tensor/autodiff
//! core, a training harness, an analytic cost profiler and PPM/PGM image I/O.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod config;
mod conv;
pub mod data;
pub mod error;
pub mod gce;
pub mod gradcheck;
pub mod metrics;
pub mod netpbm;
pub mod network;
pub mod profiler;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::backward;
pub use error::{Error, Result};
pub use tensor::{with_no_grad, Scalar, Shape, Tensor};
