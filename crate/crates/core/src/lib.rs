//! Numerical laboratory for activation statistics of residual and
//! residual-free transformer blocks.
//!
//! The crate covers dense linear algebra and orthogonal sampling
//! ([`linalg`]), distributional diagnostics ([`stats`]), weight initializers
//! ([`init`]), decoder blocks with hand-written backward passes ([`model`]),
//! sign and spectral gradient descent ([`optim`]), simulated uniform
//! quantization ([`quant`]), Monte Carlo experiments for the kurtosis and
//! isometry results ([`lab`]) and the training / sweep harness with its CLI
//! ([`harness`]).

// `!(x > 0.0)` is used deliberately so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop, clippy::type_complexity)]

pub mod error;
pub mod harness;
pub mod init;
pub mod lab;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod par;
pub mod quant;
pub mod stats;

pub use error::{LabError, Result};
