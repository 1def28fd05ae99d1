//! Spatial-spectral residual CNN for hyperspectral image denoising.
//!
//! The crate covers the whole pipeline: noise simulation ([`noise`]), cube I/O
//! and patch preparation ([`cube`], [`pipeline`]), the network with hand-written
//! backpropagation ([`layers`], [`model`]), Adam training ([`trainer`]),
//! band-by-band inference ([`inference`]), quality metrics ([`metrics`]) and the
//! `hsid` command line harness ([`cli`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cube;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{HsidError, Result};
pub use model::{ArchitectureSpec, ModelParams};
pub use tensor::{Scalar, Tensor};
