//! Photon-limited snapshot compressive imaging (SCI) toolkit.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`maskgen`] builds hardware-friendly binary masks by tiling small
//!   Bernoulli sub-masks over the frame.
//! * [`sensor`] implements the coded-exposure forward model (modulation,
//!   temporal integration, Poisson-Gaussian noise) and the pre-processing
//!   that turns a raw measurement into network input channels.
//! * [`nnet`] is a small reverse-mode differentiation core plus the
//!   compressive denoising autoencoder built on it.
//! * [`train`] runs rate-constrained training (task loss plus a
//!   generalized-Gaussian rate penalty) with Adam.
//! * [`egcodec`] provides exponential-Golomb coding and the EGCR
//!   compactness metric.
//! * [`tasks`] holds task losses, fine-tuning and evaluation metrics.
//! * [`scenegen`] renders synthetic scenes with exact edge/depth truth.
//! * [`cli`] wires everything into the `sci` executable.

pub mod cdt;
pub mod cli;
pub mod config;
pub mod egcodec;
pub mod error;
pub mod maskgen;
pub mod nnet;
pub mod rng;
pub mod scenegen;
pub mod sensor;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use rng::{derive_stream, RandomStream};
pub use tensor::{Real, Tensor};
pub use types::{MaskStack, Measurement, PhotonModel, SubMaskStack, VideoCube};
