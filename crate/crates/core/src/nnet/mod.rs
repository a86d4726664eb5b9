//! Differentiable core and the compressive denoising autoencoder.

mod checkpoint;
mod gradcheck;
mod model;
mod params;
pub mod tape;

pub use checkpoint::{AdamState, Checkpoint};
pub use gradcheck::{gradcheck, gradcheck_config, gradcheck_model, relative_error, GradcheckReport};
pub use model::{param_count, HeadKind, Model, ModelConfig, DEPTH_MAX, DEPTH_MIN};
pub use params::{ParamEntry, ParamSet, Partition};
