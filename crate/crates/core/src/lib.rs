//! Variational autoencoders with calibrated decoders.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: dense tensors, a define-by-run autodiff tape, a seeded
//!   random source and a finite-difference gradient checker.
//! - [`decoders`]: negative log-likelihood kernels for every decoding
//!   distribution, variance clipping, the analytic optimal variance and
//!   decoder sampling.
//! - [`vae`]: MLP encoder/decoder and the training objectives.
//! - [`training`]: Adam, the training loop and checkpoints.
//! - [`metrics`]: test ELBO, mutual information / marginal KL estimates,
//!   Monte-Carlo error of the variance estimate and sweep drivers.
//! - [`data`]: synthetic sprites, IDX loading and PGM/PPM grids.

pub mod data;
pub mod decoders;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
pub use data::{Dataset, Split, SpriteConfig};
pub use decoders::{ClipBounds, DecoderKind, DecoderSpec, SampleMode, SharingScheme};
pub use metrics::{EvalSettings, MetricsRecord};
pub use numerics::{Rng, Tape, Tensor, Var};
pub use training::{Checkpoint, TrainConfig};
pub use vae::{ModelConfig, ObjectiveMode, VaeModel};
