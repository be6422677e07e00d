//! Training of image-perturbation generator networks against feature taps of
//! a substitute classifier, plus evaluation of how well the resulting
//! adversarial examples transfer to classifiers from unseen domains.
//!
//! The crate is organized around the workflow:
//!
//! 1. [`data`] loads source/target datasets (built-in synthetic families or
//!    directory-of-class-folders) and applies the optional augmentation policy.
//! 2. [`models`] builds and trains small classifiers with named feature taps.
//! 3. [`generator`] defines the fully convolutional perturbation network and
//!    the epsilon-ball projection.
//! 4. [`objectives`] implements the cosine feature disruption loss and its
//!    random-normalization / attention variants.
//! 5. [`baselines`] provides the iterative competitor attacks and controls.
//! 6. [`training`] runs the generator optimization loop with checkpointing.
//! 7. [`evalsuite`] measures transferability, runs sweeps and renders reports.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evalsuite;
pub mod generator;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use nn::Tensor4;

/// Pixel batch in [0,1], layout (count, channels, height, width).
pub type ImageBatch = Tensor4;
/// Activation tensor at a tap layer, same layout as [`ImageBatch`].
pub type FeatureTensor = Tensor4;
